//! Dataflow graph of primitive ops with a recording forward pass and
//! reverse-mode differentiation.
//!
//! Nodes are stored in topological order: a node may only consume nodes
//! created before it, so the construction sequence fixes the evaluation
//! order. Convolutions are stride 1 with zero "same" padding; pooling uses a
//! stride equal to its window.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    /// Weight `[out, in, k, k]`, `k` odd.
    Conv2d { param: usize, kernel: usize, padding: Padding },
    /// Weight `[out, in]` applied to the flattened input.
    Dense { param: usize },
    /// Per-channel bias over `[C, H, W]` or per-element over `[C]`.
    BiasAdd { param: usize },
    Relu,
    Add,
    AvgPool { window: usize },
    GlobalAvgPool,
    Logits,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Conv2d { .. } => "conv2d",
            Op::Dense { .. } => "dense",
            Op::BiasAdd { .. } => "bias-add",
            Op::Relu => "relu",
            Op::Add => "add",
            Op::AvgPool { .. } => "avg-pool",
            Op::GlobalAvgPool => "global-avg-pool",
            Op::Logits => "logits",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding, output keeps the input's spatial size.
    Same,
    Valid,
}

impl Padding {
    fn amount(self, kernel: usize) -> usize {
        match self {
            Padding::Same => kernel / 2,
            Padding::Valid => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
}

impl Node {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Param>,
    input: NodeId,
    logits: NodeId,
}

#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    params: Vec<Param>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn shape_of(&self, id: NodeId) -> Result<&[usize]> {
        self.nodes
            .get(id)
            .map(|n| n.shape.as_slice())
            .ok_or_else(|| Error::Config(format!("unknown node {id}")))
    }

    fn push(&mut self, name: &str, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { name: name.to_string(), op, inputs, shape });
        self.nodes.len() - 1
    }

    fn add_param(&mut self, name: &str, shape: &[usize]) -> Result<usize> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.params.push(Param { name: name.to_string(), value: Tensor::zeros(shape) });
        Ok(self.params.len() - 1)
    }

    pub fn input(&mut self, shape: &[usize]) -> NodeId {
        self.push("input", Op::Input, vec![], shape.to_vec())
    }

    pub fn conv2d(&mut self, name: &str, x: NodeId, out_channels: usize, kernel: usize) -> Result<NodeId> {
        self.conv2d_padded(name, x, out_channels, kernel, Padding::Same)
    }

    pub fn conv2d_padded(
        &mut self,
        name: &str,
        x: NodeId,
        out_channels: usize,
        kernel: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let (c, h, w) = match *self.shape_of(x)? {
            [c, h, w] => (c, h, w),
            ref s => return Err(Error::Config(format!("{name}: conv2d needs [C,H,W], got {s:?}"))),
        };
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("{name}: kernel size must be odd")));
        }
        let pad = padding.amount(kernel);
        if h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(Error::Config(format!("{name}: kernel larger than input")));
        }
        let (oh, ow) = (h + 2 * pad + 1 - kernel, w + 2 * pad + 1 - kernel);
        let param = self.add_param(name, &[out_channels, c, kernel, kernel])?;
        Ok(self.push(name, Op::Conv2d { param, kernel, padding }, vec![x], vec![out_channels, oh, ow]))
    }

    pub fn dense(&mut self, name: &str, x: NodeId, out: usize) -> Result<NodeId> {
        let n: usize = self.shape_of(x)?.iter().product();
        let param = self.add_param(name, &[out, n])?;
        Ok(self.push(name, Op::Dense { param }, vec![x], vec![out]))
    }

    pub fn bias_add(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let shape = self.shape_of(x)?.to_vec();
        if shape.len() != 1 && shape.len() != 3 {
            return Err(Error::Config(format!("{name}: bias-add needs [C] or [C,H,W]")));
        }
        let param = self.add_param(name, &[shape[0]])?;
        Ok(self.push(name, Op::BiasAdd { param }, vec![x], shape))
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let shape = self.shape_of(x)?.to_vec();
        Ok(self.push(name, Op::Relu, vec![x], shape))
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape_of(a)?.to_vec();
        if sa != self.shape_of(b)? {
            return Err(Error::Config(format!("{name}: add operands differ in shape")));
        }
        Ok(self.push(name, Op::Add, vec![a, b], sa))
    }

    pub fn avg_pool(&mut self, name: &str, x: NodeId, window: usize) -> Result<NodeId> {
        let (c, h, w) = match *self.shape_of(x)? {
            [c, h, w] => (c, h, w),
            ref s => return Err(Error::Config(format!("{name}: avg-pool needs [C,H,W], got {s:?}"))),
        };
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::Config(format!("{name}: window {window} does not tile {h}x{w}")));
        }
        Ok(self.push(name, Op::AvgPool { window }, vec![x], vec![c, h / window, w / window]))
    }

    pub fn global_avg_pool(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let c = match *self.shape_of(x)? {
            [c, _, _] => c,
            ref s => return Err(Error::Config(format!("{name}: pooling needs [C,H,W], got {s:?}"))),
        };
        Ok(self.push(name, Op::GlobalAvgPool, vec![x], vec![c]))
    }

    pub fn logits(&mut self, x: NodeId) -> Result<NodeId> {
        let n: usize = self.shape_of(x)?.iter().product();
        Ok(self.push("logits", Op::Logits, vec![x], vec![n]))
    }

    pub fn build(self) -> Result<Graph> {
        let inputs: Vec<_> = self.nodes.iter().positions(|n| n.op == Op::Input);
        let logits: Vec<_> = self.nodes.iter().positions(|n| n.op == Op::Logits);
        if inputs.len() != 1 || logits.len() != 1 {
            return Err(Error::Config(format!(
                "graph needs exactly one input and one logits node (found {} and {})",
                inputs.len(),
                logits.len()
            )));
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.inputs.iter().any(|&i| i >= id) {
                return Err(Error::Config(format!("node {} is not topologically ordered", node.name)));
            }
        }
        let mut names: Vec<&str> = self.nodes.iter().map(|n| n.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate node names".into()));
        }
        Ok(Graph { nodes: self.nodes, params: self.params, input: inputs[0], logits: logits[0] })
    }
}

trait Positions: Iterator {
    fn positions(self, pred: impl Fn(&Self::Item) -> bool) -> Vec<usize>;
}

impl<I: Iterator> Positions for I {
    fn positions(self, pred: impl Fn(&Self::Item) -> bool) -> Vec<usize> {
        self.enumerate().filter(|(_, x)| pred(x)).map(|(i, _)| i).collect()
    }
}

/// Activation overrides applied during a forward pass.
///
/// `Clamp` bounds a node's values and blocks the gradient through clamped
/// entries; `Replace` substitutes the node's values and blocks all upstream
/// gradient. Both change the dataflow of the original model.
#[derive(Debug, Clone)]
pub enum Override {
    Clamp { low: Vec<f32>, high: Vec<f32> },
    Replace(Vec<f32>),
}

#[derive(Debug, Clone, Default)]
pub struct Overlay {
    sites: Vec<(NodeId, Override)>,
}

impl Overlay {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, node: NodeId, ov: Override) -> Self {
        self.sites.push((node, ov));
        self
    }

    fn get(&self, node: NodeId) -> Option<&Override> {
        self.sites.iter().find(|(n, _)| *n == node).map(|(_, o)| o)
    }
}

/// Activations recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct Tape<'g> {
    graph: &'g Graph,
    acts: Vec<Tensor>,
    // Gradient pass-through mask for overridden nodes.
    masks: Vec<Option<Vec<bool>>>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Tensor>,
    params: Option<Vec<Tensor>>,
    input: NodeId,
}

impl Gradients {
    pub fn input(&self) -> &Tensor {
        &self.nodes[self.input]
    }

    pub fn into_input(mut self) -> Tensor {
        self.nodes.swap_remove(self.input)
    }

    pub fn node(&self, id: NodeId) -> &Tensor {
        &self.nodes[id]
    }

    pub fn params(&self) -> Option<&[Tensor]> {
        self.params.as_deref()
    }
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn input_id(&self) -> NodeId {
        self.input
    }

    pub fn logits_id(&self) -> NodeId {
        self.logits
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.nodes[self.input].shape
    }

    pub fn classes(&self) -> usize {
        self.nodes[self.logits].shape[0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    /// Replaces every parameter; names and shapes must match exactly.
    pub fn set_params(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                named.len()
            )));
        }
        let mut staged = Vec::with_capacity(named.len());
        for (name, value) in named {
            let idx = self
                .params
                .iter()
                .position(|p| p.name == name)
                .ok_or_else(|| Error::Shape(format!("unexpected parameter {name}")))?;
            if self.params[idx].value.shape() != value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name}: expected {:?}, got {:?}",
                    self.params[idx].value.shape(),
                    value.shape()
                )));
            }
            staged.push((idx, value));
        }
        for (idx, value) in staged {
            self.params[idx].value = value;
        }
        Ok(())
    }

    /// Direct consumers of every node.
    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            for &i in &node.inputs {
                out[i].push(id);
            }
        }
        out
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Tape<'_>)> {
        self.forward_with(input, &Overlay::default())
    }

    pub fn forward_with(&self, input: &Tensor, overlay: &Overlay) -> Result<(Tensor, Tape<'_>)> {
        if input.shape() != self.input_shape() {
            return Err(Error::Config(format!(
                "input shape {:?} does not match graph input {:?}",
                input.shape(),
                self.input_shape()
            )));
        }
        let mut acts: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut masks = vec![None; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            let mut out = match &node.op {
                Op::Input => input.clone(),
                op => self.eval(node, op, &acts),
            };
            if let Some(ov) = overlay.get(id) {
                masks[id] = Some(apply_override(ov, &mut out, &node.name)?);
            }
            if !out.is_finite() {
                return Err(Error::Numerical { site: node.name.clone() });
            }
            acts.push(out);
        }
        let logits = acts[self.logits].clone();
        Ok((logits, Tape { graph: self, acts, masks }))
    }

    fn eval(&self, node: &Node, op: &Op, acts: &[Tensor]) -> Tensor {
        let x = &acts[node.inputs[0]];
        let mut out = Tensor::zeros(&node.shape);
        match *op {
            Op::Input => unreachable!(),
            Op::Conv2d { param, kernel, padding } => {
                let geo = ConvGeometry::new(x.shape(), &node.shape, kernel, padding);
                conv2d_forward(&geo, x.data(), self.params[param].value.data(), out.data_mut());
            }
            Op::Dense { param } => {
                let wgt = self.params[param].value.data();
                let n = x.len();
                for (o, v) in out.data_mut().iter_mut().enumerate() {
                    *v = dot(&wgt[o * n..(o + 1) * n], x.data());
                }
            }
            Op::BiasAdd { param } => {
                let bias = self.params[param].value.data();
                let per = x.len() / bias.len();
                for (c, (o, i)) in out.data_mut().chunks_mut(per).zip(x.data().chunks(per)).enumerate() {
                    for (a, b) in o.iter_mut().zip(i) {
                        *a = b + bias[c];
                    }
                }
            }
            Op::Relu => {
                for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
                    *o = if v > 0.0 { v } else { 0.0 };
                }
            }
            Op::Add => {
                let y = &acts[node.inputs[1]];
                for ((o, a), b) in out.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                    *o = a + b;
                }
            }
            Op::AvgPool { window } => {
                let (c, h, w) = x.chw().expect("checked at build");
                let (oh, ow) = (h / window, w / window);
                let scale = 1.0 / (window * window) as f32;
                let od = out.data_mut();
                let xd = x.data();
                for ch in 0..c {
                    for y in 0..h {
                        let orow = &mut od[(ch * oh + y / window) * ow..][..ow];
                        let irow = &xd[(ch * h + y) * w..][..w];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            *o += irow[ox * window..(ox + 1) * window].iter().sum::<f32>() * scale;
                        }
                    }
                }
            }
            Op::GlobalAvgPool => {
                let (c, h, w) = x.chw().expect("checked at build");
                let scale = 1.0 / (h * w) as f32;
                for (ch, o) in out.data_mut().iter_mut().enumerate().take(c) {
                    *o = x.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f32>() * scale;
                }
            }
            Op::Logits => out.data_mut().copy_from_slice(x.data()),
        }
        out
    }
}

fn apply_override(ov: &Override, out: &mut Tensor, name: &str) -> Result<Vec<bool>> {
    let n = out.len();
    match ov {
        Override::Clamp { low, high } => {
            if low.len() != n || high.len() != n {
                return Err(Error::Config(format!("{name}: clamp bounds do not cover the node")));
            }
            Ok(out
                .data_mut()
                .iter_mut()
                .zip(low.iter().zip(high))
                .map(|(v, (&lo, &hi))| {
                    if *v < lo {
                        *v = lo;
                        false
                    } else if *v > hi {
                        *v = hi;
                        false
                    } else {
                        true
                    }
                })
                .collect())
        }
        Override::Replace(values) => {
            if values.len() != n {
                return Err(Error::Config(format!("{name}: replacement does not cover the node")));
            }
            out.data_mut().copy_from_slice(values);
            Ok(vec![false; n])
        }
    }
}

impl<'g> Tape<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn activation(&self, id: NodeId) -> &Tensor {
        &self.acts[id]
    }

    pub fn activations(&self) -> &[Tensor] {
        &self.acts
    }

    pub fn logits(&self) -> &Tensor {
        &self.acts[self.graph.logits]
    }

    /// Gradients of the summed seeded losses w.r.t. every node.
    pub fn backward(&self, seeds: &[(NodeId, &Tensor)]) -> Result<Gradients> {
        self.run_backward(seeds, false)
    }

    /// Like [`Tape::backward`], also accumulating parameter gradients.
    pub fn backward_with_params(&self, seeds: &[(NodeId, &Tensor)]) -> Result<Gradients> {
        self.run_backward(seeds, true)
    }

    fn run_backward(&self, seeds: &[(NodeId, &Tensor)], want_params: bool) -> Result<Gradients> {
        let graph = self.graph;
        let mut grads: Vec<Option<Tensor>> = vec![None; graph.nodes.len()];
        for &(id, seed) in seeds {
            let act = self
                .acts
                .get(id)
                .ok_or_else(|| Error::Usage(format!("seed on unrecorded node {id}")))?;
            if act.shape() != seed.shape() {
                return Err(Error::Usage(format!(
                    "seed for {} has shape {:?}, activation has {:?}",
                    graph.nodes[id].name,
                    seed.shape(),
                    act.shape()
                )));
            }
            match &mut grads[id] {
                Some(g) => g.add_assign(seed)?,
                slot => *slot = Some(seed.clone()),
            }
        }
        let mut pgrads: Option<Vec<Tensor>> =
            want_params.then(|| graph.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect());

        for id in (0..graph.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &graph.nodes[id];
            // The node keeps the gradient w.r.t. its (overridden) output;
            // only the masked part flows upstream.
            match &self.masks[id] {
                Some(mask) => {
                    let mut passed = g.clone();
                    for (v, &pass) in passed.data_mut().iter_mut().zip(mask) {
                        if !pass {
                            *v = 0.0;
                        }
                    }
                    self.backward_node(node, &passed, &mut grads, pgrads.as_deref_mut());
                }
                None => self.backward_node(node, &g, &mut grads, pgrads.as_deref_mut()),
            }
            grads[id] = Some(g);
        }
        let nodes = grads
            .into_iter()
            .zip(&graph.nodes)
            .map(|(g, n)| g.unwrap_or_else(|| Tensor::zeros(&n.shape)))
            .collect();
        Ok(Gradients { nodes, params: pgrads, input: graph.input })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>], pgrads: Option<&mut [Tensor]>) {
        let graph = self.graph;
        let xi = match node.inputs.first() {
            Some(&i) => i,
            None => return,
        };
        let x = &self.acts[xi];
        let mut gx = Tensor::zeros(x.shape());
        match node.op {
            Op::Input => unreachable!(),
            Op::Conv2d { param, kernel, padding } => {
                let geo = ConvGeometry::new(x.shape(), &node.shape, kernel, padding);
                let wgt = graph.params[param].value.data();
                conv2d_backward_input(&geo, g.data(), wgt, gx.data_mut());
                if let Some(pg) = pgrads {
                    conv2d_backward_weight(&geo, g.data(), x.data(), pg[param].data_mut());
                }
            }
            Op::Dense { param } => {
                let wgt = graph.params[param].value.data();
                let n = x.len();
                for (o, &go) in g.data().iter().enumerate() {
                    if go != 0.0 {
                        axpy(go, &wgt[o * n..(o + 1) * n], gx.data_mut());
                    }
                }
                if let Some(pg) = pgrads {
                    let pw = pg[param].data_mut();
                    for (o, &go) in g.data().iter().enumerate() {
                        axpy(go, x.data(), &mut pw[o * n..(o + 1) * n]);
                    }
                }
            }
            Op::BiasAdd { param } => {
                gx.data_mut().copy_from_slice(g.data());
                if let Some(pg) = pgrads {
                    let pb = pg[param].data_mut();
                    let per = g.len() / pb.len();
                    for (c, chunk) in g.data().chunks(per).enumerate() {
                        pb[c] += chunk.iter().sum::<f32>();
                    }
                }
            }
            Op::Relu => {
                for ((o, &gv), &xv) in gx.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                    // Subgradient at exactly zero is zero.
                    *o = if xv > 0.0 { gv } else { 0.0 };
                }
            }
            Op::Add => {
                gx.data_mut().copy_from_slice(g.data());
                accumulate(grads, node.inputs[1], g.clone());
            }
            Op::AvgPool { window } => {
                let (c, h, w) = x.chw().expect("checked at build");
                let (oh, ow) = (h / window, w / window);
                let scale = 1.0 / (window * window) as f32;
                let gd = g.data();
                let gxd = gx.data_mut();
                for ch in 0..c {
                    for y in 0..h {
                        let grow = &gd[(ch * oh + y / window) * ow..][..ow];
                        let xrow = &mut gxd[(ch * h + y) * w..][..w];
                        for (xx, v) in xrow.iter_mut().enumerate() {
                            *v = grow[xx / window] * scale;
                        }
                    }
                }
            }
            Op::GlobalAvgPool => {
                let (_, h, w) = x.chw().expect("checked at build");
                let scale = 1.0 / (h * w) as f32;
                for (chunk, &gv) in gx.data_mut().chunks_mut(h * w).zip(g.data()) {
                    chunk.fill(gv * scale);
                }
            }
            Op::Logits => gx.data_mut().copy_from_slice(g.data()),
        }
        accumulate(grads, xi, gx);
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g).expect("gradient shapes follow activations"),
        slot => *slot = Some(g),
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

struct ConvGeometry {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    oh: usize,
    ow: usize,
    k: usize,
    pad: usize,
}

/// One kernel tap: output rows/cols `y0..y1`, `x0..x1` read input at
/// `(y + dy, x + dx)`.
struct Tap {
    weight_index: usize,
    y0: usize,
    y1: usize,
    dy: isize,
    x0: usize,
    x1: usize,
    dx: isize,
}

impl ConvGeometry {
    fn new(in_shape: &[usize], out_shape: &[usize], k: usize, padding: Padding) -> Self {
        ConvGeometry {
            ci: in_shape[0],
            h: in_shape[1],
            w: in_shape[2],
            co: out_shape[0],
            oh: out_shape[1],
            ow: out_shape[2],
            k,
            pad: padding.amount(k),
        }
    }

    fn range(out_len: usize, in_len: usize, d: isize) -> (usize, usize) {
        let lo = (-d).max(0) as usize;
        let hi = (in_len as isize - d).min(out_len as isize).max(0) as usize;
        (lo, hi.max(lo))
    }

    fn taps(&self, o: usize, i: usize) -> impl Iterator<Item = Tap> + '_ {
        let k = self.k;
        let pad = self.pad as isize;
        (0..k * k).map(move |t| {
            let (ky, kx) = (t / k, t % k);
            let dy = ky as isize - pad;
            let dx = kx as isize - pad;
            let (y0, y1) = Self::range(self.oh, self.h, dy);
            let (x0, x1) = Self::range(self.ow, self.w, dx);
            Tap { weight_index: ((o * self.ci + i) * k + ky) * k + kx, y0, y1, dy, x0, x1, dx }
        })
    }
}

impl Tap {
    /// `(output offset, input offset, run length)` per covered row.
    fn rows(&self, ow: usize, w: usize) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let len = self.x1 - self.x0;
        (self.y0..self.y1).map(move |y| {
            let iy = (y as isize + self.dy) as usize;
            let ix = (self.x0 as isize + self.dx) as usize;
            (y * ow + self.x0, iy * w + ix, len)
        })
    }
}

fn conv2d_forward(geo: &ConvGeometry, x: &[f32], wgt: &[f32], out: &mut [f32]) {
    let (ip, op) = (geo.h * geo.w, geo.oh * geo.ow);
    for o in 0..geo.co {
        let out_c = &mut out[o * op..(o + 1) * op];
        for i in 0..geo.ci {
            let in_c = &x[i * ip..(i + 1) * ip];
            for tap in geo.taps(o, i) {
                let wv = wgt[tap.weight_index];
                for (oo, io, len) in tap.rows(geo.ow, geo.w) {
                    axpy(wv, &in_c[io..io + len], &mut out_c[oo..oo + len]);
                }
            }
        }
    }
}

fn conv2d_backward_input(geo: &ConvGeometry, g: &[f32], wgt: &[f32], gx: &mut [f32]) {
    let (ip, op) = (geo.h * geo.w, geo.oh * geo.ow);
    for o in 0..geo.co {
        let g_c = &g[o * op..(o + 1) * op];
        for i in 0..geo.ci {
            let gx_c = &mut gx[i * ip..(i + 1) * ip];
            for tap in geo.taps(o, i) {
                let wv = wgt[tap.weight_index];
                for (oo, io, len) in tap.rows(geo.ow, geo.w) {
                    axpy(wv, &g_c[oo..oo + len], &mut gx_c[io..io + len]);
                }
            }
        }
    }
}

fn conv2d_backward_weight(geo: &ConvGeometry, g: &[f32], x: &[f32], gw: &mut [f32]) {
    let (ip, op) = (geo.h * geo.w, geo.oh * geo.ow);
    for o in 0..geo.co {
        let g_c = &g[o * op..(o + 1) * op];
        for i in 0..geo.ci {
            let x_c = &x[i * ip..(i + 1) * ip];
            for tap in geo.taps(o, i) {
                let acc: f32 =
                    tap.rows(geo.ow, geo.w).map(|(oo, io, len)| dot(&g_c[oo..oo + len], &x_c[io..io + len])).sum();
                gw[tap.weight_index] += acc;
            }
        }
    }
}
