//! The two small network architectures and their parameter initialisation.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, GraphBuilder, NodeId};
use crate::tensor::Tensor;

pub const INPUT_SHAPE: [usize; 3] = [3, 32, 32];
pub const CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    PlainCnn,
    ResCnn,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::PlainCnn => "plain-cnn",
            Arch::ResCnn => "res-cnn",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain-cnn" => Ok(Arch::PlainCnn),
            "res-cnn" => Ok(Arch::ResCnn),
            other => Err(Error::Usage(format!("unknown architecture {other:?} (expected plain-cnn or res-cnn)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub arch: Arch,
    pub input_shape: [usize; 3],
    pub classes: usize,
    /// Channel widths of the three convolutional stages.
    pub widths: [usize; 3],
}

impl ModelSpec {
    pub fn new(arch: Arch) -> Self {
        let widths = match arch {
            Arch::PlainCnn => [8, 16, 16],
            Arch::ResCnn => [8, 8, 16],
        };
        ModelSpec { arch, input_shape: INPUT_SHAPE, classes: CLASSES, widths }
    }

    pub fn build(&self) -> Result<Graph> {
        match self.arch {
            Arch::PlainCnn => self.build_plain(),
            Arch::ResCnn => self.build_res(),
        }
    }

    fn conv_stage(b: &mut GraphBuilder, prefix: &str, x: NodeId, width: usize) -> Result<NodeId> {
        let c = b.conv2d(&format!("{prefix}conv"), x, width, 3)?;
        let c = b.bias_add(&format!("{prefix}bias"), c)?;
        let c = b.relu(&format!("{prefix}relu"), c)?;
        b.avg_pool(&format!("{prefix}pool"), c, 2)
    }

    fn head(&self, b: &mut GraphBuilder, x: NodeId) -> Result<NodeId> {
        let d = b.dense("head.dense", x, self.classes)?;
        let d = b.bias_add("head.dense_bias", d)?;
        b.logits(d)
    }

    fn build_plain(&self) -> Result<Graph> {
        let mut b = GraphBuilder::new();
        let mut x = b.input(&self.input_shape);
        for (i, &w) in self.widths.iter().enumerate() {
            x = Self::conv_stage(&mut b, &format!("stage{}.", i + 1), x, w)?;
        }
        self.head(&mut b, x)?;
        b.build()
    }

    /// Stem stage, one residual block with a 1x1 projection shortcut, then a
    /// conv stage and the dense head.
    fn build_res(&self) -> Result<Graph> {
        let [w0, w1, w2] = self.widths;
        let mut b = GraphBuilder::new();
        let x = b.input(&self.input_shape);
        let stem = Self::conv_stage(&mut b, "stem.", x, w0)?;

        let m = b.conv2d("block.conv1", stem, w1, 3)?;
        let m = b.bias_add("block.bias1", m)?;
        let m = b.relu("block.relu1", m)?;
        let m = b.conv2d("block.conv2", m, w1, 3)?;
        let main = b.bias_add("block.bias2", m)?;
        let shortcut = b.conv2d("block.shortcut", stem, w1, 1)?;
        let sum = b.add("block.sum", main, shortcut)?;
        let out = b.relu("block.relu", sum)?;

        let p = b.avg_pool("block.pool", out, 2)?;
        let h = Self::conv_stage(&mut b, "stage3.", p, w2)?;
        self.head(&mut b, h)?;
        b.build()
    }

    /// Recovers the spec from parameter names and shapes of a saved model.
    pub fn infer(named: &[(String, Tensor)]) -> Result<Self> {
        let out_channels = |name: &str| {
            named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.shape()[0])
                .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
        };
        let (arch, names) = if named.iter().any(|(n, _)| n.starts_with("block.")) {
            (Arch::ResCnn, ["stem.conv", "block.conv1", "stage3.conv"])
        } else {
            (Arch::PlainCnn, ["stage1.conv", "stage2.conv", "stage3.conv"])
        };
        let mut spec = ModelSpec::new(arch);
        for (w, name) in spec.widths.iter_mut().zip(names) {
            *w = out_channels(name)?;
        }
        spec.classes = out_channels("head.dense")?;
        Ok(spec)
    }
}

/// A built graph together with the spec it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub graph: Graph,
}

impl Model {
    /// He-normal weights and zero biases, deterministic in `seed`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut graph = spec.build()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in graph.params_mut() {
            let shape = p.value.shape().to_vec();
            if shape.len() == 1 {
                continue;
            }
            let fan_in: usize = shape[1..].iter().product();
            let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
            for v in p.value.data_mut() {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(Model { spec, graph })
    }

    pub fn from_params(named: Vec<(String, Tensor)>) -> Result<Self> {
        let spec = ModelSpec::infer(&named)?;
        let mut graph = spec.build()?;
        graph.set_params(named)?;
        Ok(Model { spec, graph })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.graph.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.graph.forward(x).map(|(l, _)| l)
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(argmax(self.logits(x)?.data()))
    }
}

/// Index of the largest value, first wins on ties.
pub fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}
