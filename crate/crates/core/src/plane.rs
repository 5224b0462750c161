//! Throttle-plane candidates: node sets whose removal separates the input
//! from the logits.

use crate::graph::{Graph, NodeId, Op};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plane {
    pub id: usize,
    pub name: String,
    /// Producing nodes; the plane covers each node's activation entirely.
    pub nodes: Vec<NodeId>,
    pub neuron_count: usize,
}

impl Plane {
    fn new(id: usize, graph: &Graph, nodes: Vec<NodeId>) -> Self {
        let name = nodes.iter().map(|&n| graph.node(n).name.as_str()).collect::<Vec<_>>().join("+");
        let neuron_count = nodes.iter().map(|&n| graph.node(n).len()).sum();
        Plane { id, name, nodes, neuron_count }
    }

    /// Every value site `(node, flat index)` in plane order.
    pub fn sites<'a>(&'a self, graph: &'a Graph) -> impl Iterator<Item = (NodeId, usize)> + 'a {
        self.nodes.iter().flat_map(move |&n| (0..graph.node(n).len()).map(move |i| (n, i)))
    }

    /// Concatenates the plane's activations from per-node tensors.
    pub fn gather(&self, acts: &[crate::tensor::Tensor]) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.neuron_count);
        for &n in &self.nodes {
            out.extend_from_slice(acts[n].data());
        }
        out
    }

    /// Splits a plane-ordered vector back into `(node, slice)` pieces.
    pub fn split<'a>(&'a self, graph: &'a Graph, values: &'a [f32]) -> impl Iterator<Item = (NodeId, &'a [f32])> + 'a {
        let mut offset = 0;
        self.nodes.iter().map(move |&n| {
            let len = graph.node(n).len();
            let piece = &values[offset..offset + len];
            offset += len;
            (n, piece)
        })
    }
}

/// True when no path leads from the input to the logits once `removed`
/// nodes are deleted.
pub fn is_cut(graph: &Graph, removed: &[NodeId]) -> bool {
    let consumers = graph.consumers();
    let mut blocked = vec![false; graph.nodes().len()];
    for &r in removed {
        blocked[r] = true;
    }
    if blocked[graph.input_id()] {
        return true;
    }
    let mut seen = vec![false; graph.nodes().len()];
    let mut stack = vec![graph.input_id()];
    seen[graph.input_id()] = true;
    while let Some(n) = stack.pop() {
        if n == graph.logits_id() {
            return false;
        }
        for &c in &consumers[n] {
            if !seen[c] && !blocked[c] {
                seen[c] = true;
                stack.push(c);
            }
        }
    }
    true
}

/// The affine classifier head: dense and bias-add nodes that feed the logits
/// with no nonlinearity in between. Bounding them bounds the logits.
fn head_nodes(graph: &Graph) -> Vec<NodeId> {
    let mut head = Vec::new();
    let mut n = graph.logits_id();
    while let [prev] = graph.node(n).inputs[..] {
        if !matches!(graph.node(prev).op, Op::Dense { .. } | Op::BiasAdd { .. }) {
            break;
        }
        head.push(prev);
        n = prev;
    }
    head
}

/// Candidate planes in id order: every interior node outside the classifier
/// head that alone forms a cut (topological order), then for each
/// elementwise sum whose operands are not individually cuts, the operand pair.
/// A layer whose output feeds only a bias-add is represented by the bias-add,
/// which carries the same values shifted by a constant.
pub fn enumerate_planes(graph: &Graph) -> Vec<Plane> {
    let head = head_nodes(graph);
    let consumers = graph.consumers();
    let pre_bias = |n: NodeId| matches!(consumers[n][..], [c] if matches!(graph.node(c).op, Op::BiasAdd { .. }));
    let interior = |n: NodeId| n != graph.input_id() && n != graph.logits_id() && !head.contains(&n);
    let mut planes = Vec::new();
    for id in (0..graph.nodes().len()).filter(|&n| interior(n) && !pre_bias(n)) {
        if is_cut(graph, &[id]) {
            planes.push(Plane::new(planes.len(), graph, vec![id]));
        }
    }
    for node in graph.nodes() {
        if node.op != Op::Add {
            continue;
        }
        let pair = node.inputs.clone();
        if pair.iter().all(|&n| interior(n) && !is_cut(graph, &[n])) && is_cut(graph, &pair) {
            planes.push(Plane::new(planes.len(), graph, pair));
        }
    }
    planes
}

pub fn find_plane<'a>(planes: &'a [Plane], name: &str) -> Option<&'a Plane> {
    planes.iter().find(|p| p.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;
    use crate::model::{Arch, ModelSpec};

    #[test]
    fn chain_has_one_plane_per_op() {
        let mut b = GraphBuilder::new();
        let mut x = b.input(&[4]);
        for i in 0..5 {
            x = b.relu(&format!("r{i}"), x).unwrap();
        }
        b.logits(x).unwrap();
        let g = b.build().unwrap();
        let planes = enumerate_planes(&g);
        assert_eq!(planes.len(), 5);
        assert!(planes.iter().enumerate().all(|(i, p)| p.id == i && p.nodes.len() == 1));
    }

    #[test]
    fn residual_block_candidates() {
        let g = ModelSpec::new(Arch::ResCnn).build().unwrap();
        let planes = enumerate_planes(&g);
        let names: Vec<&str> = planes.iter().map(|p| p.name.as_str()).collect();
        assert!(names.contains(&"block.sum"));
        assert!(names.contains(&"block.relu"));
        assert!(!names.contains(&"block.bias2"), "main-branch output alone is not a cut");
        assert!(!names.contains(&"block.shortcut"));
        assert!(names.contains(&"block.bias2+block.shortcut"));
        assert!(!names.iter().any(|n| n.starts_with("head.")), "classifier head is not a plane");
        assert_eq!(names.iter().filter(|n| **n == "stage3.pool").count(), 1);
        assert!(names.contains(&"stage3.bias") && !names.contains(&"stage3.conv"));
        let pair = find_plane(&planes, "block.bias2+block.shortcut").unwrap();
        assert_eq!(pair.neuron_count, 2 * 8 * 16 * 16);
    }

    #[test]
    fn every_candidate_is_a_cut() {
        for arch in [Arch::PlainCnn, Arch::ResCnn] {
            let g = ModelSpec::new(arch).build().unwrap();
            for p in enumerate_planes(&g) {
                assert!(is_cut(&g, &p.nodes), "{}", p.name);
            }
        }
    }

    #[test]
    fn gather_and_split_agree() {
        let g = ModelSpec::new(Arch::ResCnn).build().unwrap();
        let planes = enumerate_planes(&g);
        let pair = find_plane(&planes, "block.bias2+block.shortcut").unwrap();
        let values: Vec<f32> = (0..pair.neuron_count).map(|i| i as f32).collect();
        let pieces: Vec<_> = pair.split(&g, &values).collect();
        assert_eq!(pieces.len(), 2);
        assert_eq!(pieces[1].1[0], (pair.neuron_count / 2) as f32);
        assert_eq!(pair.sites(&g).count(), pair.neuron_count);
    }
}
