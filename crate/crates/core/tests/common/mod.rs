//! Independent 64-bit evaluator of a graph, written directly from the op
//! definitions, used as the finite-difference oracle.

#![allow(dead_code)]

use deepbound::graph::Padding;
use deepbound::{Graph, Op};

/// Values of every node for `input`, in node order.
pub fn eval_f64(graph: &Graph, input: &[f64]) -> Vec<Vec<f64>> {
    let mut vals: Vec<Vec<f64>> = Vec::with_capacity(graph.nodes().len());
    for node in graph.nodes() {
        let arg = |i: usize| &vals[node.inputs[i]];
        let param = |p: usize| -> Vec<f64> { graph.params()[p].value.data().iter().map(|&v| v as f64).collect() };
        let out = match node.op {
            Op::Input => input.to_vec(),
            Op::Conv2d { param: p, kernel: k, padding } => {
                let src = graph.node(node.inputs[0]);
                let (ci, h, w) = (src.shape[0], src.shape[1] as isize, src.shape[2] as isize);
                let (co, oh, ow) = (node.shape[0], node.shape[1], node.shape[2]);
                let pad = match padding {
                    Padding::Same => (k / 2) as isize,
                    Padding::Valid => 0,
                };
                let (x, wt) = (arg(0), param(p));
                let mut out = vec![0.0; co * oh * ow];
                for o in 0..co {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = 0.0;
                            for c in 0..ci {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let (iy, ix) = (oy as isize + ky as isize - pad, ox as isize + kx as isize - pad);
                                        if iy < 0 || ix < 0 || iy >= h || ix >= w {
                                            continue;
                                        }
                                        s += wt[((o * ci + c) * k + ky) * k + kx] * x[(c * h as usize + iy as usize) * w as usize + ix as usize];
                                    }
                                }
                            }
                            out[(o * oh + oy) * ow + ox] = s;
                        }
                    }
                }
                out
            }
            Op::Dense { param: p } => {
                let (x, wt) = (arg(0), param(p));
                (0..node.shape[0]).map(|o| x.iter().enumerate().map(|(i, v)| wt[o * x.len() + i] * v).sum()).collect()
            }
            Op::BiasAdd { param: p } => {
                let (x, b) = (arg(0), param(p));
                let per = x.len() / b.len();
                x.iter().enumerate().map(|(i, v)| v + b[i / per]).collect()
            }
            Op::Relu => arg(0).iter().map(|&v| v.max(0.0)).collect(),
            Op::Add => arg(0).iter().zip(arg(1)).map(|(a, b)| a + b).collect(),
            Op::AvgPool { window } => {
                let src = graph.node(node.inputs[0]);
                let (h, w) = (src.shape[1], src.shape[2]);
                let (c, oh, ow) = (node.shape[0], node.shape[1], node.shape[2]);
                let x = arg(0);
                let mut out = vec![0.0; c * oh * ow];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = 0.0;
                            for dy in 0..window {
                                for dx in 0..window {
                                    s += x[(ch * h + oy * window + dy) * w + ox * window + dx];
                                }
                            }
                            out[(ch * oh + oy) * ow + ox] = s / (window * window) as f64;
                        }
                    }
                }
                out
            }
            Op::GlobalAvgPool => {
                let x = arg(0);
                let per = x.len() / node.shape[0];
                x.chunks(per).map(|c| c.iter().sum::<f64>() / per as f64).collect()
            }
            Op::Logits => arg(0).clone(),
        };
        vals.push(out);
    }
    vals
}

/// Smallest absolute ReLU input over the graph.
pub fn relu_margin(graph: &Graph, vals: &[Vec<f64>]) -> f64 {
    graph
        .nodes()
        .iter()
        .filter(|n| n.op == Op::Relu)
        .flat_map(|n| vals[n.inputs[0]].iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min)
}

/// Sign pattern of every ReLU input.
pub fn relu_pattern(graph: &Graph, vals: &[Vec<f64>]) -> Vec<bool> {
    graph.nodes().iter().filter(|n| n.op == Op::Relu).flat_map(|n| vals[n.inputs[0]].iter().map(|&v| v > 0.0)).collect()
}
