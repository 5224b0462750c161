//! Baselines that enforce the plane bounds by changing the dataflow: value
//! clipping, and alternating optimisation of target activations and input.

use crate::error::{Error, Result};
use crate::graph::{Overlay, Override};
use crate::loss::{attack_confidence, is_success, prediction_loss, Goal};
use crate::model::Model;
use crate::tensor::Tensor;

use super::{check_input, sign_step, AttackResult, Mode, Resolved, Throttle, TraceEntry};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipConfig {
    pub mode: Mode,
    pub iters: usize,
    pub step: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig { mode: Mode::Untargeted, iters: 1000, step: 2.6e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoStepConfig {
    pub mode: Mode,
    pub outer: usize,
    pub inner: usize,
    /// Target-activation step as a fraction of each interval's width.
    pub value_step: f64,
    /// Input sign-step size.
    pub step: f64,
}

impl Default for TwoStepConfig {
    fn default() -> Self {
        TwoStepConfig { mode: Mode::Untargeted, outer: 100, inner: 10, value_step: 0.1, step: 2.6e-3 }
    }
}

fn same_model(model: &Model, throttle: &Throttle) -> Result<()> {
    if std::ptr::eq(model, throttle.reference) {
        Ok(())
    } else {
        Err(Error::Usage("dataflow-modifying baselines need the reference model as target".into()))
    }
}

fn finish(
    model: &Model,
    throttle: &Throttle,
    resolved: &Resolved,
    goal: Goal,
    x: Tensor,
    trace: Vec<TraceEntry>,
    step: f64,
) -> Result<AttackResult> {
    let (logits, tape) = model.graph.forward(&x)?;
    let m = throttle.measure_from(resolved, tape.activations());
    Ok(AttackResult {
        success: is_success(logits.data(), goal),
        confidence: attack_confidence(logits.data(), goal),
        iterations: trace.len(),
        trace,
        x_adv: x,
        feasible: m.feasible,
        occupancy: m.occupancy,
        quantile_distances: m.quantile_distances,
        step,
        step_warning: false,
        recoveries: 0,
        consistent: false,
        aborted: false,
    })
}

fn trace_entry(
    model: &Model,
    throttle: &Throttle,
    resolved: &Resolved,
    goal: Goal,
    x: &Tensor,
    iteration: usize,
    step: f64,
) -> Result<TraceEntry> {
    let (logits, tape) = model.graph.forward(x)?;
    let (pred_loss, _) = prediction_loss(logits.data(), goal);
    Ok(TraceEntry {
        iteration,
        confidence: attack_confidence(logits.data(), goal),
        pred_loss,
        barrier_loss: 0.0,
        smooth_loss: 0.0,
        step,
        feasible: throttle.measure_from(resolved, tape.activations()).feasible,
        success: is_success(logits.data(), goal),
    })
}

/// Sign-gradient attack on a copy of the dataflow whose plane values are
/// clamped to their bounds; clamped values pass no gradient. Bounds are
/// measured on the unmodified model, which the clamp does not protect.
pub fn clipping_attack(x_nat: &Tensor, label: usize, model: &Model, throttle: &Throttle, cfg: &ClipConfig) -> Result<AttackResult> {
    check_input(x_nat)?;
    same_model(model, throttle)?;
    let goal = cfg.mode.goal(label, model.graph.classes())?;
    let graph = &model.graph;
    let resolved = throttle.resolve(x_nat)?;

    let mut overlay = Overlay::new();
    for (tp, spec) in throttle.planes.iter().zip(&resolved.bounds) {
        let low: Vec<f32> = spec.intervals.iter().map(|iv| iv.low).collect();
        let high: Vec<f32> = spec.intervals.iter().map(|iv| iv.high).collect();
        let lows: Vec<(usize, Vec<f32>)> = tp.plane.split(graph, &low).map(|(n, s)| (n, s.to_vec())).collect();
        for ((n, lo), (_, hi)) in lows.into_iter().zip(tp.plane.split(graph, &high)) {
            overlay = overlay.with(n, Override::Clamp { low: lo, high: hi.to_vec() });
        }
    }

    let mut x = x_nat.clone();
    let mut trace = Vec::with_capacity(cfg.iters);
    for iteration in 0..cfg.iters {
        let (logits, tape) = graph.forward_with(&x, &overlay)?;
        let (_, g) = prediction_loss(logits.data(), goal);
        let grad = tape.backward(&[(graph.logits_id(), &Tensor::vector(&g))])?.into_input();
        sign_step(&mut x, &grad, cfg.step as f32);
        trace.push(trace_entry(model, throttle, &resolved, goal, &x, iteration, cfg.step)?);
    }
    finish(model, throttle, &resolved, goal, x, trace, cfg.step)
}

/// Alternates one sign step of the plane values towards the attack goal,
/// projected onto the bounds, with `inner` input sign steps that pull the
/// unmodified plane activations towards those values by mean squared error.
pub fn two_step_attack(x_nat: &Tensor, label: usize, model: &Model, throttle: &Throttle, cfg: &TwoStepConfig) -> Result<AttackResult> {
    check_input(x_nat)?;
    same_model(model, throttle)?;
    let goal = cfg.mode.goal(label, model.graph.classes())?;
    let graph = &model.graph;
    let (_, tape) = graph.forward(x_nat)?;
    let resolved = throttle.resolve_from(tape.activations())?;
    let mut targets: Vec<Vec<f32>> = throttle.planes.iter().map(|tp| tp.plane.gather(tape.activations())).collect();
    drop(tape);
    let total: usize = targets.iter().map(Vec::len).sum();

    let mut x = x_nat.clone();
    let mut trace = Vec::with_capacity(cfg.outer);
    for iteration in 0..cfg.outer {
        let mut overlay = Overlay::new();
        for (tp, t) in throttle.planes.iter().zip(&targets) {
            for (n, piece) in tp.plane.split(graph, t) {
                overlay = overlay.with(n, Override::Replace(piece.to_vec()));
            }
        }
        let (logits, tape) = graph.forward_with(&x, &overlay)?;
        let (_, g) = prediction_loss(logits.data(), goal);
        let grads = tape.backward(&[(graph.logits_id(), &Tensor::vector(&g))])?;
        for ((tp, t), spec) in throttle.planes.iter().zip(&mut targets).zip(&resolved.bounds) {
            let dy: Vec<f32> = tp.plane.nodes.iter().flat_map(|&n| grads.node(n).data().iter().copied()).collect();
            for ((v, &d), iv) in t.iter_mut().zip(&dy).zip(&spec.intervals) {
                let delta = cfg.value_step as f32 * iv.width();
                let moved = if d > 0.0 {
                    *v - delta
                } else if d < 0.0 {
                    *v + delta
                } else {
                    *v
                };
                *v = moved.clamp(iv.low, iv.high);
            }
        }

        for _ in 0..cfg.inner {
            let (_, tape) = graph.forward(&x)?;
            let mut seeds = Vec::new();
            for (tp, t) in throttle.planes.iter().zip(&targets) {
                let y = tp.plane.gather(tape.activations());
                let d: Vec<f32> = y.iter().zip(t).map(|(a, b)| 2.0 * (a - b) / total as f32).collect();
                for (n, piece) in tp.plane.split(graph, &d) {
                    seeds.push((n, Tensor::new(graph.node(n).shape.clone(), piece.to_vec())?));
                }
            }
            let refs: Vec<(usize, &Tensor)> = seeds.iter().map(|(n, t)| (*n, t)).collect();
            let grad = tape.backward(&refs)?.into_input();
            sign_step(&mut x, &grad, cfg.step as f32);
        }
        trace.push(trace_entry(model, throttle, &resolved, goal, &x, iteration, cfg.step)?);
    }
    finish(model, throttle, &resolved, goal, x, trace, cfg.step)
}
