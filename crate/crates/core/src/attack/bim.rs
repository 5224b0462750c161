use crate::error::{Error, Result};
use crate::loss::{attack_confidence, is_success, prediction_loss};
use crate::model::Model;
use crate::tensor::Tensor;

use super::{check_input, AttackResult, Mode, Throttle, TraceEntry};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BimConfig {
    pub mode: Mode,
    /// `l_inf` radius in pixel units.
    pub eps: f64,
    pub step: f64,
    pub iters: usize,
}

impl BimConfig {
    /// Step `eps / 10` for 100 iterations.
    pub fn with_eps(mode: Mode, eps: f64) -> Self {
        BimConfig { mode, eps, step: eps / 10.0, iters: 100 }
    }
}

/// Iterative sign-gradient attack projected onto the `l_inf` ball of radius
/// `eps` around `x_nat` and onto `[0, 1]`. With a throttle the result's bound
/// measurements are taken on the reference model; without one it is
/// reported feasible with zero occupancy.
pub fn bim_attack(x_nat: &Tensor, label: usize, target: &Model, cfg: &BimConfig, throttle: Option<&Throttle>) -> Result<AttackResult> {
    check_input(x_nat)?;
    if !(cfg.eps >= 0.0 && cfg.step >= 0.0) {
        return Err(Error::Config("BIM eps and step must be non-negative".into()));
    }
    let goal = cfg.mode.goal(label, target.graph.classes())?;
    let graph = &target.graph;
    let lo: Vec<f32> = x_nat.data().iter().map(|&v| (v - cfg.eps as f32).max(0.0)).collect();
    let hi: Vec<f32> = x_nat.data().iter().map(|&v| (v + cfg.eps as f32).min(1.0)).collect();

    let mut x = x_nat.clone();
    let mut trace = Vec::with_capacity(cfg.iters);
    let (mut logits, mut tape) = graph.forward(&x)?;
    for iteration in 0..cfg.iters {
        let (_, g) = prediction_loss(logits.data(), goal);
        let grad = tape.backward(&[(graph.logits_id(), &Tensor::vector(&g))])?.into_input();
        let step = cfg.step as f32;
        for (((v, &d), &l), &h) in x.data_mut().iter_mut().zip(grad.data()).zip(&lo).zip(&hi) {
            let moved = if d > 0.0 {
                *v - step
            } else if d < 0.0 {
                *v + step
            } else {
                *v
            };
            *v = moved.clamp(l, h);
        }
        (logits, tape) = graph.forward(&x)?;
        let (pred_loss, _) = prediction_loss(logits.data(), goal);
        trace.push(TraceEntry {
            iteration,
            confidence: attack_confidence(logits.data(), goal),
            pred_loss,
            barrier_loss: 0.0,
            smooth_loss: 0.0,
            step: cfg.step,
            feasible: true,
            success: is_success(logits.data(), goal),
        });
    }

    let (feasible, occupancy, quantile_distances) = match throttle {
        Some(t) => {
            let m = t.measure(&t.resolve(x_nat)?, &x)?;
            (m.feasible, m.occupancy, m.quantile_distances)
        }
        None => (true, 0.0, Vec::new()),
    };
    Ok(AttackResult {
        success: is_success(logits.data(), goal),
        confidence: attack_confidence(logits.data(), goal),
        iterations: trace.len(),
        trace,
        x_adv: x,
        feasible,
        occupancy,
        quantile_distances,
        step: cfg.step,
        step_warning: false,
        recoveries: 0,
        consistent: true,
        aborted: false,
    })
}
