use crate::error::{Error, Result};
use crate::loss::{attack_confidence, barrier, is_success, prediction_loss, smoothing_loss_grad, Barrier, Goal};
use crate::model::Model;
use crate::tensor::Tensor;

use super::{check_input, search_step, sign_step, AttackConfig, AttackResult, BarrierKind, Measure, Resolved, Throttle, TraceEntry};

#[derive(Debug, Clone)]
struct Eval {
    confidence: f64,
    pred_loss: f64,
    barrier_loss: f64,
    smooth_loss: f64,
    success: bool,
    measure: Measure,
    grad: Tensor,
    exception: bool,
}

struct Objective<'a> {
    target: &'a Model,
    throttle: &'a Throttle<'a>,
    resolved: Resolved,
    goal: Goal,
    barrier: Barrier,
    alpha: f64,
}

impl Objective<'_> {
    /// Forward both models and backpropagate the combined loss to the input.
    /// Non-finite values come back as an exception, not an error.
    fn eval(&self, x: &Tensor) -> Result<Eval> {
        match self.eval_inner(x) {
            Err(e) if e.is_numerical() => Ok(self.exception(x)),
            other => other,
        }
    }

    fn exception(&self, x: &Tensor) -> Eval {
        Eval {
            confidence: f64::NEG_INFINITY,
            pred_loss: f64::NAN,
            barrier_loss: f64::NAN,
            smooth_loss: f64::NAN,
            success: false,
            measure: Measure { feasible: false, occupancy: f64::INFINITY, quantile_distances: vec![] },
            grad: Tensor::zeros(x.shape()),
            exception: true,
        }
    }

    fn eval_inner(&self, x: &Tensor) -> Result<Eval> {
        let reference = &self.throttle.reference.graph;
        let (_, rtape) = reference.forward(x)?;
        let acts = rtape.activations();
        let measure = self.throttle.measure_from(&self.resolved, acts);

        let mut exception = false;
        let (mut barrier_loss, mut smooth_loss) = (0.0, 0.0);
        let mut seeds: Vec<(usize, Tensor)> = Vec::new();
        for ((tp, spec), cnat) in self.throttle.planes.iter().zip(&self.resolved.bounds).zip(&self.resolved.cdf_nat) {
            let y = tp.plane.gather(acts);
            let b = barrier(&y, &spec.intervals, self.barrier);
            exception |= b.is_exception();
            barrier_loss += b.loss;
            let mut grad: Vec<f64> = b.grad.iter().map(|&g| g as f64).collect();

            if self.alpha > 0.0 {
                let spatial: usize =
                    tp.plane.nodes.iter().map(|&n| reference.node(n)).filter(|n| n.shape.len() == 3).map(|n| n.len()).sum();
                let mut offset = 0;
                for &n in &tp.plane.nodes {
                    let node = reference.node(n);
                    let len = node.len();
                    if node.shape.len() == 3 {
                        let range = offset..offset + len;
                        let dists = &tp.profile.dists[range.clone()];
                        let (dq, dir): (Vec<f64>, Vec<f64>) = dists
                            .iter()
                            .zip(&y[range.clone()])
                            .zip(&cnat[range.clone()])
                            .map(|((d, &v), &c0)| {
                                let diff = d.cdf(v) - c0;
                                (diff.abs() / tp.eps, diff.signum() * d.cdf_slope(v) / tp.eps)
                            })
                            .unzip();
                        let shape = [node.shape[0], node.shape[1], node.shape[2]];
                        // Share the plane-wide 1/N normalisation across its nodes.
                        let alpha = self.alpha * len as f64 / spatial as f64;
                        let (l, g) = smoothing_loss_grad(&dq, shape, alpha);
                        smooth_loss += l;
                        for ((acc, gq), d) in grad[range].iter_mut().zip(g).zip(dir) {
                            if d != 0.0 {
                                *acc += gq * d;
                            }
                        }
                    }
                    offset += len;
                }
            }

            for (n, piece) in tp.plane.split(reference, &grad.iter().map(|&g| g as f32).collect::<Vec<_>>()) {
                seeds.push((n, Tensor::new(reference.node(n).shape.clone(), piece.to_vec())?));
            }
        }

        let same = std::ptr::eq(self.target, self.throttle.reference);
        let logits = if same { rtape.logits().clone() } else { self.target.logits(x)? };
        let (pred_loss, pred_grad) = prediction_loss(logits.data(), self.goal);
        let pred_seed = Tensor::vector(&pred_grad);

        let grad = if same {
            seeds.push((reference.logits_id(), pred_seed));
            let refs: Vec<(usize, &Tensor)> = seeds.iter().map(|(n, t)| (*n, t)).collect();
            rtape.backward(&refs)?.into_input()
        } else {
            let refs: Vec<(usize, &Tensor)> = seeds.iter().map(|(n, t)| (*n, t)).collect();
            let mut g = rtape.backward(&refs)?.into_input();
            let tgraph = &self.target.graph;
            let (_, ttape) = tgraph.forward(x)?;
            g.add_assign(ttape.backward(&[(tgraph.logits_id(), &pred_seed)])?.input())?;
            g
        };
        exception |= !grad.is_finite() || !(pred_loss.is_finite() && smooth_loss.is_finite());

        Ok(Eval {
            confidence: attack_confidence(logits.data(), self.goal),
            pred_loss,
            barrier_loss,
            smooth_loss,
            success: is_success(logits.data(), self.goal),
            measure,
            grad,
            exception,
        })
    }
}

/// Sign-gradient descent on prediction loss plus barrier and smoothing
/// penalties at the reference model's throttle planes.
///
/// Each iteration steps every pixel by `step` against the sign of the input
/// gradient and clamps to `[0, 1]`. A numerical exception restores the last
/// feasible iterate and halves the step. With `cfg.search` set, the step is
/// first chosen by binary search on truncated runs from this sample.
pub fn d2b_attack(x_nat: &Tensor, label: usize, target: &Model, throttle: &Throttle, cfg: &AttackConfig) -> Result<AttackResult> {
    check_input(x_nat)?;
    if let Some(sc) = cfg.search {
        let fixed = AttackConfig { search: None, ..cfg.clone() };
        let found = search_step(&[(x_nat.clone(), label)], target, throttle, &fixed, (sc.lo, sc.hi), sc.probes, sc.probe_iters)?;
        let mut r = d2b_attack(x_nat, label, target, throttle, &AttackConfig { step: found.step, ..fixed })?;
        r.step_warning = found.warning;
        return Ok(r);
    }
    if target.graph.input_shape() != throttle.reference.graph.input_shape() {
        return Err(Error::Config("target and reference models take different inputs".into()));
    }
    let goal = cfg.mode.goal(label, target.graph.classes())?;
    let objective = Objective {
        target,
        throttle,
        resolved: throttle.resolve(x_nat)?,
        goal,
        barrier: match cfg.barrier {
            BarrierKind::Polynomial => Barrier::polynomial(&cfg.weights),
            BarrierKind::Linear => Barrier::linear(&cfg.weights),
        },
        alpha: cfg.weights.alpha,
    };

    let mut x = x_nat.clone();
    let mut cur = objective.eval(&x)?;
    if cur.exception {
        return Err(Error::Numerical { site: "natural input".into() });
    }
    let mut last_feasible = (x.clone(), cur.clone());
    let mut step = cfg.step;
    let mut trace = Vec::new();
    let (mut best, mut stale) = (cur.confidence, 0usize);
    let (mut recoveries, mut aborted) = (0usize, false);

    for iteration in 0..cfg.max_iters {
        let mut next = x.clone();
        sign_step(&mut next, &cur.grad, step as f32);
        let eval = objective.eval(&next)?;
        trace.push(TraceEntry {
            iteration,
            confidence: eval.confidence,
            pred_loss: eval.pred_loss,
            barrier_loss: eval.barrier_loss,
            smooth_loss: eval.smooth_loss,
            step,
            feasible: eval.measure.feasible && !eval.exception,
            success: eval.success,
        });

        if eval.exception {
            recoveries += 1;
            log::debug!("numerical exception at iteration {iteration}, recovery {recoveries}");
            (x, cur) = last_feasible.clone();
            if recoveries > cfg.max_recoveries {
                aborted = true;
                break;
            }
            step *= 0.5;
            continue;
        }
        x = next;
        cur = eval;
        if cur.measure.feasible {
            last_feasible = (x.clone(), cur.clone());
        }
        if cur.confidence > best {
            best = cur.confidence;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    Ok(AttackResult {
        success: cur.success,
        confidence: cur.confidence,
        iterations: trace.len(),
        feasible: cur.measure.feasible,
        occupancy: cur.measure.occupancy,
        quantile_distances: cur.measure.quantile_distances.clone(),
        x_adv: x,
        trace,
        step,
        step_warning: false,
        recoveries,
        consistent: true,
        aborted,
    })
}
