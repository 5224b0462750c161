//! Attack objectives: prediction losses, confidence gaps, barrier penalties
//! and the feature-smoothing penalty.
//!
//! Scalar losses are accumulated in `f64`; gradients handed back to the
//! graph are `f32`.

use crate::bounds::Interval;

/// What the attacker wants from the target model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Goal {
    Targeted { target: usize },
    Untargeted { label: usize },
}

/// Number of competitors used by the untargeted objective and success test.
pub fn top_k(classes: usize) -> usize {
    5.min(classes.saturating_sub(1))
}

pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = logits.iter().map(|&l| (l as f64 - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| (v / z) as f32).collect()
}

pub fn cross_entropy(logits: &[f32], label: usize) -> f64 {
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let lse = m + logits.iter().map(|&l| (l as f64 - m).exp()).sum::<f64>().ln();
    lse - logits[label] as f64
}

/// `L_t - max_{i != t} L_i`.
pub fn targeted_confidence(logits: &[f32], target: usize) -> f64 {
    let best_other = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != target)
        .fold(f32::NEG_INFINITY, |a, (_, &l)| a.max(l));
    logits[target] as f64 - best_other as f64
}

/// Competitor indices sorted by descending logit, lower index first on ties.
fn ranked_competitors(logits: &[f32], label: usize) -> Vec<usize> {
    let mut others: Vec<usize> = (0..logits.len()).filter(|&i| i != label).collect();
    others.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    others
}

/// Sum over the `k` strongest competitors of `L_label - L_j`. Positive while
/// the true label dominates them.
pub fn untargeted_confidence(logits: &[f32], label: usize, k: usize) -> f64 {
    ranked_competitors(logits, label)
        .iter()
        .take(k)
        .map(|&j| logits[label] as f64 - logits[j] as f64)
        .sum()
}

/// Attack confidence as reported in traces and metrics: larger is a
/// stronger attack in both modes. Untargeted mode negates the top-k gap sum.
pub fn attack_confidence(logits: &[f32], goal: Goal) -> f64 {
    match goal {
        Goal::Targeted { target } => targeted_confidence(logits, target),
        Goal::Untargeted { label } => -untargeted_confidence(logits, label, top_k(logits.len())),
    }
}

/// Prediction loss minimised by the attacks and its gradient with respect
/// to the logits: cross-entropy to the target, or the top-k gap sum.
pub fn prediction_loss(logits: &[f32], goal: Goal) -> (f64, Vec<f32>) {
    match goal {
        Goal::Targeted { target } => {
            let mut g = softmax(logits);
            g[target] -= 1.0;
            (cross_entropy(logits, target), g)
        }
        Goal::Untargeted { label } => {
            let k = top_k(logits.len());
            let mut g = vec![0.0f32; logits.len()];
            for &j in ranked_competitors(logits, label).iter().take(k) {
                g[j] -= 1.0;
            }
            g[label] += k as f32;
            (untargeted_confidence(logits, label, k), g)
        }
    }
}

/// Targeted: the target strictly beats every other class. Untargeted: at
/// least `k` classes score strictly above the true label, so ties at rank
/// `k` count as the label still appearing.
pub fn is_success(logits: &[f32], goal: Goal) -> bool {
    match goal {
        Goal::Targeted { target } => targeted_confidence(logits, target) > 0.0,
        Goal::Untargeted { label } => {
            let above = logits.iter().filter(|&&l| l > logits[label]).count();
            above >= top_k(logits.len())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub barrier_k: f64,
    pub barrier_b: f64,
    pub linear_k: f64,
    pub linear_b: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { barrier_k: 1e5, barrier_b: 200.0, linear_k: 1e6, linear_b: 0.95, alpha: 10.0 }
    }
}

/// Largest normalised deviation fed to the power; beyond it `r^b` leaves the
/// `f32` range for the default exponent.
pub const RATIO_CLAMP: f64 = 1.5;

/// Normalised one-sided deviation from the natural value: 1 at either
/// interval endpoint.
pub fn normalized_deviation(y_adv: f32, iv: &Interval) -> f64 {
    let (y, yn) = (y_adv as f64, iv.nat as f64);
    if y > yn {
        (y - yn) / (iv.high as f64 - yn)
    } else if y < yn {
        (yn - y) / (yn - iv.low as f64)
    } else {
        0.0
    }
}

/// `k * r^b` with `r` the normalised deviation. The ratio is not clamped
/// here.
pub fn poly_barrier_loss(y_adv: f32, y_nat: f32, low: f32, high: f32, k: f64, b: f64) -> f64 {
    let iv = Interval { nat: y_nat, low, high, excluded: false };
    k * normalized_deviation(y_adv, &iv).powf(b)
}

/// `k * (relu(y - (b*high + (1-b)*y_nat)) + relu((b*low + (1-b)*y_nat) - y))`.
pub fn linear_barrier_loss(y_adv: f32, y_nat: f32, low: f32, high: f32, k: f64, b: f64) -> f64 {
    let (y, yn) = (y_adv as f64, y_nat as f64);
    let upper = b * high as f64 + (1.0 - b) * yn;
    let lower = b * low as f64 + (1.0 - b) * yn;
    k * ((y - upper).max(0.0) + (lower - y).max(0.0))
}

/// Derivative of [`poly_barrier_loss`] with respect to `y_adv`, with the
/// ratio clamped at [`RATIO_CLAMP`]. Returns the gradient and whether the
/// clamp was hit.
pub fn poly_barrier_grad(y_adv: f32, iv: &Interval, k: f64, b: f64) -> (f64, bool) {
    let up = y_adv > iv.nat;
    let width = if up { iv.high as f64 - iv.nat as f64 } else { iv.nat as f64 - iv.low as f64 };
    let r = normalized_deviation(y_adv, iv);
    let clamped = r > RATIO_CLAMP;
    let dr = k * b * r.min(RATIO_CLAMP).powf(b - 1.0) / width;
    (if up { dr } else { -dr }, clamped)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Barrier {
    Polynomial { k: f64, b: f64 },
    Linear { k: f64, b: f64 },
}

impl Barrier {
    pub fn polynomial(w: &LossWeights) -> Self {
        Barrier::Polynomial { k: w.barrier_k, b: w.barrier_b }
    }

    pub fn linear(w: &LossWeights) -> Self {
        Barrier::Linear { k: w.linear_k, b: w.linear_b }
    }
}

/// Summed barrier loss over a plane with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierEval {
    pub loss: f64,
    pub grad: Vec<f32>,
    /// Neurons whose ratio hit [`RATIO_CLAMP`].
    pub clamped: usize,
    /// Neurons whose loss or gradient is not finite in `f32`.
    pub non_finite: usize,
}

impl BarrierEval {
    pub fn is_exception(&self) -> bool {
        self.clamped > 0 || self.non_finite > 0 || !(self.loss as f32).is_finite()
    }
}

/// Evaluates `barrier` over plane values; excluded neurons contribute nothing.
pub fn barrier(y_adv: &[f32], intervals: &[Interval], barrier: Barrier) -> BarrierEval {
    assert_eq!(y_adv.len(), intervals.len(), "plane values and intervals differ in length");
    let mut out = BarrierEval { loss: 0.0, grad: vec![0.0; y_adv.len()], clamped: 0, non_finite: 0 };
    for ((&y, iv), g) in y_adv.iter().zip(intervals).zip(out.grad.iter_mut()) {
        if iv.excluded || y == iv.nat {
            continue;
        }
        let (loss, grad) = match barrier {
            Barrier::Polynomial { k, b } => {
                let (grad, clamped) = poly_barrier_grad(y, iv, k, b);
                out.clamped += clamped as usize;
                (k * normalized_deviation(y, iv).min(RATIO_CLAMP).powf(b), grad)
            }
            Barrier::Linear { k, b } => {
                let loss = linear_barrier_loss(y, iv.nat, iv.low, iv.high, k, b);
                let (yd, yn) = (y as f64, iv.nat as f64);
                let grad = if yd > b * iv.high as f64 + (1.0 - b) * yn {
                    k
                } else if yd < b * iv.low as f64 + (1.0 - b) * yn {
                    -k
                } else {
                    0.0
                };
                (loss, grad)
            }
        };
        *g = grad as f32;
        if !g.is_finite() || !(loss as f32).is_finite() {
            out.non_finite += 1;
        }
        out.loss += loss;
    }
    out
}

/// Zero-padded 3x3 mean with divisor 9 at every position. The operator is
/// symmetric, so it is also its own adjoint.
pub fn avg_pool3(field: &[f64], shape: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = shape;
    let mut out = vec![0.0; field.len()];
    for c in 0..d {
        let plane = &field[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        s += plane[yy * w + xx];
                    }
                }
                out[(c * h + y) * w + x] = s / 9.0;
            }
        }
    }
    out
}

/// `alpha / N * sum((pool(dq) - dq)^2)` over a `D x H x W` field.
pub fn smoothing_loss(delta_q: &[f64], shape: [usize; 3], alpha: f64) -> f64 {
    smoothing_loss_grad(delta_q, shape, alpha).0
}

/// Smoothing loss and its gradient with respect to `delta_q`.
pub fn smoothing_loss_grad(delta_q: &[f64], shape: [usize; 3], alpha: f64) -> (f64, Vec<f64>) {
    assert_eq!(delta_q.len(), shape.iter().product::<usize>(), "field does not match shape");
    let n = delta_q.len() as f64;
    let resid: Vec<f64> = avg_pool3(delta_q, shape).iter().zip(delta_q).map(|(p, q)| p - q).collect();
    let loss = alpha / n * resid.iter().map(|r| r * r).sum::<f64>();
    let scale = 2.0 * alpha / n;
    let grad = avg_pool3(&resid, shape).iter().zip(&resid).map(|(pr, r)| scale * (pr - r)).collect();
    (loss, grad)
}
