use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::plane::Plane;
use crate::profile::PlaneProfile;
use crate::tensor::Tensor;

use super::{bim_attack, d2b_attack, AttackConfig, AttackResult, BimConfig, Throttle};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSearch {
    pub step: f64,
    /// Even `lo` was infeasible.
    pub warning: bool,
}

/// Largest step in `[lo, hi]` accepted by a monotone feasibility predicate,
/// to within `(hi - lo) / 2^probes`.
pub fn binary_search_step(mut feasible: impl FnMut(f64) -> bool, lo: f64, hi: f64, probes: usize) -> StepSearch {
    if feasible(hi) {
        return StepSearch { step: hi, warning: false };
    }
    let (mut a, mut b) = (lo, hi);
    for _ in 0..probes {
        let mid = 0.5 * (a + b);
        if feasible(mid) {
            a = mid;
        } else {
            b = mid;
        }
    }
    let warning = a == lo && !feasible(lo);
    if warning {
        log::warn!("no feasible step in [{lo}, {hi}]");
    }
    StepSearch { step: a, warning }
}

/// Step search for the bounded attack: a step is feasible when truncated runs
/// of `probe_iters` iterations on every probe sample stay in bounds at each
/// iteration without a numerical exception. `cfg.search` is ignored.
pub fn search_step(
    probes: &[(Tensor, usize)],
    target: &Model,
    throttle: &Throttle,
    cfg: &AttackConfig,
    range: (f64, f64),
    count: usize,
    probe_iters: usize,
) -> Result<StepSearch> {
    let mut failure = None;
    let search = binary_search_step(
        |step| {
            let probe_cfg = AttackConfig { step, max_iters: probe_iters, patience: usize::MAX, search: None, ..cfg.clone() };
            let runs: Result<Vec<bool>> = probes
                .par_iter()
                .map(|(x, label)| {
                    let r = d2b_attack(x, *label, target, throttle, &probe_cfg)?;
                    Ok(r.recoveries == 0 && r.trace.iter().all(|t| t.feasible))
                })
                .collect();
            match runs {
                Ok(ok) => ok.into_iter().all(|b| b),
                Err(e) => {
                    failure.get_or_insert(e);
                    false
                }
            }
        },
        range.0,
        range.1,
        count,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(search),
    }
}

/// Mean over samples of the largest per-neuron quantile change that the
/// pixel-bounded attack induces at each plane of the reference model.
pub fn calibrate_epsilon(
    reference: &Model,
    planes: &[(&Plane, &PlaneProfile)],
    target: &Model,
    samples: &[(Tensor, usize)],
    bim: &BimConfig,
) -> Result<Vec<f64>> {
    if samples.len() < 10 {
        return Err(Error::Usage(format!("calibration needs at least 10 samples, got {}", samples.len())));
    }
    if bim.eps == 0.0 {
        return Ok(vec![0.0; planes.len()]);
    }
    let per_sample: Vec<(bool, Vec<f64>)> = samples
        .par_iter()
        .map(|(x, label)| {
            let r = bim_attack(x, *label, target, bim, None)?;
            let (_, nat) = reference.graph.forward(x)?;
            let (_, adv) = reference.graph.forward(&r.x_adv)?;
            let dists = planes
                .iter()
                .map(|(plane, profile)| {
                    let (yn, ya) = (plane.gather(nat.activations()), plane.gather(adv.activations()));
                    profile.dists.iter().zip(yn.iter().zip(&ya)).map(|(d, (&a, &b))| (d.cdf(b) - d.cdf(a)).abs()).fold(0.0, f64::max)
                })
                .collect();
            Ok((r.success, dists))
        })
        .collect::<Result<_>>()?;
    if !per_sample.iter().any(|(s, _)| *s) {
        return Err(Error::Calibration("the pixel-bounded attack failed on every calibration sample".into()));
    }
    let n = per_sample.len() as f64;
    Ok((0..planes.len()).map(|p| per_sample.iter().map(|(_, d)| d[p]).sum::<f64>() / n).collect())
}

/// Runs `attack` on every sample in parallel; results keep sample order.
pub fn run_batch<F>(samples: &[(Tensor, usize)], attack: F) -> Result<Vec<AttackResult>>
where
    F: Fn(&Tensor, usize) -> Result<AttackResult> + Sync,
{
    samples.par_iter().map(|(x, label)| attack(x, *label)).collect()
}
