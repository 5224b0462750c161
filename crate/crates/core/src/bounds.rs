//! Per-neuron admissible intervals around the natural activation.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::profile::PlaneProfile;
use crate::quantile::NeuronDistribution;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    /// Move at most `eps` in CDF space.
    Quantile,
    /// Half-width `eps * (max - min)` around the natural value.
    MinMax,
}

impl BoundKind {
    pub fn name(self) -> &'static str {
        match self {
            BoundKind::Quantile => "quantile",
            BoundKind::MinMax => "minmax",
        }
    }
}

impl fmt::Display for BoundKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BoundKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quantile" => Ok(BoundKind::Quantile),
            "minmax" => Ok(BoundKind::MinMax),
            other => Err(Error::Usage(format!("unknown bound kind {other:?} (expected quantile or minmax)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub nat: f32,
    pub low: f32,
    pub high: f32,
    /// Degenerate neuron or natural value on an endpoint: no barrier term.
    pub excluded: bool,
}

impl Interval {
    fn around(nat: f32, low: f32, high: f32) -> Self {
        let (low, high) = (low.min(nat), high.max(nat));
        Interval { nat, low, high, excluded: low == nat || high == nat }
    }

    pub fn contains(&self, y: f32) -> bool {
        self.low <= y && y <= self.high
    }

    pub fn width(&self) -> f32 {
        self.high - self.low
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("bound epsilon must lie in (0, 1], got {eps}")))
    }
}

/// `[C^-1(max(C(y) - eps, 0)), C^-1(min(C(y) + eps, 1))]`, widened to contain
/// `y_nat` when it falls outside the profiled support.
pub fn quantile_bound(dist: &NeuronDistribution, y_nat: f32, eps: f64) -> Result<Interval> {
    check_eps(eps)?;
    if dist.is_degenerate() {
        return Ok(Interval { nat: y_nat, low: y_nat, high: y_nat, excluded: true });
    }
    let c = dist.cdf(y_nat);
    let low = dist.quantile((c - eps).max(0.0));
    let high = dist.quantile((c + eps).min(1.0));
    Ok(Interval::around(y_nat, low, high))
}

/// `y_nat -/+ eps * (max - min)`.
pub fn minmax_bound(dist: &NeuronDistribution, y_nat: f32, eps: f64) -> Result<Interval> {
    check_eps(eps)?;
    if dist.is_degenerate() {
        return Ok(Interval { nat: y_nat, low: y_nat, high: y_nat, excluded: true });
    }
    let half = (dist.max() as f64 - dist.min() as f64) * eps;
    let (yn, half) = (y_nat as f64, half);
    Ok(Interval::around(y_nat, (yn - half) as f32, (yn + half) as f32))
}

/// Intervals for every neuron of one plane at one natural input.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundSpec {
    pub kind: BoundKind,
    pub eps: f64,
    pub plane: usize,
    pub intervals: Vec<Interval>,
}

impl BoundSpec {
    pub fn excluded(&self) -> usize {
        self.intervals.iter().filter(|iv| iv.excluded).count()
    }

    /// All non-excluded neurons lie inside their intervals.
    pub fn feasible(&self, y: &[f32]) -> bool {
        self.intervals.iter().zip(y).all(|(iv, &v)| iv.excluded || iv.contains(v))
    }
}

pub fn resolve_bounds(profile: &PlaneProfile, y_nat: &[f32], kind: BoundKind, eps: f64) -> Result<BoundSpec> {
    if y_nat.len() != profile.dists.len() {
        return Err(Error::Shape(format!(
            "plane {} has {} neurons, got {} activations",
            profile.plane,
            profile.dists.len(),
            y_nat.len()
        )));
    }
    let bound = match kind {
        BoundKind::Quantile => quantile_bound,
        BoundKind::MinMax => minmax_bound,
    };
    let intervals = profile.dists.iter().zip(y_nat).map(|(d, &y)| bound(d, y, eps)).collect::<Result<_>>()?;
    Ok(BoundSpec { kind, eps, plane: profile.plane, intervals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn dist(s: &[f32]) -> NeuronDistribution {
        NeuronDistribution::from_samples(s).unwrap()
    }

    #[test]
    fn full_epsilon_gives_observed_extremes() {
        let d = dist(&[3.0, 1.0, 4.0, 2.0]);
        for y in [1.0, 2.2, 4.0] {
            let iv = quantile_bound(&d, y, 1.0).unwrap();
            assert_eq!((iv.low, iv.high), (1.0, 4.0));
        }
    }

    #[test]
    fn toy_quantile_bound() {
        let iv = quantile_bound(&dist(&[1.0, 2.0, 3.0, 4.0]), 2.5, 0.25).unwrap();
        assert_eq!((iv.low, iv.high), (1.5, 3.5));
        assert!(!iv.excluded);
    }

    #[test]
    fn natural_value_at_maximum() {
        let iv = quantile_bound(&dist(&[1.0, 2.0, 3.0, 4.0]), 4.0, 0.1).unwrap();
        assert_eq!(iv.high, 4.0);
        assert!(iv.excluded);
    }

    #[test]
    fn minmax_examples() {
        let d = dist(&[1.0, 2.0, 3.0, 4.0]);
        let iv = minmax_bound(&d, 2.0, 0.1).unwrap();
        assert_relative_eq!(iv.low, 1.7, max_relative = 1e-6);
        assert_relative_eq!(iv.high, 2.3, max_relative = 1e-6);
        let tiny = minmax_bound(&d, 2.0, 1e-9).unwrap();
        assert_relative_eq!(tiny.low, 2.0, max_relative = 1e-6);
        assert_relative_eq!(tiny.high, 2.0, max_relative = 1e-6);
    }

    #[test]
    fn skewed_samples_quantile_asymmetric_minmax_symmetric() {
        let d = dist(&[0.0, 0.1, 0.2, 10.0]);
        let q = quantile_bound(&d, 0.1, 0.4).unwrap();
        let m = minmax_bound(&d, 0.1, 0.4).unwrap();
        assert!(((q.high - q.nat) - (q.nat - q.low)).abs() > 1.0, "{q:?}");
        // Symmetric up to the f32 rounding of the endpoints.
        let (up, down) = (m.high as f64 - m.nat as f64, m.nat as f64 - m.low as f64);
        assert!((up - down).abs() <= 1e-6 * up, "{m:?}");
    }

    #[test]
    fn degenerate_and_bad_epsilon() {
        let d = dist(&[2.0; 70]);
        let iv = quantile_bound(&d, 2.0, 0.3).unwrap();
        assert!(iv.excluded);
        assert_eq!((iv.low, iv.high), (2.0, 2.0));
        assert!(minmax_bound(&d, 2.0, 0.3).unwrap().excluded);
        assert!(quantile_bound(&dist(&[1.0, 2.0]), 1.5, 0.0).is_err());
        assert!(quantile_bound(&dist(&[1.0, 2.0]), 1.5, 1.5).is_err());
    }

    #[test]
    fn out_of_support_value_is_contained() {
        let d = dist(&[1.0, 2.0, 3.0, 4.0]);
        let iv = quantile_bound(&d, 7.0, 0.2).unwrap();
        assert!(iv.contains(7.0));
        assert!(iv.excluded);
    }
}
