//! Per-neuron empirical distributions stored as monotone quantile tables.
//!
//! The empirical CDF places order statistic `s_(i)` (1-based, `n` samples) at
//! the Hazen position `(i - 0.5) / n` and interpolates linearly between
//! neighbours. The quantile function saturates at the observed extremes. A
//! distribution keeps only `C^-1(j / 1024)` for `j = 0..=1024`; both `C` and
//! `C^-1` are evaluated by linear interpolation on that table, which makes
//! them exact inverses wherever the table is strictly increasing.

use crate::error::{Error, Result};

pub const GRID: usize = 1024;
pub const TABLE_LEN: usize = GRID + 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NeuronDistribution {
    table: Vec<f32>,
    /// Number of profiled samples; 0 when loaded from a profile file.
    samples: usize,
}

/// Hazen-interpolated quantile of sorted samples, saturating at the extremes.
pub fn hazen_quantile(sorted: &[f32], p: f64) -> f64 {
    let n = sorted.len();
    let pos = p * n as f64 + 0.5;
    if pos <= 1.0 {
        return sorted[0] as f64;
    }
    if pos >= n as f64 {
        return sorted[n - 1] as f64;
    }
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    let (lo, hi) = (sorted[i - 1] as f64, sorted[i] as f64);
    lo + frac * (hi - lo)
}

impl NeuronDistribution {
    pub fn from_samples(samples: &[f32]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Usage("distribution needs at least one sample".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical { site: "profiled activation".into() });
        }
        let mut sorted = samples.to_vec();
        sorted.sort_unstable_by(f32::total_cmp);
        Ok(Self::from_sorted(&sorted))
    }

    /// `sorted` must be non-empty, finite and ascending.
    pub fn from_sorted(sorted: &[f32]) -> Self {
        let table = (0..TABLE_LEN).map(|j| hazen_quantile(sorted, j as f64 / GRID as f64) as f32).collect();
        NeuronDistribution { table, samples: sorted.len() }
    }

    pub fn from_table(table: Vec<f32>, samples: usize) -> Result<Self> {
        if table.len() != TABLE_LEN {
            return Err(Error::Format(format!("quantile table needs {TABLE_LEN} entries, got {}", table.len())));
        }
        if table.iter().any(|v| !v.is_finite()) || table.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Format("quantile table is not finite and non-decreasing".into()));
        }
        Ok(NeuronDistribution { table, samples })
    }

    pub fn table(&self) -> &[f32] {
        &self.table
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn min(&self) -> f32 {
        self.table[0]
    }

    pub fn max(&self) -> f32 {
        self.table[GRID]
    }

    pub fn is_degenerate(&self) -> bool {
        self.max() <= self.min()
    }

    /// `C^-1(p)`, with `p` clamped to `[0, 1]`.
    pub fn quantile(&self, p: f64) -> f32 {
        let t = p.clamp(0.0, 1.0) * GRID as f64;
        let j = (t.floor() as usize).min(GRID - 1);
        let frac = t - j as f64;
        let (lo, hi) = (self.table[j] as f64, self.table[j + 1] as f64);
        (lo + frac * (hi - lo)) as f32
    }

    /// Index `b` of the last table entry `<= y`, or `None` below the minimum.
    fn cell(&self, y: f32) -> Option<usize> {
        self.table.partition_point(|&q| q <= y).checked_sub(1)
    }

    /// `C(y)`: 0 below the observed minimum, 1 at or above the maximum.
    /// Inside a flat run of the table the right end of the run is used.
    pub fn cdf(&self, y: f32) -> f64 {
        match self.cell(y) {
            None => 0.0,
            Some(GRID) => 1.0,
            Some(b) => {
                let (lo, hi) = (self.table[b] as f64, self.table[b + 1] as f64);
                (b as f64 + (y as f64 - lo) / (hi - lo)) / GRID as f64
            }
        }
    }

    /// `dC/dy` of the piecewise-linear CDF; zero outside the support.
    pub fn cdf_slope(&self, y: f32) -> f64 {
        match self.cell(y) {
            None | Some(GRID) => 0.0,
            Some(b) => 1.0 / (GRID as f64 * (self.table[b + 1] as f64 - self.table[b] as f64)),
        }
    }

    /// Values at the cell midpoints `C^-1((j + 0.5) / 1024)`: a uniform
    /// resampling of the distribution.
    pub fn resampled(&self) -> impl Iterator<Item = f64> + '_ {
        self.table.windows(2).map(|w| 0.5 * (w[0] as f64 + w[1] as f64))
    }

    /// `(mean, variance, skewness, excess kurtosis)` of the resampled values.
    pub fn moments(&self) -> (f64, f64, f64, f64) {
        let n = GRID as f64;
        let mean = self.resampled().sum::<f64>() / n;
        let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
        for v in self.resampled() {
            let d = v - mean;
            let d2 = d * d;
            m2 += d2;
            m3 += d2 * d;
            m4 += d2 * d2;
        }
        let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
        if m2 <= 0.0 {
            return (mean, 0.0, 0.0, 0.0);
        }
        (mean, m2, m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    }
}
