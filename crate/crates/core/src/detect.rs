//! Feature-squeezing detection, differential maps and transfer checks.

use std::fmt;
use std::str::FromStr;

use crate::attack::Mode;
use crate::error::{Error, Result};
use crate::loss::{is_success, softmax};
use crate::model::Model;
use crate::tensor::Tensor;

/// `round(v * (2^bits - 1)) / (2^bits - 1)` per value.
pub fn squeeze_bit_depth(image: &Tensor, bits: u32) -> Result<Tensor> {
    if !(1..=8).contains(&bits) {
        return Err(Error::Usage(format!("bit depth must be in 1..=8, got {bits}")));
    }
    let levels = ((1u32 << bits) - 1) as f32;
    Ok(image.map(|v| (v * levels).round() / levels))
}

/// 2x2 sliding median (mean of the two middle values) per channel. The
/// window at `(y, x)` covers rows `y, y+1` and columns `x, x+1`; the
/// missing row and column past the bottom/right edge reflect to `h-2`/`w-2`.
pub fn squeeze_median(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image.chw()?;
    let reflect = |i: usize, n: usize| if i < n { i } else { n.saturating_sub(2) };
    let d = image.data();
    let mut out = vec![0.0f32; d.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let (y1, x1) = (reflect(y + 1, h), reflect(x + 1, w));
                let mut v = [d[base + y * w + x], d[base + y * w + x1], d[base + y1 * w + x], d[base + y1 * w + x1]];
                v.sort_by(f32::total_cmp);
                out[base + y * w + x] = 0.5 * (v[1] + v[2]);
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Squeezer {
    BitDepth(u32),
    Median2x2,
}

impl Squeezer {
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        match *self {
            Squeezer::BitDepth(bits) => squeeze_bit_depth(image, bits),
            Squeezer::Median2x2 => squeeze_median(image),
        }
    }

    /// 5-bit depth reduction and 2x2 median smoothing.
    pub fn standard() -> Vec<Squeezer> {
        vec![Squeezer::BitDepth(5), Squeezer::Median2x2]
    }
}

impl fmt::Display for Squeezer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Squeezer::BitDepth(b) => write!(f, "bits{b}"),
            Squeezer::Median2x2 => f.write_str("median2x2"),
        }
    }
}

impl FromStr for Squeezer {
    type Err = Error;

    /// `bits<N>` or `median2x2`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "median2x2" {
            return Ok(Squeezer::Median2x2);
        }
        s.strip_prefix("bits")
            .and_then(|b| b.parse().ok())
            .filter(|b| (1..=8).contains(b))
            .map(Squeezer::BitDepth)
            .ok_or_else(|| Error::Usage(format!("unknown squeezer {s:?} (expected bits<1-8> or median2x2)")))
    }
}

/// Largest `l1` distance between the softmax of `x` and of each squeezed `x`;
/// 0 without squeezers.
pub fn divergence_score(model: &Model, x: &Tensor, squeezers: &[Squeezer]) -> Result<f64> {
    let raw = softmax(model.logits(x)?.data());
    let mut score = 0.0f64;
    for s in squeezers {
        let sq = softmax(model.logits(&s.apply(x)?)?.data());
        score = score.max(raw.iter().zip(&sq).map(|(a, b)| (a - b).abs() as f64).sum());
    }
    Ok(score)
}

/// Flags `x` when its divergence score exceeds `threshold`.
pub fn detect(model: &Model, x: &Tensor, squeezers: &[Squeezer], threshold: f64) -> Result<bool> {
    if squeezers.is_empty() {
        return Ok(false);
    }
    Ok(divergence_score(model, x, squeezers)? > threshold)
}

/// Nearest-rank 95th percentile of benign scores, so at most 5% of them
/// exceed it.
pub fn calibrate_threshold(benign_scores: &[f64]) -> Result<f64> {
    if benign_scores.is_empty() {
        return Err(Error::Usage("threshold calibration needs benign scores".into()));
    }
    let mut s = benign_scores.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((0.95 * s.len() as f64).ceil() as usize).clamp(1, s.len());
    Ok(s[rank - 1])
}

/// `clamp(0.5 + scale * (x_adv - x_nat), 0, 1)`.
pub fn differential_map(x_nat: &Tensor, x_adv: &Tensor, scale: f32) -> Result<Tensor> {
    let diff = crate::metrics::difference(x_nat, x_adv)?;
    Ok(diff.map(|d| (0.5 + scale * d).clamp(0.0, 1.0)))
}

/// Success rate of adversarial samples under a second model; `None` for an
/// empty set.
pub fn transfer_eval(adv: &[(Tensor, usize)], model: &Model, mode: Mode) -> Result<Option<f64>> {
    if adv.is_empty() {
        return Ok(None);
    }
    let mut hits = 0usize;
    for (x, label) in adv {
        let goal = mode.goal(*label, model.graph.classes())?;
        hits += is_success(model.logits(x)?.data(), goal) as usize;
    }
    Ok(Some(hits as f64 / adv.len() as f64))
}
