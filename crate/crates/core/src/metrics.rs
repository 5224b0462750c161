//! Image distances, bound measurements and per-sample metric records.
//!
//! Pixel `l2` is reported on the 0-255 scale and `l_inf` on the 0-1 scale.

use std::io::{Read, Write};

use crate::bounds::BoundSpec;
use crate::error::{Error, Result};
use crate::loss::normalized_deviation;
use crate::profile::PlaneProfile;
use crate::tensor::Tensor;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::Shape(format!("images differ in shape: {:?} vs {:?}", a.shape(), b.shape())))
    }
}

/// `(l2 on 0-255, l_inf on 0-1)` of `x_adv - x_nat`.
pub fn pixel_distances(x_nat: &Tensor, x_adv: &Tensor) -> Result<(f64, f64)> {
    same_shape(x_nat, x_adv)?;
    let (mut sq, mut max) = (0.0f64, 0.0f64);
    for (&a, &b) in x_nat.data().iter().zip(x_adv.data()) {
        let d = b as f64 - a as f64;
        sq += (255.0 * d) * (255.0 * d);
        max = max.max(d.abs());
    }
    Ok((sq.sqrt(), max))
}

/// `max_i |C_i(y_adv) - C_i(y_nat)|` over a plane.
pub fn quantile_distance(profile: &PlaneProfile, y_nat: &[f32], y_adv: &[f32]) -> f64 {
    profile
        .dists
        .iter()
        .zip(y_nat.iter().zip(y_adv))
        .map(|(d, (&n, &a))| (d.cdf(a) - d.cdf(n)).abs())
        .fold(0.0, f64::max)
}

/// Largest normalised deviation over non-excluded neurons; at most 1 exactly
/// when every such neuron is inside its interval.
pub fn occupancy(spec: &BoundSpec, y_adv: &[f32]) -> f64 {
    spec.intervals
        .iter()
        .zip(y_adv)
        .filter(|(iv, _)| !iv.excluded)
        .map(|(iv, &y)| normalized_deviation(y, iv))
        .fold(0.0, f64::max)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean local SSIM over all fully contained 11x11 Gaussian windows
/// (sigma 1.5) on the unit dynamic range, averaged over channels.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    same_shape(x, y)?;
    let (c, h, w) = x.chw()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Usage(format!("SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    let g = gaussian_window();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for ch in 0..c {
        let a = &x.data()[ch * h * w..(ch + 1) * h * w];
        let b = &y.data()[ch * h * w..(ch + 1) * h * w];
        let mut acc = 0.0;
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (ky, gy) in g.iter().enumerate() {
                    for (kx, gx) in g.iter().enumerate() {
                        let wgt = gy * gx;
                        let i = (oy + ky) * w + ox + kx;
                        let (va, vb) = (a[i] as f64, b[i] as f64);
                        ma += wgt * va;
                        mb += wgt * vb;
                        saa += wgt * va * va;
                        sbb += wgt * vb * vb;
                        sab += wgt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            }
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / c as f64)
}

/// Sum of squared responses of the 2x2 filter `[[1, -1], [-1, 1]]` over
/// every channel and position of `delta`.
pub fn checkerboard_energy(delta: &Tensor) -> Result<f64> {
    let (c, h, w) = delta.chw()?;
    let d = delta.data();
    let mut e = 0.0;
    for ch in 0..c {
        for y in 0..h.saturating_sub(1) {
            for x in 0..w.saturating_sub(1) {
                let at = |yy: usize, xx: usize| d[(ch * h + yy) * w + xx] as f64;
                let r = at(y, x) - at(y, x + 1) - at(y + 1, x) + at(y + 1, x + 1);
                e += r * r;
            }
        }
    }
    Ok(e)
}

pub fn difference(x_nat: &Tensor, x_adv: &Tensor) -> Result<Tensor> {
    same_shape(x_nat, x_adv)?;
    Tensor::new(x_nat.shape().to_vec(), x_adv.data().iter().zip(x_nat.data()).map(|(a, b)| a - b).collect())
}

/// One row of a per-sample metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub sample: usize,
    pub method: String,
    pub setting: String,
    pub label: usize,
    pub l2: f64,
    pub linf: f64,
    /// `(plane id, l_inf quantile distance)`.
    pub quantile_distances: Vec<(usize, f64)>,
    pub ssim: f64,
    pub confidence: f64,
    pub success: bool,
    pub feasible: bool,
    pub occupancy: f64,
    pub iterations: usize,
    pub consistent: bool,
}

pub const METRICS_HEADER: [&str; 14] = [
    "sample",
    "method",
    "setting",
    "label",
    "l2",
    "linf",
    "quantile_distances",
    "ssim",
    "confidence",
    "success",
    "feasible",
    "occupancy",
    "iterations",
    "consistent",
];

fn format_distances(d: &[(usize, f64)]) -> String {
    d.iter().map(|(p, v)| format!("{p}:{v}")).collect::<Vec<_>>().join(";")
}

fn parse_distances(s: &str) -> Result<Vec<(usize, f64)>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|item| {
            let (p, v) = item.split_once(':').ok_or_else(|| Error::Format(format!("bad quantile distance {item:?}")))?;
            Ok((parse(p, "plane id")?, parse(v, "quantile distance")?))
        })
        .collect()
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Format(format!("bad {what} {s:?}")))
}

fn parse_flag(s: &str) -> Result<bool> {
    match s {
        "1" => Ok(true),
        "0" => Ok(false),
        other => Err(Error::Format(format!("bad flag {other:?}"))),
    }
}

pub fn write_metrics_csv<W: Write>(records: &[MetricsRecord], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(METRICS_HEADER)?;
    for r in records {
        wtr.write_record([
            r.sample.to_string(),
            r.method.clone(),
            r.setting.clone(),
            r.label.to_string(),
            format!("{}", r.l2),
            format!("{}", r.linf),
            format_distances(&r.quantile_distances),
            format!("{}", r.ssim),
            format!("{}", r.confidence),
            (r.success as u8).to_string(),
            (r.feasible as u8).to_string(),
            format!("{}", r.occupancy),
            r.iterations.to_string(),
            (r.consistent as u8).to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(r: R) -> Result<Vec<MetricsRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    if rdr.headers()?.iter().ne(METRICS_HEADER) {
        return Err(Error::Format("unexpected metrics header".into()));
    }
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            if rec.len() != METRICS_HEADER.len() {
                return Err(Error::Format(format!("metrics row has {} fields", rec.len())));
            }
            Ok(MetricsRecord {
                sample: parse(&rec[0], "sample")?,
                method: rec[1].to_string(),
                setting: rec[2].to_string(),
                label: parse(&rec[3], "label")?,
                l2: parse(&rec[4], "l2")?,
                linf: parse(&rec[5], "linf")?,
                quantile_distances: parse_distances(&rec[6])?,
                ssim: parse(&rec[7], "ssim")?,
                confidence: parse(&rec[8], "confidence")?,
                success: parse_flag(&rec[9])?,
                feasible: parse_flag(&rec[10])?,
                occupancy: parse(&rec[11], "occupancy")?,
                iterations: parse(&rec[12], "iterations")?,
                consistent: parse_flag(&rec[13])?,
            })
        })
        .collect()
}
