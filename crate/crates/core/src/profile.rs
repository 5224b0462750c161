//! Activation profiling over a dataset, normality scoring and plane ranking.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::plane::Plane;
use crate::quantile::{NeuronDistribution, TABLE_LEN};
use crate::tensor::{read_exact, read_u32, Tensor};

pub const MIN_PROFILE_SAMPLES: usize = 64;
pub const DBP_MAGIC: &[u8; 4] = b"DBP1";

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneProfile {
    pub plane: usize,
    pub dists: Vec<NeuronDistribution>,
    pub scores: Vec<f64>,
    /// Median score over non-degenerate neurons, 0 if there are none.
    pub aggregate: f64,
}

impl PlaneProfile {
    pub fn from_dists(plane: usize, dists: Vec<NeuronDistribution>) -> Self {
        let scores: Vec<f64> = dists.iter().map(normality_score).collect();
        let mut live: Vec<f64> =
            dists.iter().zip(&scores).filter(|(d, _)| !d.is_degenerate()).map(|(_, &s)| s).collect();
        live.sort_by(f64::total_cmp);
        let aggregate = match live.len() {
            0 => 0.0,
            n if n % 2 == 1 => live[n / 2],
            n => 0.5 * (live[n / 2 - 1] + live[n / 2]),
        };
        PlaneProfile { plane, dists, scores, aggregate }
    }

    pub fn neuron_count(&self) -> usize {
        self.dists.len()
    }

    /// Quantile table width `C^-1(0.75) - C^-1(0.25)` per neuron.
    pub fn iqr(&self) -> Vec<f32> {
        self.dists.iter().map(|d| d.quantile(0.75) - d.quantile(0.25)).collect()
    }
}

/// `exp(-(skew^2 + excess_kurtosis^2) / 4)` of the uniformly resampled
/// table; 0 for degenerate neurons.
pub fn normality_score(dist: &NeuronDistribution) -> f64 {
    if dist.is_degenerate() {
        return 0.0;
    }
    let (_, var, skew, kurt) = dist.moments();
    if var <= 0.0 {
        return 0.0;
    }
    (-(skew * skew + kurt * kurt) / 4.0).exp()
}

/// Profiles several planes from one forward pass per sample.
pub fn profile_planes(model: &Model, data: &[Tensor], planes: &[Plane]) -> Result<Vec<PlaneProfile>> {
    if data.len() < MIN_PROFILE_SAMPLES {
        return Err(Error::Usage(format!(
            "profiling needs at least {MIN_PROFILE_SAMPLES} samples, got {}",
            data.len()
        )));
    }
    let graph = &model.graph;
    // Sample-major rows, one per sample, all planes concatenated.
    let rows: Vec<Vec<f32>> = data
        .par_iter()
        .map(|x| {
            let (_, tape) = graph.forward(x)?;
            Ok(planes.iter().flat_map(|p| p.gather(tape.activations())).collect())
        })
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(planes.len());
    let mut offset = 0;
    for plane in planes {
        let dists = (offset..offset + plane.neuron_count)
            .into_par_iter()
            .map(|col| {
                let column: Vec<f32> = rows.iter().map(|r| r[col]).collect();
                NeuronDistribution::from_samples(&column)
            })
            .collect::<Result<Vec<_>>>()?;
        offset += plane.neuron_count;
        out.push(PlaneProfile::from_dists(plane.id, dists));
    }
    Ok(out)
}

pub fn profile_plane(model: &Model, data: &[Tensor], plane: &Plane) -> Result<PlaneProfile> {
    Ok(profile_planes(model, data, std::slice::from_ref(plane))?.remove(0))
}

/// Plane ids of the `k` best aggregate scores, ties to the lower id.
pub fn select_planes(profiles: &[PlaneProfile], k: usize) -> Vec<usize> {
    let mut ranked: Vec<&PlaneProfile> = profiles.iter().collect();
    ranked.sort_by(|a, b| b.aggregate.total_cmp(&a.aggregate).then(a.plane.cmp(&b.plane)));
    ranked.into_iter().take(k).map(|p| p.plane).collect()
}

/// `DBP1`, plane id, neuron count, then per neuron the 1025-entry table and
/// the score, all little-endian.
pub fn write_profile<W: Write>(profile: &PlaneProfile, mut w: W) -> Result<()> {
    w.write_all(DBP_MAGIC)?;
    w.write_all(&(profile.plane as u32).to_le_bytes())?;
    w.write_all(&(profile.dists.len() as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity((TABLE_LEN + 1) * 4);
    for (d, &s) in profile.dists.iter().zip(&profile.scores) {
        buf.clear();
        for &q in d.table() {
            buf.extend_from_slice(&q.to_le_bytes());
        }
        buf.extend_from_slice(&(s as f32).to_le_bytes());
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Reads a profile; sample counts are not stored and come back as 0. Scores
/// are recomputed from the tables.
pub fn read_profile<R: Read>(mut r: R) -> Result<PlaneProfile> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != DBP_MAGIC {
        return Err(Error::Format(format!("bad profile magic {magic:?}")));
    }
    let plane = read_u32(&mut r, "plane id")? as usize;
    let count = read_u32(&mut r, "neuron count")? as usize;
    let mut dists = Vec::with_capacity(count.min(1 << 20));
    let mut buf = vec![0u8; (TABLE_LEN + 1) * 4];
    for _ in 0..count {
        read_exact(&mut r, &mut buf, "neuron table")?;
        let table = buf[..TABLE_LEN * 4].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        dists.push(NeuronDistribution::from_table(table, 0)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last neuron".into()));
    }
    Ok(PlaneProfile::from_dists(plane, dists))
}

/// Density rows `neuron,bin,low,high,density` for histogram plots, from
/// the CDF mass in `bins` equal-width bins over each neuron's support.
pub fn write_density_csv<W: Write>(profile: &PlaneProfile, neurons: &[usize], bins: usize, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["neuron", "bin", "low", "high", "density"])?;
    for &n in neurons {
        let d = profile
            .dists
            .get(n)
            .ok_or_else(|| Error::Usage(format!("neuron {n} out of range for plane {}", profile.plane)))?;
        let (lo, hi) = (d.min() as f64, d.max() as f64);
        let width = (hi - lo) / bins as f64;
        for b in 0..bins {
            let (a, z) = (lo + b as f64 * width, lo + (b + 1) as f64 * width);
            let density = if width > 0.0 {
                let upper = if b + 1 == bins { 1.0 } else { d.cdf(z as f32) };
                (upper - d.cdf(a as f32)) / width
            } else {
                0.0
            };
            wtr.write_record([n.to_string(), b.to_string(), format!("{a}"), format!("{z}"), format!("{density}")])?;
        }
    }
    wtr.flush()?;
    Ok(())
}
