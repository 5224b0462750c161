//! Procedurally generated textured-shape images.
//!
//! Ten classes: five shapes (disk, square, triangle, cross, ring) times two
//! texture families (oriented stripes, dotted grid), drawn over darker noisy
//! backgrounds at random position, scale, rotation and hue. Every image
//! draws from its own ChaCha stream so generation is order-independent, and
//! pixels are quantised to the 8-bit grid so PPM export is lossless.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{CLASSES, INPUT_SHAPE};
use crate::ppm;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
}

const SHAPES: [Shape; 5] = [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Cross, Shape::Ring];

pub fn generate_dataset(seed: u64, per_class: usize) -> Result<LabeledDataset> {
    if per_class == 0 {
        return Err(Error::Usage("per_class must be at least 1".into()));
    }
    let n = per_class * CLASSES;
    let images: Vec<Tensor> = (0..n).into_par_iter().map(|i| render(seed, i as u64, i % CLASSES)).collect();
    let labels = (0..n).map(|i| i % CLASSES).collect();
    Ok(LabeledDataset { images, labels })
}

fn render(seed: u64, index: u64, label: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let [c, h, w] = INPUT_SHAPE;
    let shape = SHAPES[label / 2];
    let dotted = label % 2 == 1;

    // Random hues, but the shape is always brighter than its surroundings.
    let bg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.2));
    let fg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.75..1.0));
    let bg_tilt = [rng.random_range(-0.006..0.006), rng.random_range(-0.006..0.006)];
    let cx = rng.random_range(11.0..21.0f32);
    let cy = rng.random_range(11.0..21.0f32);
    let radius = rng.random_range(7.5..11.0f32);
    let angle = rng.random_range(0.0..2.0 * PI);
    let period = rng.random_range(3.0..4.5f32);
    let tex_angle = rng.random_range(0.0..PI);
    let phase = rng.random_range(0.0..2.0 * PI);
    let noise = Normal::new(0.0f32, 0.04).expect("positive std");

    let mut data = vec![0.0f32; c * h * w];
    let (sa, ca) = angle.sin_cos();
    let (st, ct) = tex_angle.sin_cos();
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let (dx, dy) = (px - cx, py - cy);
            let u = ca * dx + sa * dy;
            let v = -sa * dx + ca * dy;
            let inside = contains(shape, u, v, radius);
            let tex = if dotted {
                let a = (2.0 * PI * (ct * px + st * py) / period + phase).sin();
                let b = (2.0 * PI * (-st * px + ct * py) / period + phase).sin();
                0.5 + 0.5 * a * b
            } else {
                0.5 + 0.5 * (2.0 * PI * (ct * px + st * py) / period + phase).sin()
            };
            let shade = 1.0 + bg_tilt[0] * (px - 16.0) + bg_tilt[1] * (py - 16.0);
            for ch in 0..c {
                let base = if inside { fg[ch] * (0.35 + 0.65 * tex) + 0.1 * (1.0 - tex) * bg[ch] } else { bg[ch] * shade };
                let v = base + noise.sample(&mut rng);
                data[(ch * h + y) * w + x] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    Tensor::new(INPUT_SHAPE.to_vec(), data).expect("fixed shape")
}

fn contains(shape: Shape, u: f32, v: f32, r: f32) -> bool {
    match shape {
        Shape::Disk => u * u + v * v < r * r,
        Shape::Square => u.abs().max(v.abs()) < 0.8 * r,
        Shape::Triangle => {
            // Equilateral, circumradius r, apex along -v.
            let s3 = 3f32.sqrt();
            v < 0.5 * r && s3 * u - v < r && -s3 * u - v < r
        }
        Shape::Cross => {
            let arm = 0.33 * r;
            (u.abs() < arm && v.abs() < r) || (v.abs() < arm && u.abs() < r)
        }
        Shape::Ring => {
            let d2 = u * u + v * v;
            d2 < r * r && d2 > 0.3 * r * r
        }
    }
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Deterministic 80/20 split into training and held-out parts. Labels
    /// cycle through the classes, so both parts stay class-balanced.
    pub fn split(&self) -> (LabeledDataset, LabeledDataset) {
        let cut = self.len() * 4 / 5;
        let part = |r: std::ops::Range<usize>| LabeledDataset {
            images: self.images[r.clone()].to_vec(),
            labels: self.labels[r].to_vec(),
        };
        (part(0..cut), part(cut..self.len()))
    }

    pub fn take(&self, n: usize) -> LabeledDataset {
        let n = n.min(self.len());
        LabeledDataset { images: self.images[..n].to_vec(), labels: self.labels[..n].to_vec() }
    }

    /// Writes `img_NNNNN.ppm` files and a `manifest.csv` of `filename,label`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut wtr = csv::Writer::from_path(dir.join("manifest.csv"))?;
        wtr.write_record(["filename", "label"])?;
        for (i, (img, label)) in self.images.iter().zip(&self.labels).enumerate() {
            let name = format!("img_{i:05}.ppm");
            ppm::save_ppm(img, &dir.join(&name))?;
            wtr.write_record([name, label.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn import(dir: &Path) -> Result<LabeledDataset> {
        let mut rdr = csv::Reader::from_path(dir.join("manifest.csv"))?;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let (name, label) = match (rec.get(0), rec.get(1)) {
                (Some(n), Some(l)) => (n, l),
                _ => return Err(Error::Format("manifest row needs filename,label".into())),
            };
            let label: usize = label.trim().parse().map_err(|_| Error::Format(format!("bad label {label:?}")))?;
            if label >= CLASSES {
                return Err(Error::Format(format!("label {label} out of range")));
            }
            let img = ppm::load_ppm(&dir.join(name))?;
            if img.shape() != INPUT_SHAPE {
                return Err(Error::Format(format!("{name}: expected 32x32 RGB, got {:?}", img.shape())));
            }
            images.push(img);
            labels.push(label);
        }
        Ok(LabeledDataset { images, labels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cardinality_and_labels() {
        let ds = generate_dataset(7, 1).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.labels, (0..10).collect::<Vec<_>>());
        assert!(generate_dataset(7, 0).is_err());
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate_dataset(7, 2).unwrap();
        let b = generate_dataset(7, 2).unwrap();
        let c = generate_dataset(8, 2).unwrap();
        let bytes = |d: &LabeledDataset| d.images.iter().flat_map(|t| t.to_dbt_bytes()).collect::<Vec<u8>>();
        assert_eq!(bytes(&a), bytes(&b));
        assert!(a.images.iter().zip(&c.images).any(|(x, y)| x != y));
    }

    #[test]
    fn pixels_in_unit_range_on_byte_grid() {
        let ds = generate_dataset(1, 1).unwrap();
        for img in &ds.images {
            for &v in img.data() {
                assert!((0.0..=1.0).contains(&v));
                assert_eq!(ppm::to_byte(v) as f32 / 255.0, v);
            }
        }
    }

    #[test]
    fn split_is_balanced() {
        let ds = generate_dataset(3, 5).unwrap();
        let (train, test) = ds.split();
        assert_eq!((train.len(), test.len()), (40, 10));
        for k in 0..CLASSES {
            assert_eq!(test.labels.iter().filter(|&&l| l == k).count(), 1);
        }
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(5, 1).unwrap();
        ds.export(dir.path()).unwrap();
        assert_eq!(LabeledDataset::import(dir.path()).unwrap(), ds);
    }
}
