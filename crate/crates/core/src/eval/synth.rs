//! Procedural desk-scale datasets: one geometric shape per class on a
//! randomized textured background, plus colourful texture images that serve
//! as style references.

use std::f64::consts::PI;

use numcore::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Cross,
}

pub const SHAPES: [Shape; 4] = [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Cross];

/// Parameters of the synthetic classification dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub classes: usize,
    pub image_size: usize,
    pub train_count: usize,
    pub test_count: usize,
    /// Amplitude of the per-pixel background noise.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            image_size: 40,
            train_count: 1000,
            test_count: 200,
            noise_scale: 0.08,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > 4 * 6 {
            return Err(Error::Config(format!("classes must be in 1..=24, got {}", self.classes)));
        }
        if self.image_size < 16 {
            return Err(Error::Config("image_size must be at least 16".into()));
        }
        if self.train_count == 0 {
            return Err(Error::Config("train_count must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_scale) {
            return Err(Error::Config("noise_scale must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Shape and base hue of class `k`.
    pub fn class_look(&self, k: usize) -> (Shape, f64) {
        (SHAPES[k % 4], k as f64 / self.classes as f64)
    }
}

/// Images with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.ndim() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::invalid(format!(
                "{} labels for images shaped {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> Result<Tensor<f32>> {
        Ok(self.images.index_outer(i)?)
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        self.labels.iter().for_each(|&l| h[l] += 1);
        h
    }
}

/// Train and test splits generated from disjoint substreams.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6.floor() as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn inside(shape: Shape, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        Shape::Disk => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        Shape::Triangle => {
            // upward triangle: apex at -r, base at +0.7r
            dy <= 0.7 * r && dy >= -r && dx.abs() <= (dy + r) * 0.6
        }
        Shape::Cross => (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r),
    }
}

fn render(spec: &SynthSpec, class: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = spec.image_size;
    let (shape, hue) = spec.class_look(class);
    let angle = rng.random::<f64>() * PI;
    let freq = 2.0 + rng.random::<f64>() * 4.0;
    let phase = rng.random::<f64>() * 2.0 * PI;
    let bg_a = hsv_to_rgb(rng.random(), 0.2 + 0.3 * rng.random::<f64>(), 0.25 + 0.3 * rng.random::<f64>());
    let bg_b = hsv_to_rgb(rng.random(), 0.2 + 0.3 * rng.random::<f64>(), 0.25 + 0.3 * rng.random::<f64>());
    let fg = hsv_to_rgb(
        hue + (rng.random::<f64>() - 0.5) * 0.06,
        0.6 + 0.4 * rng.random::<f64>(),
        0.75 + 0.25 * rng.random::<f64>(),
    );
    let r = s as f64 * (0.22 + 0.1 * rng.random::<f64>());
    let margin = r + 1.0;
    let cx = margin + rng.random::<f64>() * (s as f64 - 2.0 * margin).max(0.0);
    let cy = margin + rng.random::<f64>() * (s as f64 - 2.0 * margin).max(0.0);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut out = vec![0.0f32; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let u = (px * ca + py * sa) / s as f64;
            let t = 0.5 + 0.5 * (2.0 * PI * freq * u + phase).sin();
            let noise = (rng.random::<f64>() - 0.5) * 2.0 * spec.noise_scale;
            let rgb = if inside(shape, px - cx, py - cy, r) {
                fg
            } else {
                [0, 1, 2].map(|c| bg_a[c] * (1.0 - t) + bg_b[c] * t)
            };
            for c in 0..3 {
                out[c * s * s + y * s + x] = (rgb[c] + noise).clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

fn split(spec: &SynthSpec, count: usize, stream: &RngStream) -> Result<LabeledDataset> {
    let mut labels: Vec<usize> = (0..count).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut stream.substream(0, None, "labels"));
    let mut data = Vec::with_capacity(count * 3 * spec.image_size * spec.image_size);
    for (i, &label) in labels.iter().enumerate() {
        data.extend(render(spec, label, &mut stream.substream(i as u64, None, "render")));
    }
    let images = Tensor::new([count, 3, spec.image_size, spec.image_size], data)?;
    LabeledDataset::new(images, labels, spec.classes)
}

/// Deterministic by `spec.seed`; labels cycle through the classes so every
/// class count is within one of the others.
pub fn gen_synth(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let root = RngStream::new(spec.seed);
    Ok(SynthData {
        train: split(spec, spec.train_count, &root.derive("train", 0))?,
        test: split(spec, spec.test_count, &root.derive("test", 0))?,
    })
}

/// Colourful texture images (stripes, checkers and blobs) for style banks.
pub fn gen_style_images(count: usize, size: usize, seed: u64) -> Result<Vec<Tensor<f32>>> {
    if size < 16 {
        return Err(Error::invalid("style images must be at least 16 pixels wide"));
    }
    let root = RngStream::new(seed).derive("styles", 0);
    (0..count)
        .map(|i| {
            let mut rng = root.substream(i as u64, None, "style.image");
            let palette: Vec<[f64; 3]> = (0..3)
                .map(|_| hsv_to_rgb(rng.random(), 0.5 + 0.5 * rng.random::<f64>(), 0.4 + 0.6 * rng.random::<f64>()))
                .collect();
            let kind = rng.random_range(0..3);
            let freq = 2.0 + rng.random::<f64>() * 8.0;
            let angle = rng.random::<f64>() * PI;
            let (ca, sa) = (angle.cos(), angle.sin());
            let blobs: Vec<(f64, f64, f64)> = (0..6)
                .map(|_| (rng.random::<f64>(), rng.random::<f64>(), 0.05 + 0.2 * rng.random::<f64>()))
                .collect();
            let mut out = vec![0.0f32; 3 * size * size];
            for y in 0..size {
                for x in 0..size {
                    let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
                    let idx = match kind {
                        0 => ((u * ca + v * sa) * freq).floor().rem_euclid(3.0) as usize,
                        1 => (((u * freq).floor() + (v * freq).floor()) as i64).rem_euclid(2) as usize,
                        _ => blobs
                            .iter()
                            .position(|&(bx, by, br)| (u - bx).powi(2) + (v - by).powi(2) < br * br)
                            .map_or(2, |k| k % 2),
                    };
                    for c in 0..3 {
                        out[c * size * size + y * size + x] = palette[idx][c] as f32;
                    }
                }
            }
            Ok(Tensor::new([3, size, size], out)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            train_count: 50,
            test_count: 10,
            image_size: 20,
            ..Default::default()
        }
    }

    #[test]
    fn counts_and_balance() {
        let d = gen_synth(&small()).unwrap();
        assert_eq!(d.train.len(), 50);
        assert_eq!(d.test.len(), 10);
        let h = d.train.histogram();
        assert!(h.iter().max().unwrap() - h.iter().min().unwrap() <= 1);
        assert!(d.train.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(gen_synth(&small()).unwrap(), gen_synth(&small()).unwrap());
        let other = gen_synth(&SynthSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(other.train.images, gen_synth(&small()).unwrap().train.images);
    }

    #[test]
    fn shapes_differ() {
        let inside_count = |s: Shape| {
            let mut n = 0;
            for y in -10..=10 {
                for x in -10..=10 {
                    n += inside(s, x as f64, y as f64, 10.0) as usize;
                }
            }
            n
        };
        let counts: Vec<usize> = SHAPES.iter().map(|&s| inside_count(s)).collect();
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(counts[i], counts[j]);
            }
        }
    }

    #[test]
    fn style_images() {
        let imgs = gen_style_images(5, 24, 3).unwrap();
        assert_eq!(imgs.len(), 5);
        assert_eq!(imgs[0].shape(), &[3, 24, 24]);
        assert_eq!(imgs, gen_style_images(5, 24, 3).unwrap());
    }
}
