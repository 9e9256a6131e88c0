//! Independent reference implementations and fixtures shared by the
//! integration tests. The oracles are written directly from the defining
//! formulas, without the stabilizations or code paths of the library.

#![allow(dead_code)]

pub mod cli;

use numcore::Tensor;
use sassl::nst::{StyleExtractor, StyleTransfer, Stylizer, StylizerConfig};
use sassl::stylebank::StyleBank;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// NT-Xent by direct summation: rows `2k` and `2k+1` are the two views of
/// sample `k`; the denominator of row `m` runs over every `l ≠ m`.
pub fn nt_xent_oracle(rows: &[Vec<f64>], tau: f64) -> f64 {
    let n2 = rows.len();
    let mut total = 0.0;
    for m in 0..n2 {
        let partner = if m % 2 == 0 { m + 1 } else { m - 1 };
        let num = (cosine(&rows[m], &rows[partner]) / tau).exp();
        let den: f64 = (0..n2)
            .filter(|&l| l != m)
            .map(|l| (cosine(&rows[m], &rows[l]) / tau).exp())
            .sum();
        total += -(num / den).ln();
    }
    total / n2 as f64
}

/// InfoNCE of queries against keys; the positive of query `i` is key `i`.
pub fn info_nce_oracle(queries: &[Vec<f64>], keys: &[Vec<f64>], tau: f64) -> f64 {
    let n = queries.len();
    let mut total = 0.0;
    for i in 0..n {
        let num = (cosine(&queries[i], &keys[i]) / tau).exp();
        let den: f64 = keys.iter().map(|k| (cosine(&queries[i], k) / tau).exp()).sum();
        total += -(num / den).ln();
    }
    total / n as f64
}

/// `1 − (1−m₀)·(cos(πt/T)+1)/2`.
pub fn momentum_oracle(step: usize, total: usize, m0: f64) -> f64 {
    1.0 - (1.0 - m0) * ((std::f64::consts::PI * step as f64 / total as f64).cos() + 1.0) / 2.0
}

/// Style index of sample `b` under in-batch pairing with shift `b0`.
pub fn pairing_oracle(batch: usize, b0: usize) -> Vec<usize> {
    (0..batch as i64)
        .map(|b| (b - b0 as i64).rem_euclid(batch as i64) as usize)
        .collect()
}

/// Per-channel population mean and standard deviation of `[C,H,W]`.
pub fn channel_moments(x: &Tensor<f32>) -> Vec<(f64, f64)> {
    let hw = x.shape()[1] * x.shape()[2];
    x.data()
        .chunks(hw)
        .map(|p| {
            let m = p.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
            let v = p.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / hw as f64;
            (m, v.sqrt())
        })
        .collect()
}

pub fn rows_of(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let w = t.shape()[1];
    t.data().chunks(w).map(|r| r.to_vec()).collect()
}

pub fn default_engine() -> StyleTransfer {
    StyleTransfer::new(
        StyleExtractor::with_defaults(11),
        Stylizer::new(&StylizerConfig::default(), 12).unwrap(),
    )
    .unwrap()
}

pub fn test_bank(dim: usize, count: usize) -> StyleBank {
    let data = (0..dim * count).map(|i| ((i * 31 % 17) as f32 - 8.0) / 4.0).collect();
    StyleBank::new(dim, data, "test").unwrap()
}

pub fn test_image(seed: usize, h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn([3, h, w], |i| {
        let x = (i * (2 * seed + 3) + seed * 7) % 251;
        x as f32 / 250.0
    })
}
