//! Augmentation-only throughput measurement.

use std::time::Instant;

use numcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::augpipe::{make_views, AugPolicy, StyleContext};
use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const WARMUP_RUNS: usize = 3;

/// `(baseline − candidate) / baseline × 100`: the percentage of throughput
/// lost by the candidate pipeline.
pub fn relative_change(baseline: f64, candidate: f64) -> f64 {
    (baseline - candidate) / baseline * 100.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub pipeline: String,
    pub images_per_second: f64,
    pub baseline_pipeline: String,
    pub baseline_images_per_second: f64,
    pub relative_change_percent: f64,
    pub runs: usize,
    pub warmup_runs: usize,
    pub batch_size: usize,
    pub image_size: usize,
    pub workers: usize,
}

impl BenchReport {
    pub fn new(
        pipeline: impl Into<String>,
        images_per_second: f64,
        baseline_pipeline: impl Into<String>,
        baseline_images_per_second: f64,
        runs: usize,
        batch_size: usize,
        image_size: usize,
    ) -> Self {
        Self {
            pipeline: pipeline.into(),
            images_per_second,
            baseline_pipeline: baseline_pipeline.into(),
            baseline_images_per_second,
            relative_change_percent: relative_change(baseline_images_per_second, images_per_second),
            runs,
            warmup_runs: WARMUP_RUNS,
            batch_size,
            image_size,
            workers: 1,
        }
    }
}

/// Input images per second through `make_views`, averaged over `runs` timed
/// passes after [`WARMUP_RUNS`] untimed ones. Run `r` uses a fresh key so
/// every pass draws new augmentation parameters.
pub fn measure_throughput(
    batch: &Tensor<f32>,
    policy: &AugPolicy,
    style: Option<&StyleContext>,
    runs: usize,
    seed: u64,
) -> Result<f64> {
    if runs == 0 {
        return Err(Error::Config("bench needs at least one timed run".into()));
    }
    let n = batch.shape().first().copied().unwrap_or(0);
    let root = RngStream::new(seed);
    for w in 0..WARMUP_RUNS {
        make_views(batch, policy, style, &root.derive("warmup", w as u64))?;
    }
    let start = Instant::now();
    for r in 0..runs {
        make_views(batch, policy, style, &root.derive("run", r as u64))?;
    }
    let secs = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    Ok((n * runs) as f64 / secs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_values() {
        assert!((relative_change(37.45, 29.48) - 21.28).abs() < 0.01);
        assert_eq!(relative_change(10.0, 10.0), 0.0);
        assert!(relative_change(10.0, 12.0) < 0.0);
    }

    #[test]
    fn report_fields() {
        let r = BenchReport::new("sassl", 29.48, "default", 37.45, 5, 8, 32);
        let json = serde_json::to_value(&r).unwrap();
        for key in [
            "pipeline",
            "images_per_second",
            "baseline_pipeline",
            "baseline_images_per_second",
            "relative_change_percent",
            "runs",
            "warmup_runs",
            "batch_size",
            "image_size",
            "workers",
        ] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert_eq!(r.relative_change_percent, relative_change(37.45, 29.48));
    }

    #[test]
    fn throughput_is_positive() {
        let batch = Tensor::from_fn([2, 3, 20, 20], |i| (i % 13) as f32 / 12.0);
        let policy = AugPolicy::default().without_sassl();
        assert!(measure_throughput(&batch, &policy, None, 2, 0).unwrap() > 0.0);
        assert!(measure_throughput(&batch, &policy, None, 0, 0).is_err());
    }
}
