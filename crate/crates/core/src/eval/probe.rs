use std::f64::consts::PI;

use numcore::{Real, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Softmax-regression training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1.0,
        }
    }
}

/// Affine classifier on standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weight: Vec<f64>,
    bias: Vec<f64>,
    classes: usize,
}

fn rows<T: Real>(features: &Tensor<T>) -> Result<(usize, usize)> {
    match *features.shape() {
        [n, d] if n > 0 && d > 0 => Ok((n, d)),
        ref s => Err(Error::invalid(format!("features must be a non-empty [N,R] matrix, got {s:?}"))),
    }
}

impl LinearProbe {
    /// Full-batch gradient descent on the cross-entropy with a cosine-decayed rate.
    pub fn fit<T: Real>(features: &Tensor<T>, labels: &[usize], classes: usize, config: &ProbeConfig) -> Result<Self> {
        let (n, d) = rows(features)?;
        if labels.len() != n {
            return Err(Error::invalid(format!("{} labels for {n} feature rows", labels.len())));
        }
        if classes == 0 || labels.iter().any(|&l| l >= classes) {
            return Err(Error::invalid("labels outside the class range"));
        }
        let x: Vec<f64> = features.data().iter().map(|v| v.as_f64()).collect();
        let mut mean = vec![0.0; d];
        for r in x.chunks(d) {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n as f64);
        }
        let mut var = vec![0.0; d];
        for r in x.chunks(d) {
            var.iter_mut().zip(r).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2) / n as f64);
        }
        let scale: Vec<f64> = var.iter().map(|v| 1.0 / (v.sqrt() + 1e-8)).collect();
        let xs: Vec<f64> = x
            .chunks(d)
            .flat_map(|r| r.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) * s).collect::<Vec<_>>())
            .collect();

        let k = classes;
        let mut probe = Self {
            mean,
            scale,
            weight: vec![0.0; d * k],
            bias: vec![0.0; k],
            classes,
        };
        let mut logits = vec![0.0; k];
        for epoch in 0..config.epochs {
            let lr = config.learning_rate * ((PI * epoch as f64 / config.epochs as f64).cos() + 1.0) / 2.0;
            let mut gw = vec![0.0; d * k];
            let mut gb = vec![0.0; k];
            for (r, &y) in xs.chunks(d).zip(labels) {
                probe.logits_standardized(r, &mut logits);
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for c in 0..k {
                    let p = (logits[c] - m).exp() / z - if c == y { 1.0 } else { 0.0 };
                    gb[c] += p / n as f64;
                    for (j, &v) in r.iter().enumerate() {
                        gw[j * k + c] += p * v / n as f64;
                    }
                }
            }
            probe.weight.iter_mut().zip(&gw).for_each(|(w, g)| *w -= lr * g);
            probe.bias.iter_mut().zip(&gb).for_each(|(b, g)| *b -= lr * g);
        }
        Ok(probe)
    }

    fn logits_standardized(&self, r: &[f64], out: &mut [f64]) {
        let k = self.classes;
        out.copy_from_slice(&self.bias);
        for (j, &v) in r.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&self.weight[j * k..(j + 1) * k]) {
                *o += v * w;
            }
        }
    }

    pub fn predict<T: Real>(&self, features: &Tensor<T>) -> Result<Vec<usize>> {
        let (_, d) = rows(features)?;
        if d != self.mean.len() {
            return Err(Error::invalid(format!("probe expects width {}, got {d}", self.mean.len())));
        }
        let mut logits = vec![0.0; self.classes];
        Ok(features
            .data()
            .chunks(d)
            .map(|r| {
                let s: Vec<f64> = r
                    .iter()
                    .zip(&self.mean)
                    .zip(&self.scale)
                    .map(|((v, m), sc)| (v.as_f64() - m) * sc)
                    .collect();
                self.logits_standardized(&s, &mut logits);
                // first maximum wins on ties
                (0..self.classes).fold(0, |best, c| if logits[c] > logits[best] { c } else { best })
            })
            .collect())
    }

    pub fn accuracy<T: Real>(&self, features: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(features)?;
        if pred.len() != labels.len() {
            return Err(Error::invalid("label count does not match features"));
        }
        Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
    }
}

/// Top-1 test accuracy of a probe trained on the training features.
pub fn linear_probe<T: Real>(
    train: &Tensor<T>,
    train_labels: &[usize],
    test: &Tensor<T>,
    test_labels: &[usize],
    classes: usize,
    config: &ProbeConfig,
) -> Result<f64> {
    LinearProbe::fit(train, train_labels, classes, config)?.accuracy(test, test_labels)
}

/// Outcome of a few-shot evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotResult {
    pub mean_accuracy: f64,
    pub trial_accuracies: Vec<f64>,
    /// Support indices of every trial.
    pub supports: Vec<Vec<usize>>,
}

fn gather<T: Real>(features: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let (_, d) = rows(features)?;
    let data = idx.iter().flat_map(|&i| features.data()[i * d..(i + 1) * d].iter().copied()).collect();
    Ok(Tensor::new([idx.len(), d], data)?)
}

/// Per trial: `k` random examples of every class form the support set, all
/// remaining examples are the query set.
pub fn few_shot_eval<T: Real>(
    features: &Tensor<T>,
    labels: &[usize],
    k: usize,
    trials: usize,
    config: &ProbeConfig,
    stream: &RngStream,
) -> Result<FewShotResult> {
    let (n, _) = rows(features)?;
    if labels.len() != n {
        return Err(Error::invalid("label count does not match features"));
    }
    if k == 0 || trials == 0 {
        return Err(Error::invalid("few-shot evaluation needs k >= 1 and at least one trial"));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); classes];
    labels.iter().enumerate().for_each(|(i, &l)| by_class[l].push(i));
    if let Some((c, members)) = by_class.iter().enumerate().find(|(_, m)| !m.is_empty() && m.len() <= k) {
        return Err(Error::invalid(format!(
            "class {c} has {} examples, too few for {k}-shot support plus a query",
            members.len()
        )));
    }
    let mut accs = Vec::with_capacity(trials);
    let mut supports = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = stream.derive("fewshot", t as u64).substream(0, None, "support");
        let mut support = Vec::new();
        for members in &by_class {
            let mut m = members.clone();
            m.shuffle(&mut rng);
            support.extend_from_slice(&m[..k.min(m.len())]);
        }
        support.sort_unstable();
        let query: Vec<usize> = (0..n).filter(|i| support.binary_search(i).is_err()).collect();
        let sl: Vec<usize> = support.iter().map(|&i| labels[i]).collect();
        let ql: Vec<usize> = query.iter().map(|&i| labels[i]).collect();
        let probe = LinearProbe::fit(&gather(features, &support)?, &sl, classes, config)?;
        accs.push(probe.accuracy(&gather(features, &query)?, &ql)?);
        supports.push(support);
    }
    Ok(FewShotResult {
        mean_accuracy: accs.iter().sum::<f64>() / trials as f64,
        trial_accuracies: accs,
        supports,
    })
}
