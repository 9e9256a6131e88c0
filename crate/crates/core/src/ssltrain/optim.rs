use std::f64::consts::PI;

use numcore::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `1 − (1 − m0)·(cos(π·step/total) + 1)/2`: rises from `m0` to 1.
pub fn momentum_schedule(step: usize, total_steps: usize, m0: f64) -> f64 {
    if total_steps == 0 {
        return 1.0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    1.0 - (1.0 - m0) * ((PI * t).cos() + 1.0) / 2.0
}

/// Linear warmup to `peak`, then cosine decay to zero at `total_steps`.
pub fn cosine_lr(step: usize, warmup_steps: usize, total_steps: usize, peak: f64) -> f64 {
    if step < warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return peak;
    }
    let t = (step.min(total_steps) - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    peak * ((PI * t).cos() + 1.0) / 2.0
}

/// `target ← m·target + (1 − m)·online` for every target parameter; the
/// online store may hold extra trailing parameters.
pub fn ema_update(target: &mut ParamStore<f32>, online: &ParamStore<f32>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!("EMA rate {m} outside [0, 1]")));
    }
    if target.len() > online.len() {
        return Err(Error::invalid("target has more parameters than the online network"));
    }
    for (id, (name, p)) in online.ids().zip(online.iter()).take(target.len()) {
        let t = target.get_mut(id);
        if t.value.shape() != p.value.shape() {
            return Err(Error::invalid(format!("EMA shape mismatch on {name}")));
        }
        if m == 1.0 {
            continue;
        }
        if m == 0.0 {
            t.value = p.value.clone();
            continue;
        }
        let (a, b) = (m as f32, (1.0 - m) as f32);
        t.value
            .data_mut()
            .iter_mut()
            .zip(p.value.data())
            .for_each(|(t, &o)| *t = a * *t + b * o);
    }
    Ok(())
}

/// LARS hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LarsConfig {
    pub weight_decay: f64,
    pub trust_coefficient: f64,
    pub momentum: f64,
    /// Layer-wise rate adaptation; when off every local rate is 1.
    pub adapt: bool,
}

impl Default for LarsConfig {
    fn default() -> Self {
        Self {
            weight_decay: 1.5e-6,
            trust_coefficient: 0.001,
            momentum: 0.9,
            adapt: true,
        }
    }
}

/// Layer-wise adaptive rate scaling with heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Lars {
    pub config: LarsConfig,
    velocity: Vec<Tensor<f32>>,
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

impl Lars {
    pub fn new(config: LarsConfig) -> Self {
        Self {
            config,
            velocity: Vec::new(),
        }
    }

    /// Local rate of one parameter given its value and decayed gradient.
    pub fn local_rate(&self, w: &[f32], g: &[f32], exempt: bool) -> f64 {
        if exempt || !self.config.adapt {
            return 1.0;
        }
        let (nw, ng) = (norm(w), norm(g));
        if nw > 0.0 && ng > 0.0 {
            self.config.trust_coefficient * nw / ng
        } else {
            1.0
        }
    }

    /// One update of every trainable parameter from its stored gradient.
    pub fn step(&mut self, params: &mut ParamStore<f32>, lr: f64) {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
        }
        for (i, (_, p)) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let wd = if p.exempt { 0.0 } else { self.config.weight_decay as f32 };
            let g: Vec<f32> = p
                .grad
                .data()
                .iter()
                .zip(p.value.data())
                .map(|(&g, &w)| g + wd * w)
                .collect();
            let rate = self.local_rate(p.value.data(), &g, p.exempt) as f32;
            let mu = self.config.momentum as f32;
            let lr = lr as f32;
            let v = self.velocity[i].data_mut();
            for ((w, v), g) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                *v = mu * *v + rate * g;
                *w -= lr * *v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(w: &[f32], g: &[f32], exempt: bool) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new([w.len()], w.to_vec()).unwrap(), exempt);
        s.get_mut(id).grad = Tensor::new([g.len()], g.to_vec()).unwrap();
        s
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(momentum_schedule(0, 100, 0.996), 0.996);
        assert_eq!(momentum_schedule(100, 100, 0.996), 1.0);
        assert!((momentum_schedule(50, 100, 0.996) - 0.998).abs() < 1e-9);
        assert_eq!(cosine_lr(0, 10, 100, 0.5), 0.0);
        assert_eq!(cosine_lr(10, 10, 100, 0.5), 0.5);
        assert!(cosine_lr(100, 10, 100, 0.5).abs() < 1e-9);
    }

    #[test]
    fn ema_examples() {
        let mut t = store(&[2.0], &[0.0], false);
        let o = store(&[0.0], &[0.0], false);
        ema_update(&mut t, &o, 1.0).unwrap();
        assert_eq!(t.get(t.find("w").unwrap()).value.data(), &[2.0]);
        ema_update(&mut t, &o, 0.5).unwrap();
        assert_eq!(t.get(t.find("w").unwrap()).value.data(), &[1.0]);
        ema_update(&mut t, &o, 0.0).unwrap();
        assert_eq!(t.get(t.find("w").unwrap()).value.data(), &[0.0]);
    }

    #[test]
    fn scalar_lars_step() {
        let mut s = store(&[1.0], &[1.0], false);
        let mut opt = Lars::new(LarsConfig {
            weight_decay: 0.0,
            momentum: 0.0,
            ..Default::default()
        });
        opt.step(&mut s, 1.0);
        let w = s.get(s.find("w").unwrap()).value.data()[0];
        assert!((w - 0.999).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_and_zero_weight_fallbacks() {
        let mut s = store(&[0.5, -0.5], &[0.0, 0.0], false);
        let mut opt = Lars::new(LarsConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut s, 1.0);
        assert_eq!(s.get(s.find("w").unwrap()).value.data(), &[0.5, -0.5]);
        assert_eq!(opt.local_rate(&[0.0], &[2.0], false), 1.0);
        assert_eq!(opt.local_rate(&[3.0], &[2.0], true), 1.0);
    }

    #[test]
    fn exempt_skips_decay() {
        let mut s = store(&[2.0], &[0.0], true);
        let mut opt = Lars::new(LarsConfig {
            weight_decay: 0.1,
            ..Default::default()
        });
        opt.step(&mut s, 1.0);
        assert_eq!(s.get(s.find("w").unwrap()).value.data(), &[2.0]);
    }
}
