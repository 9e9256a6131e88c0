use numcore::{Graph, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{info_nce_graph, nt_xent_graph};
use super::model::{ModelConfig, SslModel};
use super::optim::{cosine_lr, ema_update, momentum_schedule, Lars, LarsConfig};
use crate::augpipe::{make_views, AugPolicy, StyleContext};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Optimization settings of contrastive pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub temperature: f64,
    /// Peak learning rate reached after warmup.
    pub learning_rate: f64,
    /// Fraction of the total steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub epochs: usize,
    /// Caps the total number of steps when set.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub trust_coefficient: f64,
    pub lars_momentum: f64,
    pub momentum_start: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            learning_rate: 0.5,
            warmup_fraction: 0.05,
            epochs: 25,
            max_steps: None,
            batch_size: 128,
            weight_decay: 1.5e-6,
            trust_coefficient: 0.001,
            lars_momentum: 0.9,
            momentum_start: 0.996,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum_start) {
            return Err(Error::Config("momentum_start must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0 && self.trust_coefficient > 0.0) {
            return Err(Error::Config("learning_rate, weight_decay and trust_coefficient must be non-negative".into()));
        }
        Ok(())
    }

    pub fn lars(&self) -> LarsConfig {
        LarsConfig {
            weight_decay: self.weight_decay,
            trust_coefficient: self.trust_coefficient,
            momentum: self.lars_momentum,
            adapt: true,
        }
    }

    /// Full batches per epoch over `n` images (a partial last batch is dropped).
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        (n / self.batch_size.min(n.max(1))).max(1)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        let all = self.epochs * self.steps_per_epoch(n);
        self.max_steps.map_or(all, |m| m.min(all))
    }

    pub fn warmup_steps(&self, n: usize) -> usize {
        (self.warmup_fraction * self.total_steps(n) as f64).round() as usize
    }
}

/// Metrics of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub momentum: f64,
}

/// Model, optimizer state and schedule lengths.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: SslModel,
    pub optimizer: Lars,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl TrainState {
    pub fn new(model: SslModel, config: &TrainConfig, total_steps: usize, warmup_steps: usize) -> Self {
        Self {
            model,
            optimizer: Lars::new(config.lars()),
            total_steps,
            warmup_steps,
        }
    }
}

fn interleave(left: &Tensor<f32>, right: &Tensor<f32>) -> Result<Tensor<f32>> {
    let b = left.shape()[0];
    let mut rows = Vec::with_capacity(2 * b);
    for i in 0..b {
        rows.push(left.index_outer(i)?);
        rows.push(right.index_outer(i)?);
    }
    Ok(Tensor::stack(&rows)?)
}

/// Views → loss → gradients → LARS update → EMA update of the momentum tower.
pub fn train_step(
    state: &mut TrainState,
    batch: &Tensor<f32>,
    policy: &AugPolicy,
    style: Option<&StyleContext>,
    config: &TrainConfig,
    stream: &RngStream,
    step: usize,
) -> Result<StepRecord> {
    let (left, right) = make_views(batch, policy, style, &stream.derive("step", step as u64))?;
    let lr = cosine_lr(step, state.warmup_steps, state.total_steps, config.learning_rate);
    let momentum = momentum_schedule(step, state.total_steps, config.momentum_start);
    let model = &mut state.model;

    let mut g = Graph::new();
    let p = model.online.bind(&mut g, true);
    let loss = if model.has_momentum() {
        let keys = model.target_keys(&right)?;
        let x = g.constant(left);
        let q = model.query_graph(&mut g, &p, x)?;
        let k = g.constant(keys);
        info_nce_graph(&mut g, q, k, config.temperature)?
    } else {
        let x = g.constant(interleave(&left, &right)?);
        let z = model.project_graph(&mut g, &p, x)?;
        nt_xent_graph(&mut g, z, config.temperature)?
    };
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            loss: value,
            lr,
            momentum,
        });
    }
    let grads = g.backward(loss)?;
    model.online.store_grads(&p, &grads);
    state.optimizer.step(&mut model.online, lr);
    if let Some(target) = model.target.as_mut() {
        ema_update(target, &model.online, momentum)?;
    }
    Ok(StepRecord {
        step,
        loss: value,
        lr,
        momentum,
    })
}

/// Result of [`pretrain`].
#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub model: SslModel,
    pub history: Vec<StepRecord>,
}

/// Epoch loop over freshly shuffled full batches of `images`.
pub fn pretrain_with(
    images: &Tensor<f32>,
    model_config: &ModelConfig,
    config: &TrainConfig,
    policy: &AugPolicy,
    style: Option<&StyleContext>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<PretrainOutput> {
    config.validate()?;
    let n = match images.shape() {
        [n, 3, _, _] if *n > 0 => *n,
        s => return Err(Error::invalid(format!("expected a non-empty [N,3,H,W] dataset, got {s:?}"))),
    };
    let root = RngStream::new(config.seed);
    let model = SslModel::new(model_config, config.seed)?;
    let total = config.total_steps(n);
    let mut state = TrainState::new(model, config, total, config.warmup_steps(n));
    let batch = config.batch_size.min(n);
    let per = images.numel() / n;
    let mut history = Vec::with_capacity(total);
    let mut epoch = 0u64;
    while history.len() < total {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut root.derive("epoch", epoch).substream(0, None, "shuffle"));
        for chunk in order.chunks_exact(batch) {
            if history.len() == total {
                break;
            }
            let mut data = Vec::with_capacity(batch * per);
            for &i in chunk {
                data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
            }
            let mut shape = images.shape().to_vec();
            shape[0] = batch;
            let x = Tensor::new(shape, data)?;
            let rec = train_step(&mut state, &x, policy, style, config, &root, history.len())?;
            on_step(&rec);
            history.push(rec);
        }
        epoch += 1;
    }
    Ok(PretrainOutput {
        model: state.model,
        history,
    })
}

pub fn pretrain(
    images: &Tensor<f32>,
    model_config: &ModelConfig,
    config: &TrainConfig,
    policy: &AugPolicy,
    style: Option<&StyleContext>,
) -> Result<PretrainOutput> {
    pretrain_with(images, model_config, config, policy, style, |_| {})
}

/// Trailing moving average over `window` steps (shorter at the start).
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    (0..losses.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window.max(1));
            losses[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}
