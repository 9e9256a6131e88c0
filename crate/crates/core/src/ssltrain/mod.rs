//! Contrastive pretraining: NT-Xent / InfoNCE losses, an encoder–projector
//! model with a momentum target tower, LARS with warmup-cosine learning
//! rates, and the momentum schedule of the target tower.

mod loss;
mod model;
mod optim;
mod train;

pub use loss::{cosine_similarity, info_nce_graph, nt_xent, nt_xent_graph, nt_xent_momentum, NORM_GUARD};
pub use model::{ModelConfig, SslModel};
pub use optim::{cosine_lr, ema_update, momentum_schedule, Lars, LarsConfig};
pub use train::{
    pretrain, pretrain_with, smoothed, train_step, PretrainOutput, StepRecord, TrainConfig, TrainState,
};
