//! Evaluation of frozen representations and the synthetic dataset.

mod invariance;
mod probe;
mod synth;

pub use invariance::{encode_dataset, resize_batch, texture_invariance_score, Representation};
pub use probe::{few_shot_eval, linear_probe, FewShotResult, LinearProbe, ProbeConfig};
pub use synth::{gen_style_images, gen_synth, hsv_to_rgb, LabeledDataset, Shape, SynthData, SynthSpec, SHAPES};
