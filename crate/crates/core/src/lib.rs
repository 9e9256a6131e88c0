//! Style transfer as a data augmentation for contrastive self-supervised
//! learning: a style-transfer block, the augmentation pipeline around it,
//! style banks, SimCLR/BYOL-style pretraining, evaluation and a CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augpipe;
pub mod cli;
pub mod error;
pub mod eval;
pub mod nets;
pub mod nst;
pub mod rng;
pub mod ssltrain;
pub mod stylebank;

pub use error::{Error, Result};
