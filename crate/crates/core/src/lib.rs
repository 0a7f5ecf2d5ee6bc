//! Self-supervised representation learning for multichannel time series:
//! contrastive (SimCLR-style) and generative (masked-autoencoder) pretraining
//! of a small transformer encoder, label-scarce fine-tuning, and the
//! evaluation grid that compares them.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod generative;
pub mod nn;
pub mod seed;
pub mod selftest;

pub use error::{Error, Result};
