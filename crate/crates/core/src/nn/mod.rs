//! Transformer building blocks shared by both pretraining methods and the
//! fine-tuning classifier.

mod adam;
mod checkpoint;
mod layers;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use layers::{
    attention_forward, attention_forward_with_weights, encoder_forward, linear, mean_pool, mlp_head,
    transformer_block,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tsrl_autodiff::{Bindings, ParameterSet, Tape, Tensor, Var};

use crate::augment::patch_tokens;
use crate::data::TimeSeriesSample;
use crate::error::{Error, Result};
use crate::seed::rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub n_blocks: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub mlp_dim: usize,
    /// Width of one input token (`channels · patch_len`).
    pub input_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_blocks: 2,
            model_dim: 64,
            n_heads: 4,
            mlp_dim: 128,
            input_dim: 30,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if self.n_heads == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if !self.model_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("model_dim {} must be even", self.model_dim)));
        }
        if self.mlp_dim == 0 || self.input_dim == 0 {
            return Err(Error::Config("mlp_dim and input_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder parameters under the `encoder.` prefix: token embedding followed
/// by `n_blocks` transformer blocks. Pure function of `(config, seed)`.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<ParameterSet> {
    config.validate()?;
    let mut r = rng(seed);
    let mut params = ParameterSet::new();
    init_linear(&mut params, "encoder.embed", config.input_dim, config.model_dim, &mut r)?;
    for i in 0..config.n_blocks {
        init_block(&mut params, &format!("encoder.block{i}"), config, &mut r)?;
    }
    Ok(params)
}

/// Glorot-uniform weight `{prefix}.w` of shape `[fan_in, fan_out]` and zero
/// bias `{prefix}.b`.
pub fn init_linear(
    params: &mut ParameterSet,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    r: &mut ChaCha8Rng,
) -> Result<()> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w: Vec<f64> = (0..fan_in * fan_out).map(|_| r.random_range(-limit..limit)).collect();
    params.insert(format!("{prefix}.w"), Tensor::new(vec![fan_in, fan_out], w)?.with_grad())?;
    params.insert(format!("{prefix}.b"), Tensor::zeros(vec![fan_out]).with_grad())?;
    Ok(())
}

fn init_layer_norm(params: &mut ParameterSet, prefix: &str, dim: usize) -> Result<()> {
    params.insert(format!("{prefix}.gain"), Tensor::filled(vec![dim], 1.0).with_grad())?;
    params.insert(format!("{prefix}.bias"), Tensor::zeros(vec![dim]).with_grad())?;
    Ok(())
}

/// One pre-norm transformer block under `prefix`.
pub fn init_block(params: &mut ParameterSet, prefix: &str, config: &EncoderConfig, r: &mut ChaCha8Rng) -> Result<()> {
    let d = config.model_dim;
    init_layer_norm(params, &format!("{prefix}.ln1"), d)?;
    for proj in ["q", "k", "v", "o"] {
        init_linear(params, &format!("{prefix}.attn.{proj}"), d, d, r)?;
    }
    init_layer_norm(params, &format!("{prefix}.ln2"), d)?;
    init_linear(params, &format!("{prefix}.mlp.fc1"), d, config.mlp_dim, r)?;
    init_linear(params, &format!("{prefix}.mlp.fc2"), config.mlp_dim, d, r)?;
    Ok(())
}

/// Two-layer MLP head (`{prefix}.fc1`, `{prefix}.fc2`).
pub fn init_mlp_head(prefix: &str, input: usize, hidden: usize, output: usize, seed: u64) -> Result<ParameterSet> {
    let mut r = rng(seed);
    let mut params = ParameterSet::new();
    init_linear(&mut params, &format!("{prefix}.fc1"), input, hidden, &mut r)?;
    init_linear(&mut params, &format!("{prefix}.fc2"), hidden, output, &mut r)?;
    Ok(params)
}

/// Zeroes the output projections of every residual branch (attention and
/// MLP), which turns each block into the identity map.
pub fn zero_residual_projections(params: &mut ParameterSet) {
    for (name, t) in params.iter_mut() {
        let residual_out = name.contains(".attn.o.") || name.contains(".mlp.fc2.");
        if residual_out && name.contains(".block") {
            t.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Fixed sinusoidal positional encoding, `[n_positions, model_dim]`.
pub fn positional_encoding(n_positions: usize, model_dim: usize) -> Result<Tensor> {
    let positions: Vec<usize> = (0..n_positions).collect();
    Ok(Tensor::new(vec![n_positions, model_dim], positional_rows(&positions, model_dim)?)?)
}

/// Positional-encoding rows for arbitrary positions, concatenated.
pub fn positional_rows(positions: &[usize], model_dim: usize) -> Result<Vec<f64>> {
    if !model_dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "positional encoding needs an even model_dim, got {model_dim}"
        )));
    }
    let mut out = Vec::with_capacity(positions.len() * model_dim);
    for &p in positions {
        for i in 0..model_dim / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / model_dim as f64);
            out.push(angle.sin());
            out.push(angle.cos());
        }
    }
    Ok(out)
}

/// Patch tokens `[batch, n_patches, channels · patch_len]` and their
/// positional encodings `[batch, n_patches, model_dim]`, both as constants.
pub fn series_tokens(
    tape: &mut Tape,
    samples: &[&TimeSeriesSample],
    patch_len: usize,
    config: &EncoderConfig,
) -> Result<(Var, Var)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("cannot encode an empty batch".into()))?;
    let (channels, length) = first.shape();
    if let Some(bad) = samples.iter().find(|s| s.shape() != (channels, length)) {
        return Err(Error::Contract(format!(
            "mixed sample shapes {:?} and {:?} in one batch",
            (channels, length),
            bad.shape()
        )));
    }
    let token_dim = channels * patch_len;
    if token_dim != config.input_dim {
        return Err(Error::Config(format!(
            "token width {token_dim} does not match encoder input_dim {}",
            config.input_dim
        )));
    }
    let values = patch_tokens(samples, patch_len)?;
    let n_patches = length / patch_len;
    let batch = samples.len();
    let tokens = tape.constant(vec![batch, n_patches, token_dim], values)?;
    let pe = positional_rows(&(0..n_patches).collect::<Vec<_>>(), config.model_dim)?;
    let positional = tape.constant(vec![batch, n_patches, config.model_dim], pe.repeat(batch))?;
    Ok((tokens, positional))
}

/// Mean-pooled encoder representation `[batch, model_dim]` of whole series.
pub fn encode_pooled(
    tape: &mut Tape,
    b: &Bindings,
    config: &EncoderConfig,
    samples: &[&TimeSeriesSample],
    patch_len: usize,
) -> Result<Var> {
    let (tokens, positional) = series_tokens(tape, samples, patch_len, config)?;
    let h = encoder_forward(tape, b, config, tokens, positional)?;
    mean_pool(tape, h)
}
