//! Forward passes. Activations are laid out `[batch, seq, width]`.

use tsrl_autodiff::{Bindings, Tape, Var};

use super::{EncoderConfig, LAYER_NORM_EPS};
use crate::error::{Error, Result};

/// `x · W + b` over the last axis of `x` (any rank ≥ 2).
pub fn linear(tape: &mut Tape, b: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let w = b.get(&format!("{prefix}.w"))?;
    let bias = b.get(&format!("{prefix}.b"))?;
    let shape = tape.shape(x).to_vec();
    let in_dim = *shape.last().ok_or_else(|| Error::Contract("linear on rank-0 input".into()))?;
    let rows = tape.value(x).len() / in_dim.max(1);
    let flat = tape.reshape(x, &[rows, in_dim])?;
    let y = tape.matmul(flat, w)?;
    let y = tape.add_bias(y, bias)?;
    let out_dim = tape.shape(w)[1];
    let mut out_shape = shape;
    *out_shape.last_mut().expect("rank checked") = out_dim;
    Ok(tape.reshape(y, &out_shape)?)
}

fn layer_norm(tape: &mut Tape, b: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let gain = b.get(&format!("{prefix}.gain"))?;
    let bias = b.get(&format!("{prefix}.bias"))?;
    Ok(tape.layer_norm(x, gain, bias, LAYER_NORM_EPS)?)
}

fn split_heads(tape: &mut Tape, x: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
    let dim = tape.shape(x)[2];
    let x = tape.reshape(x, &[batch, len, heads, dim / heads])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    Ok(tape.reshape(x, &[batch * heads, len, dim / heads])?)
}

/// Multi-head scaled dot-product self-attention with output projection.
pub fn attention_forward(tape: &mut Tape, b: &Bindings, prefix: &str, x: Var, n_heads: usize) -> Result<Var> {
    attention_forward_with_weights(tape, b, prefix, x, n_heads).map(|(out, _)| out)
}

/// Like [`attention_forward`], also returning the attention weights as
/// `[batch · heads, seq, seq]`.
pub fn attention_forward_with_weights(
    tape: &mut Tape,
    b: &Bindings,
    prefix: &str,
    x: Var,
    n_heads: usize,
) -> Result<(Var, Var)> {
    let shape = tape.shape(x).to_vec();
    let [batch, len, dim] = shape[..] else {
        return Err(Error::Contract(format!("attention expects [batch, seq, dim], got {shape:?}")));
    };
    if n_heads == 0 || dim % n_heads != 0 {
        return Err(Error::Config(format!("model_dim {dim} not divisible by {n_heads} heads")));
    }
    let q = linear(tape, b, &format!("{prefix}.q"), x)?;
    let k = linear(tape, b, &format!("{prefix}.k"), x)?;
    let v = linear(tape, b, &format!("{prefix}.v"), x)?;
    let q = split_heads(tape, q, batch, len, n_heads)?;
    let k = split_heads(tape, k, batch, len, n_heads)?;
    let v = split_heads(tape, v, batch, len, n_heads)?;
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / ((dim / n_heads) as f64).sqrt())?;
    let weights = tape.softmax(scores, 2)?;
    let ctx = tape.batch_matmul(weights, v, false)?;
    let ctx = tape.reshape(ctx, &[batch, n_heads, len, dim / n_heads])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[batch, len, dim])?;
    let out = linear(tape, b, &format!("{prefix}.o"), ctx)?;
    Ok((out, weights))
}

/// Pre-norm residual block: `x + Attn(LN(x))`, then `+ MLP(LN(·))`.
pub fn transformer_block(tape: &mut Tape, b: &Bindings, prefix: &str, x: Var, n_heads: usize) -> Result<Var> {
    let h = layer_norm(tape, b, &format!("{prefix}.ln1"), x)?;
    let a = attention_forward(tape, b, &format!("{prefix}.attn"), h, n_heads)?;
    let x = tape.add(x, a)?;
    let h = layer_norm(tape, b, &format!("{prefix}.ln2"), x)?;
    let h = linear(tape, b, &format!("{prefix}.mlp.fc1"), h)?;
    let h = tape.gelu(h)?;
    let h = linear(tape, b, &format!("{prefix}.mlp.fc2"), h)?;
    Ok(tape.add(x, h)?)
}

/// Token embedding plus positional encoding, then the encoder blocks.
///
/// `tokens` is `[batch, seq, input_dim]`; `positional` holds one encoding
/// row per token (`[batch, seq, model_dim]`, constant).
pub fn encoder_forward(
    tape: &mut Tape,
    b: &Bindings,
    config: &EncoderConfig,
    tokens: Var,
    positional: Var,
) -> Result<Var> {
    let x = linear(tape, b, "encoder.embed", tokens)?;
    let mut x = tape.add(x, positional)?;
    for i in 0..config.n_blocks {
        x = transformer_block(tape, b, &format!("encoder.block{i}"), x, config.n_heads)?;
    }
    Ok(x)
}

/// Mean over the sequence axis: `[batch, seq, dim] → [batch, dim]`.
pub fn mean_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    Ok(tape.mean(x, Some(1))?)
}

/// Linear → GELU → Linear.
pub fn mlp_head(tape: &mut Tape, b: &Bindings, prefix: &str, h: Var) -> Result<Var> {
    let h = linear(tape, b, &format!("{prefix}.fc1"), h)?;
    let h = tape.gelu(h)?;
    linear(tape, b, &format!("{prefix}.fc2"), h)
}
