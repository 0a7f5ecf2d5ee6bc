//! SimCLR-style pretraining: jittered views, pooled encoder plus projection
//! head, and the NT-Xent objective.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tsrl_autodiff::{Bindings, ParameterSet, Tape, Var};

use crate::augment::jitter;
use crate::data::{Dataset, TimeSeriesSample};
use crate::error::{Error, Result};
use crate::nn::{
    adam_step, encode_pooled, init_mlp_head, init_params, mlp_head, AdamConfig, EncoderConfig, OptimizerState,
};
use crate::seed::{derive_seed, rng, TAG_HEAD, TAG_INIT, TAG_JITTER, TAG_SHUFFLE};

/// Which embeddings act as anchors in the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// All 2N embeddings, each against the other 2N − 1.
    #[default]
    Symmetric,
    /// Only the N originals; the denominator still spans all 2N − 1 others.
    OriginalsOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub jitter_sigma: f64,
    pub use_projection_head: bool,
    pub projection_dim: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamConfig,
    pub anchors: AnchorMode,
    pub patch_len: usize,
    pub encoder: EncoderConfig,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            jitter_sigma: 1.0,
            use_projection_head: true,
            projection_dim: 32,
            batch_size: 128,
            epochs: 200,
            optimizer: AdamConfig::default(),
            anchors: AnchorMode::Symmetric,
            patch_len: 10,
            encoder: EncoderConfig::default(),
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.jitter_sigma >= 0.0) {
            return Err(Error::Config(format!("jitter sigma must be >= 0, got {}", self.jitter_sigma)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("contrastive batch_size must be at least 2".into()));
        }
        if self.use_projection_head && self.projection_dim == 0 {
            return Err(Error::Config("projection_dim must be positive".into()));
        }
        if self.patch_len == 0 {
            return Err(Error::Config("patch_len must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder parameters plus, if enabled, the projection head (`proj.*`).
pub fn init_contrastive_params(config: &ContrastiveConfig, seed: u64) -> Result<ParameterSet> {
    config.validate()?;
    let mut params = init_params(&config.encoder, derive_seed(seed, &[TAG_INIT]))?;
    if config.use_projection_head {
        let d = config.encoder.model_dim;
        params.extend(init_mlp_head(
            "proj",
            d,
            d,
            config.projection_dim,
            derive_seed(seed, &[TAG_HEAD]),
        )?)?;
    }
    Ok(params)
}

/// Originals and their jittered views, paired by index. View `i` uses the
/// noise stream `(seed, i)`.
pub fn make_views(
    batch: &[&TimeSeriesSample],
    sigma: f64,
    seed: u64,
) -> Result<(Vec<TimeSeriesSample>, Vec<TimeSeriesSample>)> {
    if batch.is_empty() {
        return Err(Error::Contract("make_views on an empty batch".into()));
    }
    let originals: Vec<TimeSeriesSample> = batch.iter().map(|s| (*s).clone()).collect();
    let views = batch
        .iter()
        .enumerate()
        .map(|(i, s)| jitter(s, sigma, derive_seed(seed, &[i as u64])))
        .collect::<Result<_>>()?;
    Ok((originals, views))
}

/// Pooled (and optionally projected) embeddings `[batch, out_dim]`.
pub fn encode_batch(
    tape: &mut Tape,
    b: &Bindings,
    samples: &[&TimeSeriesSample],
    config: &ContrastiveConfig,
) -> Result<Var> {
    let pooled = encode_pooled(tape, b, &config.encoder, samples, config.patch_len)?;
    if config.use_projection_head {
        mlp_head(tape, b, "proj", pooled)
    } else {
        Ok(pooled)
    }
}

/// Embedding of a single series (a batch of one).
pub fn encode_series(x: &TimeSeriesSample, params: &ParameterSet, config: &ContrastiveConfig) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let z = encode_batch(&mut tape, &b, &[x], config)?;
    Ok(tape.value(z).to_vec())
}

/// NT-Xent over `anchors` and `positives`, both `[N, dim]` and paired by row.
pub fn nt_xent_loss(tape: &mut Tape, anchors: Var, positives: Var, temperature: f64, mode: AnchorMode) -> Result<Var> {
    let shape = tape.shape(anchors).to_vec();
    if shape.len() != 2 || tape.shape(positives) != shape.as_slice() {
        return Err(Error::Contract(format!(
            "nt-xent needs two equal [N, dim] inputs, got {shape:?} and {:?}",
            tape.shape(positives)
        )));
    }
    let n = shape[0];
    if n < 2 {
        return Err(Error::Contract(format!("nt-xent needs N >= 2 pairs, got {n}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    let z = tape.concat(&[anchors, positives])?;
    let z = tape.l2_normalize(z)?;
    let zt = tape.transpose(z)?;
    let sim = tape.matmul(z, zt)?;
    let logits = tape.scale(sim, 1.0 / temperature)?;

    // Drop the diagonal: row i keeps columns j ≠ i, column j lands at j or j − 1.
    let m = 2 * n;
    let rows = match mode {
        AnchorMode::Symmetric => m,
        AnchorMode::OriginalsOnly => n,
    };
    let off_diag: Vec<usize> = (0..rows)
        .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| i * m + j))
        .collect();
    let logits = tape.take(logits, off_diag, &[rows, m - 1])?;
    let log_p = tape.log_softmax(logits, 1)?;
    let positive_cells: Vec<usize> = (0..rows)
        .map(|i| {
            let p = (i + n) % m;
            let col = if p < i { p } else { p - 1 };
            i * (m - 1) + col
        })
        .collect();
    let picked = tape.take(log_p, positive_cells, &[rows])?;
    let mean = tape.mean(picked, None)?;
    Ok(tape.scale(mean, -1.0)?)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Snapshot with the lowest epoch-mean loss (encoder and any heads).
    pub params: ParameterSet,
    /// Epoch-mean training loss, one entry per epoch.
    pub history: Vec<f64>,
    pub best_epoch: Option<usize>,
}

impl PretrainOutcome {
    /// Just the encoder (`encoder.*`), with heads and decoders dropped.
    pub fn encoder(&self) -> ParameterSet {
        self.params.filter_prefix("encoder.")
    }
}

/// Shuffled mini-batches of indices for one epoch.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, seed: u64, min_batch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(seed));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    // A trailing batch too small to train on is folded into its predecessor.
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < min_batch) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("len > 1").extend(tail);
    }
    batches
}

/// Runs one optimisation step and returns the batch loss.
pub(crate) fn train_step<F>(params: &mut ParameterSet, optimizer: &mut OptimizerState, forward: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, &Bindings) -> Result<Var>,
{
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let loss = forward(&mut tape, &b)?;
    let value = tape.item(loss)?;
    if !value.is_finite() {
        return Err(tsrl_autodiff::TensorError::Numeric(format!("loss is {value}")).into());
    }
    tape.backward(loss)?;
    params.accumulate_grads(&tape, &b)?;
    adam_step(params, optimizer)?;
    Ok(value)
}

pub fn pretrain_contrastive(data: &Dataset, config: &ContrastiveConfig, seed: u64) -> Result<PretrainOutcome> {
    let params = init_contrastive_params(config, seed)?;
    pretrain_contrastive_from(data, config, seed, params)
}

/// Contrastive pretraining starting from given parameters.
pub fn pretrain_contrastive_from(
    data: &Dataset,
    config: &ContrastiveConfig,
    seed: u64,
    mut params: ParameterSet,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if data.len() < 2 {
        return Err(Error::Data("contrastive pretraining needs at least two samples".into()));
    }
    let mut optimizer = OptimizerState::new(config.optimizer);
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = None;
    let mut history = Vec::with_capacity(config.epochs);
    let samples = data.samples();
    for epoch in 0..config.epochs {
        let batches = epoch_batches(
            samples.len(),
            config.batch_size,
            derive_seed(seed, &[TAG_SHUFFLE, epoch as u64]),
            2,
        );
        let mut total = 0.0;
        for (bi, idx) in batches.iter().enumerate() {
            let batch: Vec<&TimeSeriesSample> = idx.iter().map(|&i| &samples[i]).collect();
            let view_seed = derive_seed(seed, &[TAG_JITTER, epoch as u64, bi as u64]);
            let loss = make_views(&batch, config.jitter_sigma, view_seed)
                .and_then(|(originals, views)| {
                    let originals: Vec<&TimeSeriesSample> = originals.iter().collect();
                    let views: Vec<&TimeSeriesSample> = views.iter().collect();
                    train_step(&mut params, &mut optimizer, |tape, b| {
                        let za = encode_batch(tape, b, &originals, config)?;
                        let zp = encode_batch(tape, b, &views, config)?;
                        nt_xent_loss(tape, za, zp, config.temperature, config.anchors)
                    })
                })
                .map_err(|e| Error::Training {
                    epoch,
                    batch: bi,
                    message: e.to_string(),
                })?;
            total += loss * idx.len() as f64;
        }
        let epoch_loss = total / samples.len() as f64;
        history.push(epoch_loss);
        if epoch_loss < best_loss {
            best_loss = epoch_loss;
            best = params.clone();
            best_epoch = Some(epoch);
        }
    }
    Ok(PretrainOutcome {
        params: best,
        history,
        best_epoch,
    })
}
