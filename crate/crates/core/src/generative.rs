//! Masked-autoencoder pretraining over patch tokens.

use serde::{Deserialize, Serialize};
use tsrl_autodiff::{Bindings, ParameterSet, Tape, Tensor, Var};

use crate::augment::{masked_count, patchify, sample_mask, scatter_reconstruction, MaskPlan, PatchGrid};
use crate::contrastive::{epoch_batches, train_step, PretrainOutcome};
use crate::data::{Dataset, TimeSeriesSample};
use crate::error::{Error, Result};
use crate::nn::{
    init_block, init_linear, init_params, linear, positional_rows, transformer_block, AdamConfig, EncoderConfig,
    OptimizerState,
};
use crate::seed::{derive_seed, rng, TAG_HEAD, TAG_INIT, TAG_MASK, TAG_SHUFFLE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    #[default]
    MaskedOnly,
    AllPatches,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaeConfig {
    pub patch_len: usize,
    pub mask_ratio: f64,
    pub encoder: EncoderConfig,
    pub decoder_blocks: usize,
    pub loss_scope: LossScope,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamConfig,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            patch_len: 10,
            mask_ratio: 0.75,
            encoder: EncoderConfig::default(),
            decoder_blocks: 1,
            loss_scope: LossScope::MaskedOnly,
            batch_size: 128,
            epochs: 200,
            optimizer: AdamConfig::default(),
        }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask ratio {} not in [0, 1)", self.mask_ratio)));
        }
        if self.patch_len == 0 || self.batch_size == 0 {
            return Err(Error::Config("patch_len and batch_size must be positive".into()));
        }
        if self.decoder_blocks == 0 {
            return Err(Error::Config("decoder needs at least one block".into()));
        }
        Ok(())
    }

    fn patch_size(&self) -> usize {
        self.encoder.input_dim
    }
}

/// Encoder (`encoder.*`), mask token (`decoder.mask_token`), decoder blocks
/// and the per-position reconstruction head (`decoder.head`).
pub fn init_mae_params(config: &MaeConfig, seed: u64) -> Result<ParameterSet> {
    config.validate()?;
    let mut params = init_params(&config.encoder, derive_seed(seed, &[TAG_INIT]))?;
    let mut r = rng(derive_seed(seed, &[TAG_HEAD]));
    let d = config.encoder.model_dim;
    params.insert("decoder.mask_token", Tensor::zeros(vec![d]).with_grad())?;
    for i in 0..config.decoder_blocks {
        init_block(&mut params, &format!("decoder.block{i}"), &config.encoder, &mut r)?;
    }
    init_linear(&mut params, "decoder.head", d, config.patch_size(), &mut r)?;
    Ok(params)
}

/// Tape handles produced by a batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct MaeVars {
    /// `[batch, n_patches, patch_size]`, temporal order.
    pub reconstructed: Var,
    /// Encoder output on visible patches, `[batch, n_visible, model_dim]`.
    pub latent: Var,
}

/// Batched forward pass. All plans must have the same visible count.
pub fn mae_forward_batch(
    tape: &mut Tape,
    b: &Bindings,
    grids: &[PatchGrid],
    plans: &[MaskPlan],
    config: &MaeConfig,
) -> Result<MaeVars> {
    let (Some(grid0), Some(plan0)) = (grids.first(), plans.first()) else {
        return Err(Error::Contract("MAE forward on an empty batch".into()));
    };
    if grids.len() != plans.len() {
        return Err(Error::Contract(format!("{} grids but {} plans", grids.len(), plans.len())));
    }
    let batch = grids.len();
    let n = grid0.n_patches();
    let n_visible = plan0.visible().len();
    let pd = grid0.patch_size();
    if pd != config.patch_size() {
        return Err(Error::Config(format!(
            "patch size {pd} does not match encoder input_dim {}",
            config.patch_size()
        )));
    }
    let d = config.encoder.model_dim;
    let mut tokens = Vec::with_capacity(batch * n_visible * pd);
    let mut visible_positions = Vec::with_capacity(batch * n_visible);
    for (grid, plan) in grids.iter().zip(plans) {
        if grid.n_patches() != n || grid.patch_size() != pd || plan.n_patches() != n {
            return Err(Error::Contract("grids and plans in one batch must share a patch layout".into()));
        }
        if plan.visible().len() != n_visible {
            return Err(Error::Contract("plans in one batch must mask the same number of patches".into()));
        }
        for &p in plan.visible() {
            tokens.extend_from_slice(&grid.patches()[p]);
            visible_positions.push(p);
        }
    }

    let tokens = tape.constant(vec![batch, n_visible, pd], tokens)?;
    let pe_visible = tape.constant(vec![batch, n_visible, d], positional_rows(&visible_positions, d)?)?;
    let x = linear(tape, b, "encoder.embed", tokens)?;
    let mut h = tape.add(x, pe_visible)?;
    for i in 0..config.encoder.n_blocks {
        h = transformer_block(tape, b, &format!("encoder.block{i}"), h, config.encoder.n_heads)?;
    }
    let latent = h;

    // Rows 0..batch·n_visible are latents; the last row is the mask token.
    let flat = tape.reshape(latent, &[batch * n_visible, d])?;
    let token = tape.reshape(b.get("decoder.mask_token")?, &[1, d])?;
    let pool = tape.concat(&[flat, token])?;
    let mask_row = batch * n_visible;
    let mut rows = Vec::with_capacity(batch * n * d);
    for (s, plan) in plans.iter().enumerate() {
        let restore = plan.restore_index();
        for &slot in &restore {
            let row = if slot < n_visible { s * n_visible + slot } else { mask_row };
            rows.extend((0..d).map(|c| row * d + c));
        }
    }
    let full = tape.take(pool, rows, &[batch, n, d])?;
    let all_positions: Vec<usize> = (0..n).collect();
    let pe_full = tape.constant(vec![batch, n, d], positional_rows(&all_positions, d)?.repeat(batch))?;
    let mut y = tape.add(full, pe_full)?;
    for i in 0..config.decoder_blocks {
        y = transformer_block(tape, b, &format!("decoder.block{i}"), y, config.encoder.n_heads)?;
    }
    let reconstructed = linear(tape, b, "decoder.head", y)?;
    Ok(MaeVars { reconstructed, latent })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaeForwardResult {
    pub reconstructed: PatchGrid,
    pub plan: MaskPlan,
    /// Visible-patch representations, one row per visible patch.
    pub latent: Vec<Vec<f64>>,
}

/// Single-sample forward pass returning plain values.
pub fn mae_forward(
    x: &TimeSeriesSample,
    params: &ParameterSet,
    config: &MaeConfig,
    plan: &MaskPlan,
) -> Result<MaeForwardResult> {
    let grid = patchify(x, config.patch_len)?;
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let vars = mae_forward_batch(&mut tape, &b, std::slice::from_ref(&grid), std::slice::from_ref(plan), config)?;
    let pd = grid.patch_size();
    let d = config.encoder.model_dim;
    let by_position: Vec<Vec<f64>> = tape.value(vars.reconstructed).chunks(pd).map(<[f64]>::to_vec).collect();
    let in_plan_order = plan.plan_order().iter().map(|&p| by_position[p].clone()).collect();
    Ok(MaeForwardResult {
        reconstructed: scatter_reconstruction(in_plan_order, plan, grid.channels(), grid.patch_len())?,
        plan: plan.clone(),
        latent: tape.value(vars.latent).chunks(d).map(<[f64]>::to_vec).collect(),
    })
}

/// Element-wise MSE between `predicted` and `target` (`[batch, n_patches,
/// patch_size]`), restricted to the in-scope patches of each plan.
pub fn reconstruction_loss(
    tape: &mut Tape,
    predicted: Var,
    target: Var,
    plans: &[MaskPlan],
    scope: LossScope,
) -> Result<Var> {
    let shape = tape.shape(predicted).to_vec();
    let [batch, n, pd] = shape[..] else {
        return Err(Error::Contract(format!("expected [batch, n_patches, patch_size], got {shape:?}")));
    };
    if tape.shape(target) != shape.as_slice() || plans.len() != batch || plans.iter().any(|p| p.n_patches() != n) {
        return Err(Error::Contract("prediction, target and plans are not aligned".into()));
    }
    let mut cells = Vec::new();
    for (s, plan) in plans.iter().enumerate() {
        let positions: Vec<usize> = match scope {
            LossScope::MaskedOnly => plan.masked().to_vec(),
            LossScope::AllPatches => (0..n).collect(),
        };
        for p in positions {
            cells.extend((0..pd).map(|c| (s * n + p) * pd + c));
        }
    }
    if cells.is_empty() {
        return Err(Error::Contract("reconstruction loss has no patch in scope".into()));
    }
    let diff = tape.sub(predicted, target)?;
    let len = cells.len();
    let diff = tape.take(diff, cells, &[len])?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq, None)?)
}

/// Loss of a single forward result against its target grid.
pub fn reconstruction_loss_value(result: &MaeForwardResult, target: &PatchGrid, scope: LossScope) -> Result<f64> {
    let n = target.n_patches();
    let pd = target.patch_size();
    if result.reconstructed.n_patches() != n || result.reconstructed.patch_size() != pd {
        return Err(Error::Contract("reconstruction and target grids differ in layout".into()));
    }
    let mut tape = Tape::new();
    let pred = tape.constant(vec![1, n, pd], result.reconstructed.flatten())?;
    let tgt = tape.constant(vec![1, n, pd], target.flatten())?;
    let loss = reconstruction_loss(&mut tape, pred, tgt, std::slice::from_ref(&result.plan), scope)?;
    Ok(tape.item(loss)?)
}

/// Mask plan for one sample at one epoch.
pub fn epoch_mask(config: &MaeConfig, n_patches: usize, seed: u64, epoch: usize, sample: usize) -> Result<MaskPlan> {
    sample_mask(
        n_patches,
        config.mask_ratio,
        derive_seed(seed, &[TAG_MASK, epoch as u64, sample as u64]),
    )
}

pub fn pretrain_generative(data: &Dataset, config: &MaeConfig, seed: u64) -> Result<PretrainOutcome> {
    let params = init_mae_params(config, seed)?;
    pretrain_generative_from(data, config, seed, params)
}

pub fn pretrain_generative_from(
    data: &Dataset,
    config: &MaeConfig,
    seed: u64,
    mut params: ParameterSet,
) -> Result<PretrainOutcome> {
    config.validate()?;
    let grids: Vec<PatchGrid> = data
        .samples()
        .iter()
        .map(|s| patchify(s, config.patch_len))
        .collect::<Result<_>>()?;
    let Some(n_patches) = grids.first().map(PatchGrid::n_patches) else {
        return Err(Error::Data("generative pretraining needs at least one sample".into()));
    };
    if config.loss_scope == LossScope::MaskedOnly && masked_count(n_patches, config.mask_ratio) == 0 {
        return Err(Error::Config(
            "masked_only loss with a mask ratio that masks no patch".into(),
        ));
    }
    let mut optimizer = OptimizerState::new(config.optimizer);
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = None;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let batches = epoch_batches(
            grids.len(),
            config.batch_size,
            derive_seed(seed, &[TAG_SHUFFLE, epoch as u64]),
            1,
        );
        let mut total = 0.0;
        for (bi, idx) in batches.iter().enumerate() {
            let wrap = |e: Error| Error::Training {
                epoch,
                batch: bi,
                message: e.to_string(),
            };
            let batch: Vec<PatchGrid> = idx.iter().map(|&i| grids[i].clone()).collect();
            let plans: Vec<MaskPlan> = idx
                .iter()
                .map(|&i| epoch_mask(config, n_patches, seed, epoch, i))
                .collect::<Result<_>>()
                .map_err(wrap)?;
            let loss = train_step(&mut params, &mut optimizer, |tape, b| {
                let vars = mae_forward_batch(tape, b, &batch, &plans, config)?;
                let pd = config.patch_size();
                let target: Vec<f64> = batch.iter().flat_map(PatchGrid::flatten).collect();
                let target = tape.constant(vec![batch.len(), n_patches, pd], target)?;
                reconstruction_loss(tape, vars.reconstructed, target, &plans, config.loss_scope)
            })
            .map_err(wrap)?;
            total += loss * idx.len() as f64;
        }
        let epoch_loss = total / grids.len() as f64;
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
