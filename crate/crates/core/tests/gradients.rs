//! Finite-difference checks of the full training losses.

use rand::Rng;
use tsrl_autodiff::{grad_check, ParameterSet, Tape};
use tsrl_core::augment::{patchify, sample_mask, MaskPlan, PatchGrid};
use tsrl_core::contrastive::{encode_batch, init_contrastive_params, make_views, nt_xent_loss, AnchorMode, ContrastiveConfig};
use tsrl_core::data::TimeSeriesSample;
use tsrl_core::evaluate::cross_entropy_loss;
use tsrl_core::generative::{init_mae_params, mae_forward_batch, reconstruction_loss, LossScope, MaeConfig};
use tsrl_core::nn::{encode_pooled, init_mlp_head, mlp_head, EncoderConfig};
use tsrl_core::seed::rng;
use tsrl_core::Error;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        n_blocks: 2,
        model_dim: 8,
        n_heads: 2,
        mlp_dim: 12,
        input_dim: 2 * 3,
    }
}

fn random_series(n: usize, seed: u64) -> Vec<TimeSeriesSample> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let v = (0..2 * 12).map(|_| r.random_range(-2.0..2.0)).collect();
            TimeSeriesSample::new(2, 12, v, Some(i % 3)).unwrap()
        })
        .collect()
}

/// Perturbs every parameter so biases, gains and the mask token are generic.
fn perturb(params: &mut ParameterSet, seed: u64) {
    let mut r = rng(seed ^ 0xabc);
    for (_, t) in params.iter_mut() {
        for v in t.values_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
}

#[test]
fn nt_xent_through_encoder_and_projection() {
    for seed in 0..10 {
        for anchors in [AnchorMode::Symmetric, AnchorMode::OriginalsOnly] {
            let cfg = ContrastiveConfig {
                projection_dim: 4,
                patch_len: 3,
                temperature: 0.5,
                anchors,
                encoder: tiny_encoder(),
                ..Default::default()
            };
            let mut params = init_contrastive_params(&cfg, seed).unwrap();
            perturb(&mut params, seed);
            let batch = random_series(3, seed);
            let refs: Vec<&TimeSeriesSample> = batch.iter().collect();
            let (orig, views) = make_views(&refs, 0.5, seed).unwrap();
            let report = grad_check(&mut params, H, 6, |tape: &mut Tape, b| {
                let o: Vec<&TimeSeriesSample> = orig.iter().collect();
                let v: Vec<&TimeSeriesSample> = views.iter().collect();
                let za = encode_batch(tape, b, &o, &cfg)?;
                let zp = encode_batch(tape, b, &v, &cfg)?;
                nt_xent_loss(tape, za, zp, cfg.temperature, cfg.anchors)
            })
            .unwrap();
            assert!(
                report.max_rel_error <= TOL,
                "seed {seed}: {} at {:?}",
                report.max_rel_error,
                report.worst
            );
        }
    }
}

#[test]
fn reconstruction_through_mae() {
    for seed in 0..10 {
        for (scope, ratio) in [(LossScope::MaskedOnly, 0.5), (LossScope::AllPatches, 0.0)] {
            let cfg = MaeConfig {
                patch_len: 3,
                mask_ratio: ratio,
                loss_scope: scope,
                encoder: tiny_encoder(),
                ..Default::default()
            };
            let mut params = init_mae_params(&cfg, seed).unwrap();
            perturb(&mut params, seed);
            let grids: Vec<PatchGrid> = random_series(2, seed).iter().map(|s| patchify(s, 3).unwrap()).collect();
            let plans: Vec<MaskPlan> = (0..2).map(|i| sample_mask(4, ratio, seed * 10 + i).unwrap()).collect();
            let report = grad_check(&mut params, H, 6, |tape: &mut Tape, b| {
                let out = mae_forward_batch(tape, b, &grids, &plans, &cfg)?;
                let target: Vec<f64> = grids.iter().flat_map(PatchGrid::flatten).collect();
                let target = tape.constant(vec![2, 4, 6], target)?;
                reconstruction_loss(tape, out.reconstructed, target, &plans, scope)
            })
            .unwrap();
            assert!(
                report.max_rel_error <= TOL,
                "seed {seed} {scope:?}: {} at {:?}",
                report.max_rel_error,
                report.worst
            );
        }
    }
}

#[test]
fn cross_entropy_through_classifier() {
    for seed in 0..10 {
        let enc = tiny_encoder();
        let mut params = tsrl_core::nn::init_params(&enc, seed).unwrap();
        params.extend(init_mlp_head("cls", 8, 8, 3, seed + 1).unwrap()).unwrap();
        perturb(&mut params, seed);
        let batch = random_series(4, seed);
        let labels: Vec<usize> = batch.iter().map(|s| s.label().unwrap()).collect();
        let report = grad_check(&mut params, H, 6, |tape: &mut Tape, b| -> Result<_, Error> {
            let refs: Vec<&TimeSeriesSample> = batch.iter().collect();
            let h = encode_pooled(tape, b, &enc, &refs, 3)?;
            let logits = mlp_head(tape, b, "cls", h)?;
            cross_entropy_loss(tape, logits, &labels)
        })
        .unwrap();
        assert!(report.max_rel_error <= TOL, "seed {seed}: {}", report.max_rel_error);
    }
}
