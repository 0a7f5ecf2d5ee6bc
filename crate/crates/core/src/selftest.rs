//! Oracle and invariant checks runnable from a release binary.

use rand::Rng;
use tsrl_autodiff::{grad_check, Tape};

use crate::augment::{patchify, sample_mask, unpatchify};
use crate::contrastive::{encode_batch, init_contrastive_params, nt_xent_loss, AnchorMode, ContrastiveConfig};
use crate::data::{synth_generate, SynthConfig, TimeSeriesSample};
use crate::error::{Error, Result};
use crate::evaluate::{auroc_ovr, cross_entropy_loss, macro_f1};
use crate::generative::{init_mae_params, mae_forward_batch, reconstruction_loss, LossScope, MaeConfig};
use crate::nn::{read_checkpoint, write_checkpoint, EncoderConfig};
use crate::seed::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn nt_xent_value(a: &[Vec<f64>], p: &[Vec<f64>], tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let dim = a[0].len();
    let av = tape.constant(vec![a.len(), dim], a.concat())?;
    let pv = tape.constant(vec![p.len(), dim], p.concat())?;
    let loss = nt_xent_loss(&mut tape, av, pv, tau, AnchorMode::Symmetric)?;
    Ok(tape.item(loss)?)
}

fn nt_xent_brute(a: &[Vec<f64>], p: &[Vec<f64>], tau: f64) -> f64 {
    let all: Vec<&Vec<f64>> = a.iter().chain(p).collect();
    let n = a.len();
    let cos = |u: &[f64], v: &[f64]| {
        let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
        dot / (u.iter().map(|x| x * x).sum::<f64>().sqrt() * v.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let mut total = 0.0;
    for i in 0..2 * n {
        let j = (i + n) % (2 * n);
        let den: f64 = (0..2 * n).filter(|&k| k != i).map(|k| (cos(all[i], all[k]) / tau).exp()).sum();
        total -= ((cos(all[i], all[j]) / tau).exp() / den).ln();
    }
    total / (2 * n) as f64
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        n_blocks: 2,
        model_dim: 8,
        n_heads: 2,
        mlp_dim: 12,
        input_dim: 6,
    }
}

fn random_series(n: usize, seed: u64) -> Result<Vec<TimeSeriesSample>> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| TimeSeriesSample::new(2, 12, (0..24).map(|_| r.random_range(-2.0..2.0)).collect(), None))
        .collect()
}

/// Runs every check; none of them panics.
pub fn run_selftest() -> Vec<CheckResult> {
    vec![
        check("nt-xent degenerate batch equals ln 3", || {
            let same = vec![vec![1.0, 2.0, 3.0]; 2];
            let v = nt_xent_value(&same, &same, 0.5)?;
            Ok(((v - 3f64.ln()).abs() <= 1e-9, format!("{v}")))
        }),
        check("nt-xent matches brute force on random batches", || {
            let mut r = rng(1);
            let mut worst: f64 = 0.0;
            for _ in 0..100 {
                let n = r.random_range(2..=8);
                let mut rows = |k: usize| -> Vec<Vec<f64>> {
                    (0..k).map(|_| (0..8).map(|_| r.random_range(-1.0..1.0)).collect()).collect()
                };
                let (a, p) = (rows(n), rows(n));
                worst = worst.max((nt_xent_value(&a, &p, 0.5)? - nt_xent_brute(&a, &p, 0.5)).abs());
            }
            Ok((worst <= 1e-10, format!("max abs diff {worst:e}")))
        }),
        check("reconstruction loss of a perfect copy is zero", || {
            let mut tape = Tape::new();
            let t = tape.constant(vec![1, 4, 3], (0..12).map(f64::from).collect())?;
            let plan = sample_mask(4, 0.5, 0)?;
            let loss = reconstruction_loss(&mut tape, t, t, &[plan], LossScope::MaskedOnly)?;
            let v = tape.item(loss)?;
            Ok((v == 0.0, format!("{v}")))
        }),
        check("patchify/unpatchify round trip with 5 of 20 patches visible", || {
            let data = synth_generate(&SynthConfig {
                n_per_class: 1,
                ..Default::default()
            })?;
            let x = &data.samples()[0];
            let grid = patchify(x, 10)?;
            let plan = sample_mask(grid.n_patches(), 0.75, 3)?;
            let exact = unpatchify(&grid)? == *x;
            Ok((
                exact && grid.n_patches() == 20 && plan.visible().len() == 5,
                format!("{} patches, {} visible", grid.n_patches(), plan.visible().len()),
            ))
        }),
        check("metric worked examples", || {
            let rows: Vec<Vec<f64>> = [0.1, 0.4, 0.35, 0.8].iter().map(|&s| vec![1.0 - s, s]).collect();
            let auc = auroc_ovr(&rows, &[0, 0, 1, 1], 2)?;
            let f1 = macro_f1(&[0, 0, 1, 1, 2], &[0, 1, 1, 1, 2], 3)?;
            let mut tape = Tape::new();
            let logits = tape.constant(vec![2, 6], vec![0.0; 12])?;
            let ce = cross_entropy_loss(&mut tape, logits, &[1, 4])?;
            let ce = tape.item(ce)?;
            let ok = auc == 0.75 && (f1 - 0.8222).abs() <= 1e-4 && (ce - 6f64.ln()).abs() <= 1e-9;
            Ok((ok, format!("auroc {auc}, macro-f1 {f1:.4}, ce {ce:.6}")))
        }),
        check("nt-xent gradient through encoder and projection", || {
            let cfg = ContrastiveConfig {
                projection_dim: 4,
                patch_len: 3,
                encoder: tiny_encoder(),
                ..Default::default()
            };
            let mut params = init_contrastive_params(&cfg, 3)?;
            let (a, p) = (random_series(3, 1)?, random_series(3, 2)?);
            let report = grad_check(&mut params, 1e-5, 4, |tape: &mut Tape, b| -> Result<_> {
                let ar: Vec<&TimeSeriesSample> = a.iter().collect();
                let pr: Vec<&TimeSeriesSample> = p.iter().collect();
                let za = encode_batch(tape, b, &ar, &cfg)?;
                let zp = encode_batch(tape, b, &pr, &cfg)?;
                nt_xent_loss(tape, za, zp, cfg.temperature, cfg.anchors)
            })?;
            Ok((report.max_rel_error <= 1e-4, format!("max rel error {:e}", report.max_rel_error)))
        }),
        check("reconstruction gradient through the masked autoencoder", || {
            let cfg = MaeConfig {
                patch_len: 3,
                mask_ratio: 0.5,
                encoder: tiny_encoder(),
                ..Default::default()
            };
            let mut params = init_mae_params(&cfg, 4)?;
            let grids = random_series(2, 5)?
                .iter()
                .map(|s| patchify(s, 3))
                .collect::<Result<Vec<_>>>()?;
            let plans = vec![sample_mask(4, 0.5, 1)?, sample_mask(4, 0.5, 2)?];
            let report = grad_check(&mut params, 1e-5, 4, |tape: &mut Tape, b| -> Result<_> {
                let out = mae_forward_batch(tape, b, &grids, &plans, &cfg)?;
                let target = tape.constant(vec![2, 4, 6], grids.iter().flat_map(|g| g.flatten()).collect())?;
                reconstruction_loss(tape, out.reconstructed, target, &plans, LossScope::MaskedOnly)
            })?;
            Ok((report.max_rel_error <= 1e-4, format!("max rel error {:e}", report.max_rel_error)))
        }),
        check("checkpoint text round trip is bit-exact", || {
            let params = init_mae_params(&MaeConfig::default(), 7)?;
            let back = read_checkpoint(&write_checkpoint(&params))?;
            Ok((back == params, format!("{} tensors", params.len())))
        }),
    ]
}

/// Fails with the names of failing checks, if any.
pub fn require_all(results: &[CheckResult]) -> Result<()> {
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Contract(format!("self-test failures: {}", failed.join("; "))))
    }
}
