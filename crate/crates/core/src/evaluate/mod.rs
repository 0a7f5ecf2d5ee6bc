//! Supervised fine-tuning of an encoder plus classifier head, prediction,
//! and test-set metrics.

mod metrics;

pub use metrics::{
    aggregate_seeds, auprc_ovr, auroc_ovr, average_precision, binary_auroc, compute_metrics, macro_f1, macro_prf,
    Metrics, MetricsReport,
};

use serde::{Deserialize, Serialize};
use tsrl_autodiff::{Bindings, ParameterSet, Tape, Var};

use crate::contrastive::{epoch_batches, train_step};
use crate::data::{Dataset, TimeSeriesSample};
use crate::error::{Error, Result};
use crate::nn::{encode_pooled, init_mlp_head, mlp_head, AdamConfig, EncoderConfig, OptimizerState};
use crate::seed::{derive_seed, TAG_HEAD, TAG_SHUFFLE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// `false` freezes the encoder and trains only the classifier.
    pub train_encoder: bool,
    pub classifier_hidden: usize,
    pub patch_len: usize,
    pub encoder: EncoderConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            optimizer: AdamConfig::default(),
            train_encoder: true,
            classifier_hidden: 64,
            patch_len: 10,
            encoder: EncoderConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.classifier_hidden == 0 || self.patch_len == 0 {
            return Err(Error::Config(
                "fine-tune epochs, batch_size, classifier_hidden and patch_len must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Mean cross-entropy of `logits` (`[N, K]`) against `labels`, via a stable
/// log-softmax.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let [n, k] = shape[..] else {
        return Err(Error::Contract(format!("logits must be [N, K], got {shape:?}")));
    };
    if labels.len() != n {
        return Err(Error::Contract(format!("{n} logit rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
    }
    let log_p = tape.log_softmax(logits, 1)?;
    let picked = tape.take(log_p, labels.iter().enumerate().map(|(i, &l)| i * k + l).collect(), &[n])?;
    let mean = tape.mean(picked, None)?;
    Ok(tape.scale(mean, -1.0)?)
}

fn classifier_logits(
    tape: &mut Tape,
    b: &Bindings,
    samples: &[&TimeSeriesSample],
    config: &FinetuneConfig,
) -> Result<Var> {
    let h = encode_pooled(tape, b, &config.encoder, samples, config.patch_len)?;
    mlp_head(tape, b, "cls", h)
}

/// Predicted class ids (argmax, lowest index on ties) and softmax rows.
pub fn predict(
    encoder: &ParameterSet,
    classifier: &ParameterSet,
    samples: &[&TimeSeriesSample],
    config: &FinetuneConfig,
) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let mut ids = Vec::with_capacity(samples.len());
    let mut probs = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(config.batch_size.max(64)) {
        let mut tape = Tape::new();
        let mut b = encoder.bind(&mut tape);
        b.extend(classifier.bind(&mut tape));
        let logits = classifier_logits(&mut tape, &b, chunk, config)?;
        let p = tape.softmax(logits, 1)?;
        let k = tape.shape(p)[1];
        for row in tape.value(p).chunks(k) {
            ids.push(argmax(row));
            probs.push(row.to_vec());
        }
    }
    Ok((ids, probs))
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicts `data` and scores it.
pub fn evaluate(
    encoder: &ParameterSet,
    classifier: &ParameterSet,
    data: &Dataset,
    config: &FinetuneConfig,
) -> Result<Metrics> {
    let samples: Vec<&TimeSeriesSample> = data.samples().iter().collect();
    let (ids, probs) = predict(encoder, classifier, &samples, config)?;
    compute_metrics(&data.labels()?, &ids, &probs, data.n_classes())
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub encoder: ParameterSet,
    pub classifier: ParameterSet,
    /// Validation macro-F1 after each epoch.
    pub history: Vec<f64>,
    pub best_epoch: usize,
}

/// Trains encoder and classifier on `train` and keeps the snapshot with the
/// highest validation macro-F1 (earliest epoch on ties).
pub fn finetune(
    encoder: &ParameterSet,
    train: &Dataset,
    valid: &Dataset,
    config: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Data("fine-tuning needs non-empty train and validation sets".into()));
    }
    let n_classes = train.n_classes();
    let mut params = encoder.clone();
    params.set_requires_grad(config.train_encoder);
    params.extend(init_mlp_head(
        "cls",
        config.encoder.model_dim,
        config.classifier_hidden,
        n_classes,
        derive_seed(seed, &[TAG_HEAD]),
    )?)?;

    let labels = train.labels()?;
    let valid_samples: Vec<&TimeSeriesSample> = valid.samples().iter().collect();
    let valid_labels = valid.labels()?;
    let mut optimizer = OptimizerState::new(config.optimizer);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParameterSet)> = None;
    for epoch in 0..config.epochs {
        let batches = epoch_batches(
            train.len(),
            config.batch_size,
            derive_seed(seed, &[TAG_SHUFFLE, epoch as u64]),
            1,
        );
        for (bi, idx) in batches.iter().enumerate() {
            let batch: Vec<&TimeSeriesSample> = idx.iter().map(|&i| &train.samples()[i]).collect();
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            train_step(&mut params, &mut optimizer, |tape, b| {
                let logits = classifier_logits(tape, b, &batch, config)?;
                cross_entropy_loss(tape, logits, &batch_labels)
            })
            .map_err(|e| Error::Training {
                epoch,
                batch: bi,
                message: e.to_string(),
            })?;
        }
        let (enc, cls) = split_params(&params);
        let (preds, _) = predict(&enc, &cls, &valid_samples, config)?;
        let f1 = macro_f1(&valid_labels, &preds, n_classes)?;
        history.push(f1);
        if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
            best = Some((f1, epoch, params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("epochs >= 1");
    let (mut encoder, mut classifier) = split_params(&params);
    for (_, t) in encoder.iter_mut().chain(classifier.iter_mut()) {
        t.set_requires_grad(true);
        t.clear_grad();
    }
    Ok(FinetuneOutcome {
        encoder,
        classifier,
        history,
        best_epoch,
    })
}

fn split_params(params: &ParameterSet) -> (ParameterSet, ParameterSet) {
    (params.filter_prefix("encoder."), params.filter_prefix("cls."))
}
