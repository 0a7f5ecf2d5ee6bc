use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tsrl_autodiff::ParameterSet;

use super::config::{prepare_data, ExperimentConfig, ModelKind, PreparedData};
use crate::contrastive::{pretrain_contrastive, PretrainOutcome};
use crate::data::label_ratio_subset;
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, finetune, Metrics};
use crate::generative::pretrain_generative;
use crate::nn::{init_params, load_checkpoint, save_checkpoint};
use crate::seed::{derive_seed, TAG_INIT, TAG_SUBSET};

/// One grid cell: `(model, label ratio, pretrained?, seed)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunKey {
    pub model: ModelKind,
    pub ratio: f64,
    pub pretrained: bool,
    pub seed: u64,
}

impl RunKey {
    pub fn flag(&self) -> &'static str {
        if self.pretrained {
            "w"
        } else {
            "wo"
        }
    }

    /// `<model>/<ratio>/<flag>/<seed>` relative to the runs directory.
    pub fn rel_dir(&self) -> PathBuf {
        PathBuf::from(self.model.key())
            .join(self.ratio.to_string())
            .join(self.flag())
            .join(self.seed.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    #[serde(flatten)]
    pub key: RunKey,
    /// `None` when the cell failed; see `error`.
    pub metrics: Option<Metrics>,
    pub error: Option<String>,
    pub train_size: usize,
    pub best_epoch: Option<usize>,
    /// Validation macro-F1 per fine-tuning epoch.
    pub curve: Vec<f64>,
    /// Wall-clock of the pretraining run this cell started from.
    pub pretrain_seconds: Option<f64>,
    pub finetune_seconds: f64,
}

impl RunRecord {
    pub fn is_complete(&self) -> bool {
        self.metrics.is_some()
    }

    fn failed(key: RunKey, error: String) -> Self {
        Self {
            key,
            metrics: None,
            error: Some(error),
            train_size: 0,
            best_epoch: None,
            curve: Vec::new(),
            pretrain_seconds: None,
            finetune_seconds: 0.0,
        }
    }
}

/// A pretrained encoder with its loss history and wall-clock.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub model: ModelKind,
    pub seed: u64,
    pub history: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainArtifact {
    pub encoder: ParameterSet,
    pub summary: PretrainSummary,
}

/// Runs one pretraining job on the (already prepared) pretraining split.
/// `config` must be [resolved](ExperimentConfig::resolved).
pub fn pretrain_model(model: ModelKind, data: &PreparedData, config: &ExperimentConfig, seed: u64) -> Result<PretrainArtifact> {
    let start = Instant::now();
    let outcome: PretrainOutcome = match model {
        ModelKind::Simclr => pretrain_contrastive(&data.pretrain, &config.contrastive, seed)?,
        ModelKind::Mae => pretrain_generative(&data.pretrain, &config.mae, seed)?,
    };
    let seconds = start.elapsed().as_secs_f64();
    Ok(PretrainArtifact {
        encoder: outcome.encoder(),
        summary: PretrainSummary {
            model,
            seed,
            history: outcome.history,
            best_epoch: outcome.best_epoch,
            seconds,
        },
    })
}

/// Fine-tunes and tests one grid cell.
pub fn run_cell(
    key: RunKey,
    data: &PreparedData,
    config: &ExperimentConfig,
    pretrained: Option<&PretrainArtifact>,
) -> Result<RunRecord> {
    let start = Instant::now();
    let train = label_ratio_subset(&data.pretrain, key.ratio, derive_seed(key.seed, &[TAG_SUBSET]))?;
    let encoder = match (key.pretrained, pretrained) {
        (true, Some(p)) => p.encoder.clone(),
        (true, None) => return Err(Error::Contract("pretrained cell without a pretrained encoder".into())),
        (false, _) => init_params(&config.encoder, derive_seed(key.seed, &[TAG_INIT]))?,
    };
    let mut ft = config.finetune.clone();
    ft.epochs = config.finetune_epochs_for(key.ratio);
    let outcome = finetune(&encoder, &train, &data.valid, &ft, key.seed)?;
    let metrics = evaluate(&outcome.encoder, &outcome.classifier, &data.test, &ft)?;
    Ok(RunRecord {
        key,
        metrics: Some(metrics),
        error: None,
        train_size: train.len(),
        best_epoch: Some(outcome.best_epoch),
        curve: outcome.history,
        pretrain_seconds: pretrained.filter(|_| key.pretrained).map(|p| p.summary.seconds),
        finetune_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Artifact root; `None` keeps everything in memory (no resume).
    pub out_dir: Option<PathBuf>,
    /// Overrides `config.workers`.
    pub workers: Option<usize>,
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    /// In grid order: model → ratio → pretrained (w/ first) → seed.
    pub records: Vec<RunRecord>,
    pub pretraining: Vec<PretrainSummary>,
    pub cells_trained: usize,
    pub cells_skipped: usize,
    pub pretrain_runs: usize,
}

pub fn grid(config: &ExperimentConfig) -> Vec<RunKey> {
    let mut keys = Vec::new();
    for &model in &config.models {
        for &ratio in &config.label_ratios {
            for &pretrained in config.pretrain.flags() {
                for &seed in &config.seeds {
                    keys.push(RunKey {
                        model,
                        ratio,
                        pretrained,
                        seed,
                    });
                }
            }
        }
    }
    keys
}

/// Applies `f` to every job on up to `workers` threads; results keep job order.
pub fn parallel_map<T, R, F>(jobs: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    if workers <= 1 || jobs.len() <= 1 {
        return jobs.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.min(jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let r = f(job);
                results.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// `<out>/runs/<model>/pretrain/<seed>`.
pub fn pretrain_dir(out: &Path, model: ModelKind, seed: u64) -> PathBuf {
    out.join("runs").join(model.key()).join("pretrain").join(seed.to_string())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn save_pretrain(dir: &Path, artifact: &PretrainArtifact) -> Result<()> {
    create_dir(dir)?;
    save_checkpoint(&artifact.encoder, dir.join("encoder.ckpt"))?;
    let loss: String = std::iter::once("epoch,loss".to_string())
        .chain(artifact.summary.history.iter().enumerate().map(|(e, l)| format!("{e},{l}")))
        .collect::<Vec<_>>()
        .join("\n");
    fs::write(dir.join("loss.csv"), loss + "\n").map_err(|e| Error::io(dir.join("loss.csv"), e))?;
    write_json(&dir.join("pretrain.json"), &artifact.summary)
}

pub fn load_pretrain(dir: &Path) -> Result<PretrainArtifact> {
    Ok(PretrainArtifact {
        encoder: load_checkpoint(dir.join("encoder.ckpt"))?,
        summary: read_json(&dir.join("pretrain.json"))?,
    })
}

/// Records listed in `<out>/manifest.json`.
pub fn read_manifest(out: &Path) -> Result<Vec<RunRecord>> {
    read_json(&out.join("manifest.json"))
}

/// Runs (or resumes) the full grid. A failing cell is recorded with its
/// diagnostic and does not stop the others.
pub fn run_experiment(config: &ExperimentConfig, options: &RunOptions) -> Result<ExperimentOutcome> {
    config.validate()?;
    let data = prepare_data(config)?;
    run_experiment_on(config, &data, options)
}

/// Like [`run_experiment`], on already prepared data.
pub fn run_experiment_on(config: &ExperimentConfig, data: &PreparedData, options: &RunOptions) -> Result<ExperimentOutcome> {
    config.validate()?;
    let config = config.resolved(data.channels());
    let workers = options.workers.unwrap_or(config.workers).max(1);
    let keys = grid(&config);
    let log = |msg: String| {
        if options.verbose {
            eprintln!("{msg}");
        }
    };

    if let Some(out) = &options.out_dir {
        create_dir(out)?;
        write_json(&out.join("config.json"), &config)?;
    }

    // Completed cells on disk are kept as-is.
    let mut done: Vec<Option<RunRecord>> = keys
        .iter()
        .map(|k| {
            let path = options.out_dir.as_ref()?.join("runs").join(k.rel_dir()).join("record.json");
            read_json::<RunRecord>(&path).ok().filter(|r| r.is_complete() && r.key == *k)
        })
        .collect();
    let pending: Vec<RunKey> = keys
        .iter()
        .zip(&done)
        .filter(|(_, d)| d.is_none())
        .map(|(k, _)| *k)
        .collect();

    let mut needed: Vec<(ModelKind, u64)> = pending.iter().filter(|k| k.pretrained).map(|k| (k.model, k.seed)).collect();
    needed.dedup();
    needed.sort();
    needed.dedup();

    let pretrain_runs = AtomicUsize::new(0);
    let artifacts: Vec<std::result::Result<PretrainArtifact, String>> = parallel_map(&needed, workers, |&(model, seed)| {
        let dir = options.out_dir.as_ref().map(|o| pretrain_dir(o, model, seed));
        if let Some(found) = dir.as_deref().and_then(|d| load_pretrain(d).ok()) {
            return Ok(found);
        }
        log(format!("pretraining {model} seed {seed}"));
        pretrain_runs.fetch_add(1, Ordering::Relaxed);
        let artifact = pretrain_model(model, data, &config, seed).map_err(|e| e.to_string())?;
        if let Some(dir) = dir {
            save_pretrain(&dir, &artifact).map_err(|e| e.to_string())?;
        }
        log(format!("pretrained {model} seed {seed} in {:.1}s", artifact.summary.seconds));
        Ok(artifact)
    });

    let fresh = parallel_map(&pending, workers, |key| {
        let pretrained = if key.pretrained {
            let i = needed.iter().position(|n| *n == (key.model, key.seed)).expect("scheduled");
            match &artifacts[i] {
                Ok(a) => Some(a),
                Err(e) => return RunRecord::failed(*key, format!("pretraining failed: {e}")),
            }
        } else {
            None
        };
        let record = run_cell(*key, data, &config, pretrained).unwrap_or_else(|e| RunRecord::failed(*key, e.to_string()));
        match (&record.metrics, &record.error) {
            (Some(m), _) => log(format!(
                "{} ratio {} {} seed {}: test F1 {:.4}",
                key.model,
                key.ratio,
                key.flag(),
                key.seed,
                m.f1
            )),
            (None, Some(e)) => log(format!("{} ratio {} {} seed {} failed: {e}", key.model, key.ratio, key.flag(), key.seed)),
            _ => {}
        }
        record
    });

    let cells_trained = fresh.iter().filter(|r| r.is_complete()).count();
    let mut fresh = fresh.into_iter();
    for slot in done.iter_mut().filter(|d| d.is_none()) {
        *slot = fresh.next();
    }
    let records: Vec<RunRecord> = done.into_iter().map(|r| r.expect("every cell filled")).collect();

    if let Some(out) = &options.out_dir {
        for r in &records {
            let dir = out.join("runs").join(r.key.rel_dir());
            create_dir(&dir)?;
            write_json(&dir.join("record.json"), r)?;
        }
        write_json(&out.join("manifest.json"), &records)?;
    }

    Ok(ExperimentOutcome {
        cells_skipped: records.len() - pending.len(),
        records,
        pretraining: artifacts.into_iter().filter_map(|a| a.ok().map(|a| a.summary)).collect(),
        cells_trained,
        pretrain_runs: pretrain_runs.into_inner(),
    })
}
