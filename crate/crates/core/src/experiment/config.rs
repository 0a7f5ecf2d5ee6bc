use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contrastive::ContrastiveConfig;
use crate::data::{
    balance_upsample, load_csv, stratified_split, synth_generate, zscore_normalize, CsvSchema, Dataset,
    NormalizationStats, SplitSpec, SynthConfig,
};
use crate::error::{Error, Result};
use crate::evaluate::FinetuneConfig;
use crate::generative::MaeConfig;
use crate::nn::EncoderConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Simclr,
    Mae,
}

impl ModelKind {
    pub fn key(self) -> &'static str {
        match self {
            ModelKind::Simclr => "simclr",
            ModelKind::Mae => "mae",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "simclr" => Ok(ModelKind::Simclr),
            "mae" => Ok(ModelKind::Mae),
            other => Err(Error::Config(format!("unknown model `{other}` (expected simclr or mae)"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Simclr => "SimCLR",
            ModelKind::Mae => "MAE",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMode {
    On,
    Off,
    #[default]
    Both,
}

impl PretrainMode {
    pub fn flags(self) -> &'static [bool] {
        match self {
            PretrainMode::On => &[true],
            PretrainMode::Off => &[false],
            PretrainMode::Both => &[true, false],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SynthConfig),
    /// One labelled CSV, split into pretraining/validation/test.
    Csv {
        path: PathBuf,
        channels: usize,
        length: usize,
        n_classes: usize,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SynthConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub split: SplitSpec,
    /// Seed of the data split; fixed across run seeds so every seed is tested
    /// on the same samples.
    pub split_seed: u64,
    pub normalize: bool,
    pub balance_pretrain: bool,
    pub models: Vec<ModelKind>,
    pub label_ratios: Vec<f64>,
    pub pretrain: PretrainMode,
    pub seeds: Vec<u64>,
    /// Applied to both pretraining methods so their timings are comparable.
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// Fine-tune epochs for label ratios at or below `low_ratio_threshold`.
    pub low_ratio_finetune_epochs: usize,
    pub low_ratio_threshold: f64,
    /// Shared by both models; copied into the nested configs.
    pub encoder: EncoderConfig,
    pub patch_len: usize,
    pub contrastive: ContrastiveConfig,
    pub mae: MaeConfig,
    pub finetune: FinetuneConfig,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            split: SplitSpec::default(),
            split_seed: 0,
            normalize: true,
            balance_pretrain: true,
            models: vec![ModelKind::Simclr, ModelKind::Mae],
            label_ratios: vec![0.01, 0.1, 0.3, 0.5, 1.0],
            pretrain: PretrainMode::Both,
            seeds: (41..=45).collect(),
            pretrain_epochs: 200,
            finetune_epochs: 30,
            low_ratio_finetune_epochs: 100,
            low_ratio_threshold: 0.01,
            encoder: EncoderConfig::default(),
            patch_len: 10,
            contrastive: ContrastiveConfig::default(),
            mae: MaeConfig::default(),
            finetune: FinetuneConfig::default(),
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        if self.models.is_empty() || self.seeds.is_empty() || self.label_ratios.is_empty() {
            return Err(Error::Config("models, seeds and label_ratios must be non-empty".into()));
        }
        if let Some(r) = self.label_ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(Error::Config(format!("label ratio {r} not in (0, 1]")));
        }
        if self.finetune_epochs == 0 || self.low_ratio_finetune_epochs == 0 {
            return Err(Error::Config("fine-tune epochs must be positive".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        let channels = match &self.dataset {
            DatasetSource::Synthetic(s) => s.channels,
            DatasetSource::Csv { channels, .. } => *channels,
        };
        let resolved = self.resolved(channels);
        resolved.contrastive.validate()?;
        resolved.mae.validate()?;
        resolved.finetune.validate()
    }

    /// Nested configs with the shared encoder, patch length and epoch counts
    /// filled in for data with `channels` channels.
    pub fn resolved(&self, channels: usize) -> ExperimentConfig {
        let mut c = self.clone();
        c.encoder.input_dim = channels * self.patch_len;
        c.contrastive.encoder = c.encoder.clone();
        c.contrastive.patch_len = self.patch_len;
        c.contrastive.epochs = self.pretrain_epochs;
        c.mae.encoder = c.encoder.clone();
        c.mae.patch_len = self.patch_len;
        c.mae.epochs = self.pretrain_epochs;
        c.finetune.encoder = c.encoder.clone();
        c.finetune.patch_len = self.patch_len;
        c
    }

    pub fn finetune_epochs_for(&self, ratio: f64) -> usize {
        if ratio <= self.low_ratio_threshold {
            self.low_ratio_finetune_epochs
        } else {
            self.finetune_epochs
        }
    }
}

/// Pretraining / validation / test splits after normalisation.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub pretrain: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    pub stats: Option<NormalizationStats>,
}

impl PreparedData {
    pub fn channels(&self) -> usize {
        self.pretrain.shape().map_or(0, |(c, _)| c)
    }
}

pub fn load_dataset(source: &DatasetSource) -> Result<Dataset> {
    match source {
        DatasetSource::Synthetic(cfg) => synth_generate(cfg),
        DatasetSource::Csv {
            path,
            channels,
            length,
            n_classes,
        } => load_csv(
            path,
            &CsvSchema {
                channels: *channels,
                length: *length,
                label_column: true,
                n_classes: Some(*n_classes),
            },
        ),
    }
}

/// Loads, splits, balances the pretraining split and z-scores every split
/// with pretraining-split statistics.
pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    let full = load_dataset(&config.dataset)?;
    let (pretrain, valid, test) = stratified_split(&full, &config.split, config.split_seed)?;
    let pretrain = if config.balance_pretrain {
        balance_upsample(&pretrain, config.split_seed)?
    } else {
        pretrain
    };
    if !config.normalize {
        return Ok(PreparedData {
            pretrain,
            valid,
            test,
            stats: None,
        });
    }
    let stats = NormalizationStats::compute(&pretrain)?;
    Ok(PreparedData {
        pretrain: zscore_normalize(&pretrain, &stats)?,
        valid: zscore_normalize(&valid, &stats)?,
        test: zscore_normalize(&test, &stats)?,
        stats: Some(stats),
    })
}
