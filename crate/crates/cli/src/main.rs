use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tsrl_core::experiment::{
    emit_report, load_pretrain, pretrain_dir, pretrain_model, read_manifest, run_cell, run_experiment, save_pretrain,
    time_pretraining, write_outputs, DatasetSource, ExperimentConfig, ModelKind, PreparedData, RunKey, RunOptions,
};
use tsrl_core::selftest::{require_all, run_selftest};
use tsrl_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tsrl", version, about = "Self-supervised pretraining for multivariate time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetKind {
    Synthetic,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Simclr,
    Mae,
}

impl From<Model> for ModelKind {
    fn from(m: Model) -> Self {
        match m {
            Model::Simclr => ModelKind::Simclr,
            Model::Mae => ModelKind::Mae,
        }
    }
}

#[derive(clap::Args)]
struct Common {
    /// JSON experiment config; defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config's dataset kind.
    #[arg(long, value_enum)]
    dataset: Option<DatasetKind>,
    /// Labelled CSV (`label,values...`); implies `--dataset csv`.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain one encoder and save it under <out>/runs/<model>/pretrain/<seed>.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        model: Model,
        #[arg(long, default_value_t = 41)]
        seed: u64,
    },
    /// Fine-tune and test one grid cell.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        model: Model,
        #[arg(long)]
        ratio: f64,
        #[arg(long, default_value_t = 41)]
        seed: u64,
        /// Start from a random encoder instead of the pretrained one.
        #[arg(long)]
        no_pretrain: bool,
    },
    /// Run (or resume) the whole grid and write report, curves and timing.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Restricts the grid to a single seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Rebuild report, curves and timing from <out>/manifest.json.
    Report {
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the built-in oracle checks.
    Selftest,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let kind = match (common.dataset, &common.csv) {
        (Some(DatasetKind::Synthetic), Some(_)) => {
            return Err(Error::Config("--csv conflicts with --dataset synthetic".into()));
        }
        (_, Some(_)) => Some(DatasetKind::Csv),
        (kind, None) => kind,
    };
    match (kind, &config.dataset) {
        (Some(DatasetKind::Synthetic), DatasetSource::Csv { .. }) => {
            config.dataset = DatasetSource::default();
        }
        (Some(DatasetKind::Csv), current) => {
            let (channels, length, n_classes, old_path) = match current {
                DatasetSource::Csv {
                    channels,
                    length,
                    n_classes,
                    path,
                } => (*channels, *length, *n_classes, Some(path.clone())),
                DatasetSource::Synthetic(_) => (3, 200, 6, None),
            };
            let path = common
                .csv
                .clone()
                .or(old_path)
                .ok_or_else(|| Error::Config("--dataset csv needs --csv <path> or a csv dataset in the config".into()))?;
            config.dataset = DatasetSource::Csv {
                path,
                channels,
                length,
                n_classes,
            };
        }
        _ => {}
    }
    config.validate()?;
    Ok(config)
}

fn prepared(config: &ExperimentConfig) -> Result<(ExperimentConfig, PreparedData)> {
    let data = tsrl_core::experiment::prepare_data(config)?;
    Ok((config.resolved(data.channels()), data))
}

fn pretrain(common: &Common, model: ModelKind, seed: u64) -> Result<()> {
    let (config, data) = prepared(&load_config(common)?)?;
    let artifact = pretrain_model(model, &data, &config, seed)?;
    let dir = pretrain_dir(&common.out, model, seed);
    save_pretrain(&dir, &artifact)?;
    let s = &artifact.summary;
    println!(
        "{model} seed {seed}: {} epochs in {:.1}s, best epoch {}, final loss {:.6}",
        s.history.len(),
        s.seconds,
        s.best_epoch.map_or("-".into(), |e| e.to_string()),
        s.history.last().copied().unwrap_or(f64::NAN)
    );
    println!("saved {}", dir.display());
    Ok(())
}

fn finetune(common: &Common, model: ModelKind, ratio: f64, seed: u64, pretrained: bool) -> Result<()> {
    let mut config = load_config(common)?;
    config.label_ratios = vec![ratio];
    config.validate()?;
    let (config, data) = prepared(&config)?;
    let artifact = if pretrained {
        let dir = pretrain_dir(&common.out, model, seed);
        let found = load_pretrain(&dir).map_err(|e| {
            Error::Data(format!("no pretrained {model} encoder at {} ({e}); run `tsrl pretrain` first", dir.display()))
        })?;
        Some(found)
    } else {
        None
    };
    let key = RunKey {
        model,
        ratio,
        pretrained,
        seed,
    };
    let record = run_cell(key, &data, &config, artifact.as_ref())?;
    let dir = common.out.join("runs").join(key.rel_dir());
    std::fs::create_dir_all(&dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    let path = dir.join("record.json");
    let json = serde_json::to_string_pretty(&record).expect("record serializes");
    std::fs::write(&path, json).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if let Some(m) = &record.metrics {
        println!(
            "{model} ratio {ratio} {} seed {seed}: accuracy {:.4} precision {:.4} recall {:.4} F1 {:.4} AUROC {:.4} AUPRC {:.4}",
            key.flag(),
            m.accuracy,
            m.precision,
            m.recall,
            m.f1,
            m.auroc,
            m.auprc
        );
    }
    println!("saved {}", path.display());
    Ok(())
}

fn sweep(common: &Common, seed: Option<u64>, workers: Option<usize>, verbose: bool) -> Result<()> {
    let mut config = load_config(common)?;
    if let Some(s) = seed {
        config.seeds = vec![s];
    }
    if workers == Some(0) {
        return Err(Error::Config("--workers must be at least 1".into()));
    }
    let outcome = run_experiment(
        &config,
        &RunOptions {
            out_dir: Some(common.out.clone()),
            workers,
            verbose,
        },
    )?;
    write_outputs(&outcome.records, &common.out)?;
    print!("{}", emit_report(&outcome.records)?);
    println!("{}", time_pretraining(&outcome.records));
    let failed = outcome.records.iter().filter(|r| !r.is_complete()).count();
    println!(
        "{} cells trained, {} resumed, {} failed, {} pretraining runs",
        outcome.cells_trained, outcome.cells_skipped, failed, outcome.pretrain_runs
    );
    Ok(())
}

fn report(out: &Path) -> Result<()> {
    let records = read_manifest(out)?;
    write_outputs(&records, out)?;
    print!("{}", emit_report(&records)?);
    println!("{}", time_pretraining(&records));
    Ok(())
}

fn selftest() -> Result<()> {
    let results = run_selftest();
    for r in &results {
        println!("{} {} ({})", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    require_all(&results)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Pretrain { common, model, seed } => pretrain(common, (*model).into(), *seed),
        Command::Finetune {
            common,
            model,
            ratio,
            seed,
            no_pretrain,
        } => finetune(common, (*model).into(), *ratio, *seed, !no_pretrain),
        Command::Sweep {
            common,
            seed,
            workers,
            quiet,
        } => sweep(common, *seed, *workers, !quiet),
        Command::Report { out } => report(out),
        Command::Selftest => selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
