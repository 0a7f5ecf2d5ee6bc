use std::fmt;
use std::fs;
use std::path::Path;

use super::config::ModelKind;
use super::run::RunRecord;
use crate::error::{Error, Result};
use crate::evaluate::{aggregate_seeds, Metrics, MetricsReport};

/// Seed-aggregated results for one `(model, ratio, pretrained)` row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: ModelKind,
    pub ratio: f64,
    pub pretrained: bool,
    /// `None` when every seed of the row failed.
    pub report: Option<MetricsReport>,
}

/// Rows ordered model → ratio (ascending) → w/ before w/o. Models keep
/// their order of first appearance.
pub fn report_rows(records: &[RunRecord]) -> Result<Vec<ReportRow>> {
    let mut models: Vec<ModelKind> = Vec::new();
    for r in records {
        if !models.contains(&r.key.model) {
            models.push(r.key.model);
        }
    }
    let mut ratios: Vec<f64> = records.iter().map(|r| r.key.ratio).collect();
    ratios.sort_by(f64::total_cmp);
    ratios.dedup();
    let mut rows = Vec::new();
    for &model in &models {
        for &ratio in &ratios {
            for pretrained in [true, false] {
                let group: Vec<&RunRecord> = records
                    .iter()
                    .filter(|r| r.key.model == model && r.key.ratio == ratio && r.key.pretrained == pretrained)
                    .collect();
                if group.is_empty() {
                    continue;
                }
                let metrics: Vec<Metrics> = group.iter().filter_map(|r| r.metrics).collect();
                let report = if metrics.is_empty() {
                    None
                } else {
                    Some(aggregate_seeds(&metrics)?)
                };
                rows.push(ReportRow {
                    model,
                    ratio,
                    pretrained,
                    report,
                });
            }
        }
    }
    Ok(rows)
}

fn pretrain_label(pretrained: bool) -> &'static str {
    if pretrained {
        "w"
    } else {
        "w/o"
    }
}

/// Report table as CSV. Each metric cell is `mean±std` over seeds at full
/// precision; rows whose seeds all failed read `failed`.
pub fn emit_report(records: &[RunRecord]) -> Result<String> {
    let mut out = String::from("Model,Ratio,Pretrain");
    for name in Metrics::NAMES {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for row in report_rows(records)? {
        out.push_str(&format!("{},{},{}", row.model, row.ratio, pretrain_label(row.pretrained)));
        match &row.report {
            Some(r) => {
                for (m, s) in r.mean.to_array().iter().zip(r.std.to_array()) {
                    out.push_str(&format!(",{m}±{s}"));
                }
            }
            None => out.push_str(&",failed".repeat(6)),
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_report(records: &[RunRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, emit_report(records)?).map_err(|e| Error::io(path, e))
}

/// Writes `report.csv`, `curves/` and `timing.txt` under `out`.
pub fn write_outputs(records: &[RunRecord], out: impl AsRef<Path>) -> Result<()> {
    let out = out.as_ref();
    write_report(records, out.join("report.csv"))?;
    emit_curves(records, out.join("curves"))?;
    let path = out.join("timing.txt");
    fs::write(&path, format!("{}\n", time_pretraining(records))).map_err(|e| Error::io(&path, e))
}

/// Per-run `epoch,f1` files named `<model>_<ratio>_<flag>_<seed>.csv`, plus
/// `summary.csv` (`ratio,model,pretrain,mean_f1`) whose means are the report's
/// test F1 means.
pub fn emit_curves(records: &[RunRecord], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in records.iter().filter(|r| r.is_complete()) {
        let k = &r.key;
        let path = dir.join(format!("{}_{}_{}_{}.csv", k.model.key(), k.ratio, k.flag(), k.seed));
        let mut text = String::from("epoch,f1\n");
        for (e, f1) in r.curve.iter().enumerate() {
            text.push_str(&format!("{},{f1}\n", e + 1));
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("summary.csv");
    fs::write(&path, curve_summary(records)?).map_err(|e| Error::io(&path, e))
}

pub fn curve_summary(records: &[RunRecord]) -> Result<String> {
    let mut text = String::from("ratio,model,pretrain,mean_f1\n");
    for row in report_rows(records)? {
        let f1 = row.report.map_or_else(|| "failed".to_string(), |r| r.mean.f1.to_string());
        text.push_str(&format!(
            "{},{},{},{f1}\n",
            row.ratio,
            row.model,
            pretrain_label(row.pretrained)
        ));
    }
    Ok(text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingSummary {
    pub simclr_seconds: Option<f64>,
    pub mae_seconds: Option<f64>,
}

impl TimingSummary {
    /// MAE wall-clock as a fraction of SimCLR's.
    pub fn ratio(&self) -> Option<f64> {
        Some(self.mae_seconds? / self.simclr_seconds?)
    }

    /// How much faster MAE is, as a fraction (`1 − ratio`).
    pub fn speedup(&self) -> Option<f64> {
        self.ratio().map(|r| 1.0 - r)
    }
}

impl fmt::Display for TimingSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, secs) in [("SimCLR", self.simclr_seconds), ("MAE", self.mae_seconds)] {
            match secs {
                Some(s) => writeln!(f, "{name} mean pretraining time: {s:.3} s")?,
                None => writeln!(f, "{name} mean pretraining time: absent")?,
            }
        }
        match (self.ratio(), self.speedup()) {
            (Some(r), Some(s)) => write!(f, "MAE/SimCLR time ratio: {r:.4} (MAE {:.1}% faster)", s * 100.0),
            _ => write!(f, "MAE/SimCLR time ratio: unavailable (a model is missing)"),
        }
    }
}

/// Mean pretraining wall-clock per model, each pretraining run counted once.
pub fn time_pretraining(records: &[RunRecord]) -> TimingSummary {
    let mean_for = |model: ModelKind| {
        let mut seen: Vec<(u64, f64)> = Vec::new();
        for r in records.iter().filter(|r| r.key.model == model && r.key.pretrained) {
            if let Some(s) = r.pretrain_seconds {
                if !seen.iter().any(|(seed, _)| *seed == r.key.seed) {
                    seen.push((r.key.seed, s));
                }
            }
        }
        (!seen.is_empty()).then(|| seen.iter().map(|(_, s)| s).sum::<f64>() / seen.len() as f64)
    };
    TimingSummary {
        simclr_seconds: mean_for(ModelKind::Simclr),
        mae_seconds: mean_for(ModelKind::Mae),
    }
}
