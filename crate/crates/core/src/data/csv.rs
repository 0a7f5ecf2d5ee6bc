//! CSV ingestion.
//!
//! Layout: a header line `label,v0,...,v{c·d−1}` followed by one sample per
//! row. Values are flattened channel-major (all timestamps of channel 0,
//! then channel 1, ...). Without a label column the header starts at `v0`.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, TimeSeriesSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub channels: usize,
    pub length: usize,
    /// Whether the first column holds an integer class label.
    #[serde(default = "default_true")]
    pub label_column: bool,
    /// Number of classes; inferred as `max label + 1` when absent.
    #[serde(default)]
    pub n_classes: Option<usize>,
}

fn default_true() -> bool {
    true
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let width = schema.channels * schema.length;
    let expected = width + usize::from(schema.label_column);
    let mut samples = Vec::new();
    let mut max_label = None;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        if record.len() != expected {
            return Err(Error::Parse {
                row,
                message: format!("expected {expected} fields, found {}", record.len()),
            });
        }
        let mut fields = record.iter();
        let label = if schema.label_column {
            let raw = fields.next().unwrap_or_default();
            let l: usize = raw.parse().map_err(|_| Error::Parse {
                row,
                message: format!("invalid label `{raw}`"),
            })?;
            if let Some(n) = schema.n_classes {
                if l >= n {
                    return Err(Error::Data(format!("row {row}: label {l} out of range for {n} classes")));
                }
            }
            max_label = max_label.max(Some(l));
            Some(l)
        } else {
            None
        };
        let values = fields
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    row,
                    message: format!("invalid number `{f}`"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("row {row}: non-finite value at column {pos}")));
        }
        samples.push(TimeSeriesSample::new(schema.channels, schema.length, values, label)?);
    }
    let n_classes = schema
        .n_classes
        .unwrap_or_else(|| max_label.map_or(0, |m| m + 1));
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, n_classes, samples)
}

/// Writes `data` in the layout read by [`load_csv`].
pub fn write_csv(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let mut out = File::create(path).map_err(|e| Error::io(path, e))?;
    let width = data.shape().map_or(0, |(c, d)| c * d);
    let labeled = data.samples().iter().all(|s| s.label().is_some());
    let mut header: Vec<String> = Vec::with_capacity(width + 1);
    if labeled {
        header.push("label".into());
    }
    header.extend((0..width).map(|i| format!("v{i}")));
    let mut text = header.join(",");
    text.push('\n');
    for s in data.samples() {
        let mut fields: Vec<String> = Vec::with_capacity(width + 1);
        if labeled {
            fields.push(s.label().unwrap_or_default().to_string());
        }
        fields.extend(s.values().iter().map(|v| v.to_string()));
        text.push_str(&fields.join(","));
        text.push('\n');
    }
    out.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
