//! Datasets of fixed-shape multivariate series and the label-aware
//! transforms applied before pretraining.

mod csv;
mod split;
mod synth;

pub use self::csv::{load_csv, write_csv, CsvSchema};
pub use split::{balance_upsample, label_ratio_subset, stratified_split, SplitSpec};
pub use synth::{synth_generate, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One series of `channels × length` values stored channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesSample {
    channels: usize,
    length: usize,
    values: Vec<f64>,
    label: Option<usize>,
}

impl TimeSeriesSample {
    pub fn new(channels: usize, length: usize, values: Vec<f64>, label: Option<usize>) -> Result<Self> {
        if channels == 0 || length == 0 {
            return Err(Error::Data(format!("empty sample shape ({channels}, {length})")));
        }
        if values.len() != channels * length {
            return Err(Error::Data(format!(
                "sample of shape ({channels}, {length}) needs {} values, got {}",
                channels * length,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at position {pos}")));
        }
        Ok(Self {
            channels,
            length,
            values,
            label,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.channels, self.length)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Values of one channel across time.
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * self.length..(c + 1) * self.length]
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    /// Same shape and label with new values. Lengths must match.
    pub(crate) fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.channels, self.length, values, self.label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    n_classes: usize,
    samples: Vec<TimeSeriesSample>,
}

impl Dataset {
    /// Validates that all samples share one shape and labels are in range.
    pub fn new(name: impl Into<String>, n_classes: usize, samples: Vec<TimeSeriesSample>) -> Result<Self> {
        if let Some(first) = samples.first() {
            let shape = first.shape();
            for (i, s) in samples.iter().enumerate() {
                if s.shape() != shape {
                    return Err(Error::Data(format!(
                        "sample {i} has shape {:?}, expected {shape:?}",
                        s.shape()
                    )));
                }
                if let Some(l) = s.label {
                    if l >= n_classes {
                        return Err(Error::Data(format!(
                            "sample {i} label {l} out of range for {n_classes} classes"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            name: name.into(),
            n_classes,
            samples,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn samples(&self) -> &[TimeSeriesSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(channels, length)` shared by every sample.
    pub fn shape(&self) -> Option<(usize, usize)> {
        self.samples.first().map(TimeSeriesSample::shape)
    }

    /// Labels of all samples; errors if any sample is unlabeled.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| s.label.ok_or_else(|| Error::Data(format!("sample {i} has no label"))))
            .collect()
    }

    /// Sample indices grouped by class.
    pub fn class_indices(&self) -> Result<Vec<Vec<usize>>> {
        let mut groups = vec![Vec::new(); self.n_classes];
        for (i, l) in self.labels()?.into_iter().enumerate() {
            groups[l].push(i);
        }
        Ok(groups)
    }

    pub fn class_counts(&self) -> Result<Vec<usize>> {
        Ok(self.class_indices()?.iter().map(Vec::len).collect())
    }

    /// New dataset made of the samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            n_classes: self.n_classes,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    /// Population statistics over every timestamp of every sample.
    pub fn compute(data: &Dataset) -> Result<Self> {
        let (channels, length) = data
            .shape()
            .ok_or_else(|| Error::Data("cannot compute statistics of an empty dataset".into()))?;
        let count = (data.len() * length) as f64;
        let mut mean = vec![0.0; channels];
        let mut std = vec![0.0; channels];
        for c in 0..channels {
            let m = data.samples.iter().flat_map(|s| s.channel(c)).sum::<f64>() / count;
            let var = data
                .samples
                .iter()
                .flat_map(|s| s.channel(c))
                .map(|v| (v - m) * (v - m))
                .sum::<f64>()
                / count;
            if var <= 0.0 {
                return Err(Error::Data(format!("channel {c} has zero variance")));
            }
            mean[c] = m;
            std[c] = var.sqrt();
        }
        Ok(Self { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// Applies `(x − mean) / std` per channel.
pub fn zscore_normalize(data: &Dataset, stats: &NormalizationStats) -> Result<Dataset> {
    map_channels(data, stats, |v, m, s| (v - m) / s)
}

/// Inverse of [`zscore_normalize`].
pub fn zscore_denormalize(data: &Dataset, stats: &NormalizationStats) -> Result<Dataset> {
    map_channels(data, stats, |v, m, s| v * s + m)
}

fn map_channels(
    data: &Dataset,
    stats: &NormalizationStats,
    f: impl Fn(f64, f64, f64) -> f64,
) -> Result<Dataset> {
    if stats.mean.len() != stats.std.len() {
        return Err(Error::Config("normalization stats have mismatched lengths".into()));
    }
    if let Some(pos) = stats.std.iter().position(|&s| s <= 0.0) {
        return Err(Error::Config(format!("std of channel {pos} is not positive")));
    }
    if let Some((channels, _)) = data.shape() {
        if channels != stats.mean.len() {
            return Err(Error::Config(format!(
                "stats cover {} channels, data has {channels}",
                stats.mean.len()
            )));
        }
    }
    let samples = data
        .samples
        .iter()
        .map(|s| {
            let values = s
                .values
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let c = i / s.length;
                    f(v, stats.mean[c], stats.std[c])
                })
                .collect();
            s.with_values(values)
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        name: data.name.clone(),
        n_classes: data.n_classes,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(values: Vec<f64>, label: usize) -> TimeSeriesSample {
        TimeSeriesSample::new(2, values.len() / 2, values, Some(label)).unwrap()
    }

    #[test]
    fn rejects_inconsistent_shapes_and_labels() {
        let a = sample(vec![0.0; 4], 0);
        let b = sample(vec![0.0; 6], 0);
        assert!(Dataset::new("x", 2, vec![a.clone(), b]).is_err());
        let c = sample(vec![0.0; 4], 3);
        assert!(Dataset::new("x", 2, vec![a, c]).is_err());
        assert!(TimeSeriesSample::new(1, 2, vec![0.0, f64::NAN], None).is_err());
    }

    #[test]
    fn identity_stats_leave_data_unchanged() {
        let d = Dataset::new("x", 1, vec![sample(vec![1.0, 2.0, 3.0, 4.0], 0)]).unwrap();
        let n = zscore_normalize(&d, &NormalizationStats::identity(2)).unwrap();
        assert_eq!(n, d);
    }

    #[test]
    fn normalized_channels_have_zero_mean() {
        let d = Dataset::new(
            "x",
            1,
            vec![
                sample(vec![10.0, 12.0, -3.0, -1.0], 0),
                sample(vec![14.0, 16.0, 1.0, 3.0], 0),
            ],
        )
        .unwrap();
        let stats = NormalizationStats::compute(&d).unwrap();
        let n = zscore_normalize(&d, &stats).unwrap();
        let post = NormalizationStats::compute(&n).unwrap();
        for c in 0..2 {
            assert!(post.mean[c].abs() < 1e-12);
            assert!((post.std[c] - 1.0).abs() < 1e-12);
        }
        let back = zscore_denormalize(&n, &stats).unwrap();
        for (a, b) in back.samples()[1].values().iter().zip(d.samples()[1].values()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_variance_and_channel_mismatch_are_errors() {
        let d = Dataset::new("x", 1, vec![sample(vec![1.0, 1.0, 2.0, 3.0], 0)]).unwrap();
        assert!(matches!(NormalizationStats::compute(&d), Err(Error::Data(_))));
        assert!(matches!(
            zscore_normalize(&d, &NormalizationStats::identity(3)),
            Err(Error::Config(_))
        ));
    }
}
