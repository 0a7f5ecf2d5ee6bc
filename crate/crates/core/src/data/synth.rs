use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, TimeSeriesSample};
use crate::error::{Error, Result};
use crate::seed::rng;

/// Parameters of the synthetic multi-class sinusoid dataset.
///
/// Class `k` is a sinusoid with `(k + 1) · base_cycles` periods over the
/// series length on every channel. Per sample, the frequency drifts by a
/// factor from `U(1 − freq_spread, 1 + freq_spread)`; per channel, the phase
/// is drawn from `U(−phase_spread, phase_spread)`, the amplitude is
/// `exp(N(0, amplitude_spread²))` and a constant `N(0, offset_std²)` offset is
/// added. The nuisance terms stand in for subject-to-subject variation.
/// Finally every value gets i.i.d. `N(0, noise_std²)` noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub n_classes: usize,
    pub channels: usize,
    pub length: usize,
    pub noise_std: f64,
    pub base_cycles: f64,
    pub phase_spread: f64,
    pub freq_spread: f64,
    pub amplitude_spread: f64,
    pub offset_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_per_class: 100,
            n_classes: 6,
            channels: 3,
            length: 200,
            noise_std: 0.1,
            base_cycles: 1.0,
            phase_spread: PI / 4.0,
            freq_spread: 0.0,
            amplitude_spread: 0.0,
            offset_std: 0.0,
            seed: 0,
        }
    }
}

pub fn synth_generate(config: &SynthConfig) -> Result<Dataset> {
    if config.n_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", config.n_classes)));
    }
    let spreads = [
        config.noise_std,
        config.phase_spread,
        config.amplitude_spread,
        config.offset_std,
    ];
    if spreads.iter().any(|s| !(*s >= 0.0)) || !(0.0..1.0).contains(&config.freq_spread) {
        return Err(Error::Config(
            "synthetic spreads must be non-negative and freq_spread below 1".into(),
        ));
    }
    // Disabled terms draw nothing, so they leave the random stream untouched.
    let normal = |sd: f64| -> Result<Option<Normal<f64>>> {
        if sd > 0.0 {
            Normal::new(0.0, sd).map(Some).map_err(|e| Error::Config(e.to_string()))
        } else {
            Ok(None)
        }
    };
    let (noise, amplitude, offset) = (
        normal(config.noise_std)?,
        normal(config.amplitude_spread)?,
        normal(config.offset_std)?,
    );
    let draw = |r: &mut rand_chacha::ChaCha8Rng, dist: &Option<Normal<f64>>| dist.map_or(0.0, |d| d.sample(r));
    let uniform = |r: &mut rand_chacha::ChaCha8Rng, spread: f64| {
        if spread > 0.0 {
            r.random_range(-spread..=spread)
        } else {
            0.0
        }
    };
    let mut r = rng(config.seed);
    let (c, d) = (config.channels, config.length);
    let mut samples = Vec::with_capacity(config.n_per_class * config.n_classes);
    for _ in 0..config.n_per_class {
        for class in 0..config.n_classes {
            let drift = 1.0 + uniform(&mut r, config.freq_spread);
            let cycles = (class + 1) as f64 * config.base_cycles * drift;
            let mut values = Vec::with_capacity(c * d);
            for _ in 0..c {
                let phase = uniform(&mut r, config.phase_spread);
                let gain = draw(&mut r, &amplitude).exp();
                let shift = draw(&mut r, &offset);
                for t in 0..d {
                    let clean = gain * (TAU * cycles * t as f64 / d as f64 + phase).sin() + shift;
                    let eps = draw(&mut r, &noise);
                    values.push(clean + eps);
                }
            }
            samples.push(TimeSeriesSample::new(c, d, values, Some(class))?);
        }
    }
    Dataset::new("synthetic", config.n_classes, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_shaped() {
        let cfg = SynthConfig {
            n_per_class: 3,
            noise_std: 0.0,
            ..Default::default()
        };
        let a = synth_generate(&cfg).unwrap();
        assert_eq!(a, synth_generate(&cfg).unwrap());
        assert_eq!(a.len(), 18);
        assert!(a.samples().iter().all(|s| s.shape() == (3, 200)));
        assert_eq!(a.class_counts().unwrap(), vec![3; 6]);
    }

    #[test]
    fn rejects_single_class() {
        let cfg = SynthConfig {
            n_classes: 1,
            ..Default::default()
        };
        assert!(synth_generate(&cfg).is_err());
    }
}
