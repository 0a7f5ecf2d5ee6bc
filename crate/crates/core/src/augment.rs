//! Jittering, patch tiling and random patch masking.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesSample;
use crate::error::{Error, Result};
use crate::seed::rng;

/// Adds i.i.d. `N(0, sigma²)` noise to every value. The label is kept.
pub fn jitter(x: &TimeSeriesSample, sigma: f64, seed: u64) -> Result<TimeSeriesSample> {
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("jitter sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut r = rng(seed);
    let values = x.values().iter().map(|v| v + normal.sample(&mut r)).collect();
    x.with_values(values)
}

/// A series cut into non-overlapping `channels × patch_len` patches, in
/// temporal order. Each patch is stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    patches: Vec<Vec<f64>>,
    patch_len: usize,
    channels: usize,
    label: Option<usize>,
}

impl PatchGrid {
    pub fn new(patches: Vec<Vec<f64>>, channels: usize, patch_len: usize, label: Option<usize>) -> Result<Self> {
        let size = channels * patch_len;
        if let Some(i) = patches.iter().position(|p| p.len() != size) {
            return Err(Error::Contract(format!(
                "patch {i} has {} values, expected {size}",
                patches[i].len()
            )));
        }
        Ok(Self {
            patches,
            patch_len,
            channels,
            label,
        })
    }

    pub fn patches(&self) -> &[Vec<f64>] {
        &self.patches
    }

    pub fn n_patches(&self) -> usize {
        self.patches.len()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_len
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Values per patch (`channels · patch_len`).
    pub fn patch_size(&self) -> usize {
        self.channels * self.patch_len
    }

    /// Source shape `(channels, n_patches · patch_len)`.
    pub fn source_shape(&self) -> (usize, usize) {
        (self.channels, self.n_patches() * self.patch_len)
    }

    /// All patches concatenated in order.
    pub fn flatten(&self) -> Vec<f64> {
        self.patches.concat()
    }
}

pub fn patchify(x: &TimeSeriesSample, patch_len: usize) -> Result<PatchGrid> {
    let (c, d) = x.shape();
    if patch_len == 0 || d % patch_len != 0 {
        return Err(Error::Tiling {
            length: d,
            patch_len,
        });
    }
    let patches = (0..d / patch_len)
        .map(|p| {
            (0..c)
                .flat_map(|ch| &x.channel(ch)[p * patch_len..(p + 1) * patch_len])
                .copied()
                .collect()
        })
        .collect();
    PatchGrid::new(patches, c, patch_len, x.label())
}

pub fn unpatchify(grid: &PatchGrid) -> Result<TimeSeriesSample> {
    if grid.patches.is_empty() {
        return Err(Error::Contract("cannot reassemble an empty patch grid".into()));
    }
    let (c, d) = grid.source_shape();
    let l = grid.patch_len;
    let mut values = vec![0.0; c * d];
    for (p, patch) in grid.patches.iter().enumerate() {
        for ch in 0..c {
            values[ch * d + p * l..ch * d + (p + 1) * l].copy_from_slice(&patch[ch * l..(ch + 1) * l]);
        }
    }
    TimeSeriesSample::new(c, d, values, grid.label)
}

/// Flattened patch tokens for a batch: `[batch · n_patches · patch_size]`
/// laid out as `[batch, n_patches, patch_size]`.
pub fn patch_tokens(samples: &[&TimeSeriesSample], patch_len: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for s in samples {
        out.extend(patchify(s, patch_len)?.flatten());
    }
    Ok(out)
}

/// Which patches the encoder sees and which it must reconstruct.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    visible: Vec<usize>,
    masked: Vec<usize>,
}

impl MaskPlan {
    /// Builds a plan from an explicit masked set over `n_patches` patches.
    pub fn from_masked(n_patches: usize, masked: &[usize]) -> Result<Self> {
        let mut is_masked = vec![false; n_patches];
        for &m in masked {
            if m >= n_patches || std::mem::replace(&mut is_masked[m], true) {
                return Err(Error::Contract(format!("invalid masked index {m} for {n_patches} patches")));
            }
        }
        let visible: Vec<usize> = (0..n_patches).filter(|&i| !is_masked[i]).collect();
        if visible.is_empty() {
            return Err(Error::Config("mask plan leaves no visible patch".into()));
        }
        let masked = (0..n_patches).filter(|&i| is_masked[i]).collect();
        Ok(Self { visible, masked })
    }

    pub fn all_visible(n_patches: usize) -> Self {
        Self {
            visible: (0..n_patches).collect(),
            masked: Vec::new(),
        }
    }

    pub fn visible(&self) -> &[usize] {
        &self.visible
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn n_patches(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    pub fn mask_ratio(&self) -> f64 {
        self.masked.len() as f64 / self.n_patches() as f64
    }

    /// Patch indices in "plan order": visible first, then masked.
    pub fn plan_order(&self) -> Vec<usize> {
        self.visible.iter().chain(&self.masked).copied().collect()
    }

    /// Inverse of [`plan_order`](Self::plan_order): for each temporal
    /// position, its slot in plan order.
    pub fn restore_index(&self) -> Vec<usize> {
        let mut restore = vec![0; self.n_patches()];
        for (slot, p) in self.plan_order().into_iter().enumerate() {
            restore[p] = slot;
        }
        restore
    }
}

/// Masks `round(mask_ratio · n_patches)` patches chosen uniformly without
/// replacement.
pub fn sample_mask(n_patches: usize, mask_ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Error::Config(format!("mask ratio {mask_ratio} not in [0, 1)")));
    }
    let n_masked = masked_count(n_patches, mask_ratio);
    if n_masked >= n_patches {
        return Err(Error::Config(format!(
            "mask ratio {mask_ratio} leaves no visible patch out of {n_patches}"
        )));
    }
    let mut order: Vec<usize> = (0..n_patches).collect();
    order.shuffle(&mut rng(seed));
    MaskPlan::from_masked(n_patches, &order[..n_masked])
}

pub fn masked_count(n_patches: usize, mask_ratio: f64) -> usize {
    (mask_ratio * n_patches as f64).round() as usize
}

/// The visible patches, in temporal order.
pub fn gather_visible(grid: &PatchGrid, plan: &MaskPlan) -> Result<Vec<Vec<f64>>> {
    if plan.n_patches() != grid.n_patches() {
        return Err(Error::Contract(format!(
            "plan covers {} patches, grid has {}",
            plan.n_patches(),
            grid.n_patches()
        )));
    }
    plan.visible
        .iter()
        .map(|&i| {
            grid.patches
                .get(i)
                .cloned()
                .ok_or_else(|| Error::Contract(format!("patch index {i} out of range")))
        })
        .collect()
}

/// Reassembles a temporally ordered grid from patches given in plan order
/// (visible first, then masked).
pub fn scatter_reconstruction(
    predicted: Vec<Vec<f64>>,
    plan: &MaskPlan,
    channels: usize,
    patch_len: usize,
) -> Result<PatchGrid> {
    if predicted.len() != plan.n_patches() {
        return Err(Error::Contract(format!(
            "expected {} predicted patches, got {}",
            plan.n_patches(),
            predicted.len()
        )));
    }
    let mut slots: Vec<Option<Vec<f64>>> = predicted.into_iter().map(Some).collect();
    let patches = plan
        .restore_index()
        .into_iter()
        .map(|slot| slots[slot].take().expect("restore index is a permutation"))
        .collect();
    PatchGrid::new(patches, channels, patch_len, None)
}
