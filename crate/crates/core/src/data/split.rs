use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng, TAG_SHUFFLE, TAG_SUBSET};

/// Fractions of the pretraining, validation and test splits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub pretrain: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            pretrain: 0.58,
            valid: 0.14,
            test: 0.28,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("pretrain", self.pretrain), ("valid", self.valid), ("test", self.test)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("{name} fraction {f} not in (0, 1)")));
            }
        }
        let total = self.pretrain + self.valid + self.test;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {total}, not 1")));
        }
        Ok(())
    }
}

/// Per-class proportional split into (pretrain, valid, test).
///
/// Within each class the members are shuffled with the seed; the validation
/// and test shares are `round(n · fraction)` (at least one each) and the
/// pretraining split takes the rest. Each split keeps the original sample
/// order.
pub fn stratified_split(data: &Dataset, spec: &SplitSpec, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (class, mut members) in data.class_indices()?.into_iter().enumerate() {
        let n = members.len();
        if n < 3 {
            return Err(Error::Split(format!("class {class} has {n} samples, need at least 3")));
        }
        members.shuffle(&mut rng(derive_seed(seed, &[TAG_SHUFFLE, class as u64])));
        let n_valid = ((n as f64 * spec.valid).round() as usize).max(1);
        let n_test = ((n as f64 * spec.test).round() as usize).max(1);
        let n_pre = n
            .checked_sub(n_valid + n_test)
            .filter(|&p| p >= 1)
            .ok_or_else(|| Error::Split(format!("class {class} too small for split {spec:?}")))?;
        parts[0].extend_from_slice(&members[..n_pre]);
        parts[1].extend_from_slice(&members[n_pre..n_pre + n_valid]);
        parts[2].extend_from_slice(&members[n_pre + n_valid..]);
    }
    let [mut pre, mut valid, mut test] = parts;
    for p in [&mut pre, &mut valid, &mut test] {
        p.sort_unstable();
    }
    Ok((data.select(&pre), data.select(&valid), data.select(&test)))
}

/// Upsamples every class to the size of the largest one by drawing extra
/// copies with replacement. All originals are kept, in order, followed by
/// the drawn copies.
pub fn balance_upsample(data: &Dataset, seed: u64) -> Result<Dataset> {
    let groups = data.class_indices()?;
    if let Some(empty) = groups.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("class {empty} has no samples")));
    }
    let target = groups.iter().map(Vec::len).max().unwrap_or(0);
    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut r = rng(derive_seed(seed, &[TAG_SUBSET, u64::MAX]));
    for members in &groups {
        for _ in members.len()..target {
            indices.push(members[r.random_range(0..members.len())]);
        }
    }
    Ok(data.select(&indices))
}

/// Stratified subset of `⌈ratio · class_count⌉` samples per class.
///
/// Each class is drawn from a seed-fixed permutation, so for one seed a
/// smaller ratio always yields a subset of a larger one.
pub fn label_ratio_subset(data: &Dataset, ratio: f64, seed: u64) -> Result<Dataset> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("label ratio {ratio} not in (0, 1]")));
    }
    let mut keep = Vec::new();
    for (class, mut members) in data.class_indices()?.into_iter().enumerate() {
        // 1e-9 absorbs products such as 0.1 · 60 = 6.000000000000001
        let take = ((members.len() as f64 * ratio - 1e-9).ceil() as usize).min(members.len());
        members.shuffle(&mut rng(derive_seed(seed, &[TAG_SUBSET, class as u64])));
        keep.extend_from_slice(&members[..take]);
    }
    keep.sort_unstable();
    Ok(data.select(&keep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TimeSeriesSample;

    fn dataset(counts: &[usize]) -> Dataset {
        let mut samples = Vec::new();
        let mut id = 0.0;
        for (class, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                samples.push(TimeSeriesSample::new(1, 2, vec![id, -id], Some(class)).unwrap());
                id += 1.0;
            }
        }
        Dataset::new("t", counts.len(), samples).unwrap()
    }

    fn ids(d: &Dataset) -> Vec<i64> {
        let mut v: Vec<i64> = d.samples().iter().map(|s| s.values()[0] as i64).collect();
        v.sort_unstable();
        v
    }

    #[test]
    fn exact_divisible_split() {
        let d = dataset(&[50, 50]);
        let (p, v, t) = stratified_split(&d, &SplitSpec::default(), 3).unwrap();
        assert_eq!((p.len(), v.len(), t.len()), (58, 14, 28));
        assert_eq!(p.class_counts().unwrap(), vec![29, 29]);
        assert_eq!(v.class_counts().unwrap(), vec![7, 7]);
        assert_eq!(t.class_counts().unwrap(), vec![14, 14]);
        let mut all = [ids(&p), ids(&v), ids(&t)].concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn split_is_seeded() {
        let d = dataset(&[20, 30]);
        let a = stratified_split(&d, &SplitSpec::default(), 1).unwrap();
        let b = stratified_split(&d, &SplitSpec::default(), 1).unwrap();
        let c = stratified_split(&d, &SplitSpec::default(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(ids(&a.0), ids(&c.0));
    }

    #[test]
    fn tiny_class_is_rejected() {
        let d = dataset(&[10, 2]);
        assert!(matches!(
            stratified_split(&d, &SplitSpec::default(), 0),
            Err(Error::Split(_))
        ));
        let bad = SplitSpec {
            pretrain: 0.5,
            valid: 0.5,
            test: 0.5,
        };
        assert!(matches!(stratified_split(&d, &bad, 0), Err(Error::Config(_))));
    }

    #[test]
    fn upsample_keeps_originals() {
        let d = dataset(&[10, 4]);
        let b = balance_upsample(&d, 9).unwrap();
        assert_eq!(b.class_counts().unwrap(), vec![10, 10]);
        assert_eq!(&b.samples()[..14], d.samples());
        let balanced = dataset(&[5, 5]);
        assert_eq!(balance_upsample(&balanced, 9).unwrap(), balanced);
        assert!(matches!(balance_upsample(&dataset(&[3, 0]), 1), Err(Error::Data(_))));
    }

    #[test]
    fn ratio_subset_ceil_and_nesting() {
        let d = dataset(&[979, 979]);
        let s = label_ratio_subset(&d, 0.01, 4).unwrap();
        assert_eq!(s.class_counts().unwrap(), vec![10, 10]);
        assert_eq!(label_ratio_subset(&d, 1.0, 4).unwrap(), d);
        let big = label_ratio_subset(&d, 0.1, 4).unwrap();
        let small_ids = ids(&s);
        let big_ids = ids(&big);
        assert!(small_ids.iter().all(|i| big_ids.contains(i)));
        let sixty = dataset(&[60]);
        assert_eq!(label_ratio_subset(&sixty, 0.1, 0).unwrap().len(), 6);
        assert!(label_ratio_subset(&d, 0.0, 0).is_err());
        assert!(label_ratio_subset(&d, 1.5, 0).is_err());
    }
}
