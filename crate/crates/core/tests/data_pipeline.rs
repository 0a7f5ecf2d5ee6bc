//! Splitting, subsetting, normalisation and CSV round trips.

use proptest::prelude::*;
use tsrl_core::data::{
    label_ratio_subset, load_csv, stratified_split, synth_generate, write_csv, zscore_denormalize, zscore_normalize,
    CsvSchema, Dataset, NormalizationStats, SplitSpec, SynthConfig, TimeSeriesSample,
};

/// Samples tagged by index in their first value so identity survives splits.
fn tagged(counts: &[usize], length: usize) -> Dataset {
    let mut samples = Vec::new();
    let mut id = 0.0;
    for (class, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            let mut v = vec![id];
            v.extend((1..2 * length).map(|t| (t as f64 * 0.7 + id).sin()));
            samples.push(TimeSeriesSample::new(2, length, v, Some(class)).unwrap());
            id += 1.0;
        }
    }
    Dataset::new("tagged", counts.len(), samples).unwrap()
}

fn ids(d: &Dataset) -> Vec<usize> {
    d.samples().iter().map(|s| s.values()[0] as usize).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn split_partitions_with_class_proportions(counts in prop::collection::vec(3usize..80, 2..5), seed in any::<u64>()) {
        let data = tagged(&counts, 4);
        let spec = SplitSpec::default();
        let (p, v, t) = stratified_split(&data, &spec, seed).unwrap();
        let mut all = [ids(&p), ids(&v), ids(&t)].concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..data.len()).collect::<Vec<_>>());
        for (part, frac) in [(&p, spec.pretrain), (&v, spec.valid), (&t, spec.test)] {
            for (k, &n) in part.class_counts().unwrap().iter().enumerate() {
                let share = n as f64 / counts[k] as f64;
                // Rounding moves at most one sample per split, plus one when
                // a tiny class forces at least one validation/test sample.
                prop_assert!((share - frac).abs() <= 2.0 / counts[k] as f64 + 1e-12,
                    "class {} share {} vs {}", k, share, frac);
            }
        }
        prop_assert_eq!(stratified_split(&data, &spec, seed).unwrap(), (p, v, t));
    }

    #[test]
    fn larger_ratio_never_shrinks_classes(counts in prop::collection::vec(1usize..200, 2..5), a in 0.001f64..1.0, b in 0.001f64..1.0, seed in any::<u64>()) {
        let data = tagged(&counts, 2);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = label_ratio_subset(&data, lo, seed).unwrap();
        let big = label_ratio_subset(&data, hi, seed).unwrap();
        for (s, l) in small.class_counts().unwrap().iter().zip(big.class_counts().unwrap()) {
            prop_assert!(*s >= 1 && *s <= l);
        }
        let big_ids = ids(&big);
        prop_assert!(ids(&small).iter().all(|i| big_ids.contains(i)));
    }

    #[test]
    fn zscore_round_trip(seed in 0u64..1000) {
        let data = synth_generate(&SynthConfig { n_per_class: 3, seed, ..Default::default() }).unwrap();
        let stats = NormalizationStats::compute(&data).unwrap();
        let back = zscore_denormalize(&zscore_normalize(&data, &stats).unwrap(), &stats).unwrap();
        for (x, y) in data.samples().iter().zip(back.samples()) {
            for (a, b) in x.values().iter().zip(y.values()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }
}

#[test]
fn csv_round_trip_is_exact() {
    let data = synth_generate(&SynthConfig {
        n_per_class: 2,
        ..Default::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("har.csv");
    write_csv(&path, &data).unwrap();
    let schema = CsvSchema {
        channels: 3,
        length: 200,
        label_column: true,
        n_classes: Some(6),
    };
    let back = load_csv(&path, &schema).unwrap();
    assert_eq!(back.samples(), data.samples());
}

#[test]
fn synthetic_split_sizes_at_desk_scale() {
    let data = synth_generate(&SynthConfig {
        n_per_class: 103,
        ..Default::default()
    })
    .unwrap();
    let (p, v, t) = stratified_split(&data, &SplitSpec::default(), 0).unwrap();
    assert_eq!((p.len(), v.len(), t.len()), (360, 84, 174));
    assert_eq!(p.class_counts().unwrap(), vec![60; 6]);
}

#[test]
fn synthetic_classes_are_separable_by_nearest_centroid() {
    let data = synth_generate(&SynthConfig::default()).unwrap();
    let (train, _, test) = stratified_split(&data, &SplitSpec::default(), 0).unwrap();
    let k = data.n_classes();
    let width = train.samples()[0].values().len();
    let mut centroids = vec![vec![0.0; width]; k];
    let counts = train.class_counts().unwrap();
    for s in train.samples() {
        let c = s.label().unwrap();
        for (acc, v) in centroids[c].iter_mut().zip(s.values()) {
            *acc += v / counts[c] as f64;
        }
    }
    let nearest = |x: &[f64]| {
        let dist = |c: &Vec<f64>| c.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        (0..k).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap()
    };
    let correct = test.samples().iter().filter(|s| nearest(s.values()) == s.label().unwrap()).count();
    let accuracy = correct as f64 / test.len() as f64;
    assert!(accuracy > 0.9, "nearest-centroid accuracy {accuracy}");
}
