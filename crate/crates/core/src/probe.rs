//! Multiclass linear probes.
//!
//! A probe is a one-vs-rest linear SVM: one weight row per class, trained by
//! seeded SGD on the hinge loss with L2 regularization. Binary properties
//! also get two rows, so an INLP iteration on a binary property removes two
//! directions.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelStats, ReprDataset};
use crate::error::{Error, Result};
use crate::{repd, seed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// L2 regularization strength.
    pub l2: f64,
    pub epochs: usize,
    /// Initial step size; decays linearly to zero over training.
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2: 1e-4,
            epochs: 10,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    /// C x d.
    #[serde(skip)]
    pub weights: Array2<f32>,
    pub biases: Vec<f32>,
    pub label_vocab: Vec<String>,
    pub config: ProbeConfig,
}

impl LinearProbe {
    pub fn num_classes(&self) -> usize {
        self.label_vocab.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Class scores `W h + b`.
    pub fn scores(&self, h: ArrayView1<f32>) -> Array1<f32> {
        self.weights.dot(&h) + &ArrayView1::from(&self.biases)
    }

    /// Index of the highest-scoring class; ties go to the lowest index.
    pub fn predict_index(&self, h: ArrayView1<f32>) -> usize {
        argmax(self.scores(h).iter().copied())
    }

    pub fn predict(&self, h: ArrayView1<f32>) -> &str {
        &self.label_vocab[self.predict_index(h)]
    }
}

/// First index of the maximum; NaNs never win.
pub fn argmax<T: PartialOrd + Copy>(values: impl IntoIterator<Item = T>) -> usize {
    let mut best: Option<(usize, T)> = None;
    for (i, v) in values.into_iter().enumerate() {
        let is_nan = v.partial_cmp(&v).is_none();
        if !is_nan && best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map_or(0, |(i, _)| i)
}

/// Labels present in `labels`, ordered by the declared vocabulary (unknown
/// labels sort after it, lexicographically).
fn class_order(labels: &[String], declared: &[String]) -> Vec<String> {
    let present: BTreeSet<&str> = labels.iter().map(String::as_str).collect();
    let mut out: Vec<String> = declared
        .iter()
        .filter(|l| present.contains(l.as_str()))
        .cloned()
        .collect();
    for l in present {
        if !declared.iter().any(|d| d == l) {
            out.push(l.to_string());
        }
    }
    out
}

pub fn train_linear_probe(
    train: &ReprDataset,
    property: &str,
    config: &ProbeConfig,
) -> Result<LinearProbe> {
    let labels = train.property(property)?;
    let declared = train.property_vocab(property).unwrap_or(&[]);
    let label_vocab = class_order(labels, declared);
    if label_vocab.len() < 2 {
        return Err(Error::DegenerateLabels {
            property: property.to_string(),
        });
    }
    let index: BTreeMap<&str, usize> = label_vocab
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let targets: Vec<usize> = labels.iter().map(|l| index[l.as_str()]).collect();
    let (weights, biases) = fit_hinge_sgd(&train.reps, &targets, label_vocab.len(), config);
    Ok(LinearProbe {
        weights,
        biases,
        label_vocab,
        config: *config,
    })
}

/// One-vs-rest hinge loss with L2, plain SGD with a linearly decaying step.
///
/// Each class's binary subproblem is fit on its own with its own seeded
/// visiting order, so the subproblems run in parallel and the weights do not
/// depend on thread scheduling. Accumulates in f64.
fn fit_hinge_sgd(
    x: &Array2<f32>,
    targets: &[usize],
    classes: usize,
    config: &ProbeConfig,
) -> (Array2<f32>, Vec<f32>) {
    let d = x.ncols();
    let rows: Vec<(Vec<f64>, f64)> = (0..classes)
        .into_par_iter()
        .map(|c| fit_binary_hinge(x, targets, c, config))
        .collect();
    let mut w = Array2::<f32>::zeros((classes, d));
    let mut b = Vec::with_capacity(classes);
    for (c, (wc, bc)) in rows.into_iter().enumerate() {
        for (dst, src) in w.row_mut(c).iter_mut().zip(wc) {
            *dst = src as f32;
        }
        b.push(bc as f32);
    }
    (w, b)
}

fn fit_binary_hinge(
    x: &Array2<f32>,
    targets: &[usize],
    class: usize,
    config: &ProbeConfig,
) -> (Vec<f64>, f64) {
    let (n, d) = x.dim();
    let mut w = vec![0.0f64; d];
    let mut b = 0.0f64;
    let total = (config.epochs * n).max(1) as f64;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut row = vec![0.0f64; d];
    let class_seed = seed::derive(config.seed, seed::stream::PROBE, class as u64);
    for epoch in 0..config.epochs {
        order.shuffle(&mut seed::rng(class_seed, epoch as u64));
        for &i in &order {
            let lr = config.learning_rate * (1.0 - step as f64 / total);
            step += 1;
            for (r, &v) in row.iter_mut().zip(x.row(i)) {
                *r = v as f64;
            }
            let score: f64 = w.iter().zip(&row).map(|(a, b)| a * b).sum::<f64>() + b;
            let y = if targets[i] == class { 1.0 } else { -1.0 };
            let shrink = 1.0 - lr * config.l2;
            if y * score < 1.0 {
                for (wv, &xv) in w.iter_mut().zip(&row) {
                    *wv = *wv * shrink + lr * y * xv;
                }
                b += lr * y;
            } else {
                w.iter_mut().for_each(|wv| *wv *= shrink);
            }
        }
    }
    (w, b)
}

/// Fraction of rows whose prediction equals the gold label. Labels outside
/// the probe's vocabulary count as errors.
pub fn probe_accuracy(probe: &LinearProbe, ds: &ReprDataset, property: &str) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if ds.dim() != probe.dim() {
        return Err(Error::DimensionMismatch {
            expected: probe.dim(),
            found: ds.dim(),
        });
    }
    let gold = ds.property(property)?;
    let correct: usize = (0..ds.len())
        .into_par_iter()
        .filter(|&i| probe.predict(ds.reps.row(i)) == gold[i])
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Control-task labels: every word type gets one label drawn from the
/// empirical property distribution, reused at every occurrence.
pub fn control_task_labels<S: AsRef<str>>(
    tokens: &[S],
    distribution: &LabelStats,
    seed: u64,
) -> Vec<String> {
    let labels: Vec<&String> = distribution.label_counts.keys().collect();
    let weights: Vec<usize> = distribution.label_counts.values().copied().collect();
    let sampler = WeightedIndex::new(&weights).expect("label distribution has positive mass");
    let mut rng = seed::rng(seed, seed::stream::CONTROL_LABELS);
    // sorted types make the assignment independent of corpus order
    let types: BTreeSet<&str> = tokens.iter().map(AsRef::as_ref).collect();
    let assignment: BTreeMap<&str, &String> = types
        .into_iter()
        .map(|t| (t, labels[sampler.sample(&mut rng)]))
        .collect();
    tokens
        .iter()
        .map(|t| assignment[t.as_ref()].clone())
        .collect()
}

/// Writes `<path>` (REPD weights) and `<path>.json` (everything else).
pub fn save_probe(probe: &LinearProbe, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    repd::write(path, &probe.weights)?;
    let json_path = path.with_extension("json");
    let text = serde_json::to_string_pretty(probe).expect("probe serializes");
    fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))
}

pub fn load_probe(path: impl AsRef<Path>) -> Result<LinearProbe> {
    let path = path.as_ref();
    let json_path = path.with_extension("json");
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let mut probe: LinearProbe = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: json_path.clone(),
        source: e,
    })?;
    probe.weights = repd::read(path)?;
    if probe.weights.nrows() != probe.label_vocab.len() || probe.biases.len() != probe.label_vocab.len()
    {
        return Err(Error::Consistency(format!(
            "probe {} has {} weight rows, {} biases and {} labels",
            path.display(),
            probe.weights.nrows(),
            probe.biases.len(),
            probe.label_vocab.len()
        )));
    }
    Ok(probe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{label_stats, split_train_dev, DatasetMeta};
    use proptest::prelude::*;
    use rand::Rng;

    fn labeled(reps: Array2<f32>, labels: Vec<String>, sentence_len: usize) -> ReprDataset {
        let n = reps.nrows();
        let vocab: BTreeSet<String> = labels.iter().cloned().collect();
        ReprDataset {
            reps,
            tokens: (0..n).map(|i| format!("t{i}")).collect(),
            task_labels: vec![0; n],
            properties: [("p".to_string(), labels)].into(),
            sentence_ids: (0..n).map(|i| (i / sentence_len) as u32).collect(),
            positions: (0..n).map(|i| (i % sentence_len) as u32).collect(),
            meta: DatasetMeta {
                model: "test".into(),
                layer: 0,
                masked: false,
                properties: [("p".to_string(), vocab.into_iter().collect())].into(),
                vocab_size: 1,
                decoder_file: None,
                decoder_bias_file: None,
                vocab_file: None,
            },
        }
    }

    fn blobs(n: usize, seed: u64) -> ReprDataset {
        let mut rng = seed::rng(seed, 99);
        let mut reps = Array2::zeros((n, 2));
        let mut labels = Vec::new();
        for i in 0..n {
            let positive = i % 2 == 0;
            let centre = if positive { 2.0 } else { -2.0 };
            reps[[i, 0]] = centre + rng.random_range(-0.5..0.5);
            reps[[i, 1]] = rng.random_range(-1.0..1.0);
            labels.push(if positive { "pos" } else { "neg" }.to_string());
        }
        labeled(reps, labels, 5)
    }

    #[test]
    fn separable_blobs_reach_full_accuracy() {
        let ds = blobs(400, 1);
        let (train, dev) = split_train_dev(&ds, 0.25, 0).unwrap();
        let probe = train_linear_probe(&train, "p", &ProbeConfig::default()).unwrap();
        assert_eq!(probe.weights.dim(), (2, 2));
        assert_eq!(probe_accuracy(&probe, &dev, "p").unwrap(), 1.0);
        assert_eq!(probe_accuracy(&probe, &train, "p").unwrap(), 1.0);
    }

    #[test]
    fn noise_labels_stay_near_chance() {
        for s in 0..5 {
            let mut rng = seed::rng(s, 123);
            let n = 10_000;
            let reps = Array2::from_shape_fn((n, 16), |_| rng.random_range(-1.0f32..1.0));
            let labels = (0..n)
                .map(|_| if rng.random::<bool>() { "x" } else { "y" }.to_string())
                .collect();
            let ds = labeled(reps, labels, 10);
            let (train, dev) = split_train_dev(&ds, 0.2, s).unwrap();
            let probe = train_linear_probe(&train, "p", &ProbeConfig { seed: s, ..Default::default() })
                .unwrap();
            let acc = probe_accuracy(&probe, &dev, "p").unwrap();
            assert!((0.45..=0.55).contains(&acc), "seed {s}: {acc}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = blobs(200, 4);
        let cfg = ProbeConfig { seed: 11, ..Default::default() };
        let a = train_linear_probe(&ds, "p", &cfg).unwrap();
        let b = train_linear_probe(&ds, "p", &cfg).unwrap();
        assert_eq!(a, b);
        let c = train_linear_probe(&ds, "p", &ProbeConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.weights, c.weights);
    }

    #[test]
    fn single_class_is_degenerate() {
        let ds = labeled(Array2::zeros((4, 2)), vec!["a".into(); 4], 2);
        assert!(matches!(
            train_linear_probe(&ds, "p", &ProbeConfig::default()),
            Err(Error::DegenerateLabels { .. })
        ));
    }

    #[test]
    fn majority_probe_scores_majority_fraction() {
        let labels: Vec<String> = ["a", "a", "a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let ds = labeled(Array2::ones((5, 3)), labels.clone(), 5);
        let probe = LinearProbe {
            weights: Array2::zeros((3, 3)),
            biases: vec![1.0, 0.0, 0.0],
            label_vocab: vec!["a".into(), "b".into(), "c".into()],
            config: ProbeConfig::default(),
        };
        let stats = label_stats(&labels).unwrap();
        assert_eq!(probe_accuracy(&probe, &ds, "p").unwrap(), stats.majority_fraction);
    }

    #[test]
    fn unseen_labels_count_as_errors() {
        let labels: Vec<String> = ["a", "zzz"].iter().map(|s| s.to_string()).collect();
        let ds = labeled(Array2::ones((2, 1)), labels, 2);
        let probe = LinearProbe {
            weights: Array2::zeros((2, 1)),
            biases: vec![0.0, 0.0],
            label_vocab: vec!["a".into(), "b".into()],
            config: ProbeConfig::default(),
        };
        assert_eq!(probe_accuracy(&probe, &ds, "p").unwrap(), 0.5);
        assert!(matches!(
            probe_accuracy(&probe, &ds.select(&[]), "p"),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn random_probe_on_balanced_data_is_near_half() {
        let mut rng = seed::rng(5, 5);
        let n = 4000;
        let reps = Array2::from_shape_fn((n, 8), |_| rng.random_range(-1.0f32..1.0));
        let labels = (0..n).map(|i| if i % 2 == 0 { "x" } else { "y" }.to_string()).collect();
        let ds = labeled(reps, labels, 10);
        let probe = LinearProbe {
            weights: Array2::from_shape_fn((2, 8), |_| rng.random_range(-1.0f32..1.0)),
            biases: vec![0.0, 0.0],
            label_vocab: vec!["x".into(), "y".into()],
            config: ProbeConfig::default(),
        };
        let acc = probe_accuracy(&probe, &ds, "p").unwrap();
        assert!((acc - 0.5).abs() <= 0.05, "{acc}");
    }

    #[test]
    fn control_labels_are_type_consistent_and_seeded() {
        let tokens = ["the", "dog", "ran", "the", "cat", "ran"];
        let stats = label_stats(&["N", "N", "V", "D"]).unwrap();
        let a = control_task_labels(&tokens, &stats, 9);
        assert_eq!(a[2], a[5]);
        assert_eq!(a[0], a[3]);
        assert_eq!(a, control_task_labels(&tokens, &stats, 9));
    }

    #[test]
    fn control_marginal_tracks_distribution() {
        // one occurrence per type, so the marginal over rows is the marginal over types
        let tokens: Vec<String> = (0..10_000).map(|i| format!("w{i}")).collect();
        let gold: Vec<&str> = ["A"; 50].iter().chain(&["B"; 30]).chain(&["C"; 20]).copied().collect();
        let stats = label_stats(&gold).unwrap();
        let ctrl = control_task_labels(&tokens, &stats, 4);
        let got = label_stats(&ctrl).unwrap();
        for label in ["A", "B", "C"] {
            assert!((got.fraction(label) - stats.fraction(label)).abs() < 0.02, "{label}");
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let probe = train_linear_probe(&blobs(100, 2), "p", &ProbeConfig::default()).unwrap();
        let path = dir.path().join("probe.repd");
        save_probe(&probe, &path).unwrap();
        assert_eq!(load_probe(&path).unwrap(), probe);
    }

    proptest! {
        #[test]
        fn argmax_is_scale_invariant(
            w in proptest::collection::vec(-5.0f32..5.0, 12),
            b in proptest::collection::vec(-5.0f32..5.0, 3),
            h in proptest::collection::vec(-5.0f32..5.0, 4),
            scale in prop_oneof![Just(0.5f32), Just(2.0f32), Just(4.0f32)],
        ) {
            let probe = LinearProbe {
                weights: Array2::from_shape_vec((3, 4), w).unwrap(),
                biases: b,
                label_vocab: vec!["a".into(), "b".into(), "c".into()],
                config: ProbeConfig::default(),
            };
            let scaled = LinearProbe {
                weights: probe.weights.mapv(|v| v * scale),
                biases: probe.biases.iter().map(|v| v * scale).collect(),
                ..probe.clone()
            };
            let h = Array1::from(h);
            prop_assert_eq!(probe.predict_index(h.view()), scaled.predict_index(h.view()));
        }
    }
}
