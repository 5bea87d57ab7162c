//! Labeled representation datasets: one row per token occurrence.
//!
//! On disk a dataset is three files sharing a stem: the REPD matrix, a TSV
//! with per-row labels and a JSON metadata object.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{repd, seed};

/// Default number of tokens drawn by [`sample_tokens`].
pub const DEFAULT_SAMPLE_SIZE: usize = 100_000;

const FIXED_COLUMNS: [&str; 4] = ["token", "position", "sentence_id", "task_label"];

/// The JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub model: String,
    pub layer: i64,
    pub masked: bool,
    /// Property name to its ordered label vocabulary.
    pub properties: BTreeMap<String, Vec<String>>,
    pub vocab_size: usize,
    /// REPD file of shape V x d holding the word-prediction matrix.
    #[serde(default)]
    pub decoder_file: Option<PathBuf>,
    /// Optional single-row REPD file holding the decoder bias.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder_bias_file: Option<PathBuf>,
    /// Optional vocabulary file, one token per line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_file: Option<PathBuf>,
}

/// Locations of the three files making up a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPaths {
    pub reps: PathBuf,
    pub labels: PathBuf,
    pub meta: PathBuf,
}

impl DatasetPaths {
    /// Sidecars next to the matrix: `x.repd` -> `x.tsv`, `x.json`.
    pub fn from_reps(reps: impl Into<PathBuf>) -> Self {
        let reps = reps.into();
        DatasetPaths {
            labels: reps.with_extension("tsv"),
            meta: reps.with_extension("json"),
            reps,
        }
    }

    /// Resolves a path named inside the metadata file.
    pub fn resolve(&self, relative: &Path) -> PathBuf {
        if relative.is_absolute() {
            return relative.to_path_buf();
        }
        match self.meta.parent() {
            Some(dir) => dir.join(relative),
            None => relative.to_path_buf(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReprDataset {
    /// n x d representations.
    pub reps: Array2<f32>,
    pub tokens: Vec<String>,
    /// Vocabulary index of the word to predict for each row.
    pub task_labels: Vec<u32>,
    /// Property name to one label per row.
    pub properties: BTreeMap<String, Vec<String>>,
    pub sentence_ids: Vec<u32>,
    pub positions: Vec<u32>,
    pub meta: DatasetMeta,
}

impl ReprDataset {
    pub fn len(&self) -> usize {
        self.reps.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.reps.ncols()
    }

    pub fn property(&self, name: &str) -> Result<&[String]> {
        self.properties
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownProperty(name.to_string()))
    }

    /// Declared label vocabulary of a property.
    pub fn property_vocab(&self, name: &str) -> Result<&[String]> {
        self.meta
            .properties
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownProperty(name.to_string()))
    }

    /// Checks every invariant tying the per-row arrays and metadata together.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let check = |what: &str, len: usize| {
            if len == n {
                Ok(())
            } else {
                Err(Error::Consistency(format!(
                    "{what} has {len} entries but the matrix has {n} rows"
                )))
            }
        };
        check("tokens", self.tokens.len())?;
        check("task_labels", self.task_labels.len())?;
        check("sentence_ids", self.sentence_ids.len())?;
        check("positions", self.positions.len())?;
        for (name, labels) in &self.properties {
            check(&format!("property '{name}'"), labels.len())?;
            let vocab = self.meta.properties.get(name).ok_or_else(|| {
                Error::Consistency(format!("property '{name}' has no declared vocabulary"))
            })?;
            let allowed: BTreeSet<&str> = vocab.iter().map(String::as_str).collect();
            if let Some(bad) = labels.iter().find(|l| !allowed.contains(l.as_str())) {
                return Err(Error::Consistency(format!(
                    "label '{bad}' is not in the vocabulary of property '{name}'"
                )));
            }
        }
        if let Some(&bad) = self
            .task_labels
            .iter()
            .find(|&&t| t as usize >= self.meta.vocab_size)
        {
            return Err(Error::Consistency(format!(
                "task label {bad} out of range for vocabulary of size {}",
                self.meta.vocab_size
            )));
        }
        Ok(())
    }

    /// Rows at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> ReprDataset {
        ReprDataset {
            reps: self.reps.select(Axis(0), indices),
            tokens: indices.iter().map(|&i| self.tokens[i].clone()).collect(),
            task_labels: indices.iter().map(|&i| self.task_labels[i]).collect(),
            properties: self
                .properties
                .iter()
                .map(|(k, v)| (k.clone(), indices.iter().map(|&i| v[i].clone()).collect()))
                .collect(),
            sentence_ids: indices.iter().map(|&i| self.sentence_ids[i]).collect(),
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            meta: self.meta.clone(),
        }
    }

    /// Same rows and labels over a different representation matrix.
    pub fn with_reps(&self, reps: Array2<f32>) -> Result<ReprDataset> {
        if reps.nrows() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                found: reps.nrows(),
            });
        }
        Ok(ReprDataset {
            reps,
            ..self.clone()
        })
    }

    /// Adds (or replaces) a property column and its declared vocabulary.
    pub fn with_property(
        &self,
        name: &str,
        labels: Vec<String>,
        vocab: Vec<String>,
    ) -> Result<ReprDataset> {
        let mut out = self.clone();
        out.properties.insert(name.to_string(), labels);
        out.meta.properties.insert(name.to_string(), vocab);
        out.validate()?;
        Ok(out)
    }
}

/// Loads a dataset whose sidecars sit next to the matrix file.
pub fn load_repr_dataset(path: impl AsRef<Path>) -> Result<ReprDataset> {
    load_with_paths(&DatasetPaths::from_reps(path.as_ref()))
}

pub fn load_with_paths(paths: &DatasetPaths) -> Result<ReprDataset> {
    let reps = repd::read(&paths.reps)?;
    let meta_text = fs::read_to_string(&paths.meta).map_err(|e| Error::io(&paths.meta, e))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text).map_err(|e| Error::Json {
        path: paths.meta.clone(),
        source: e,
    })?;
    let tsv = fs::read_to_string(&paths.labels).map_err(|e| Error::io(&paths.labels, e))?;
    let labels = parse_labels(&tsv, &paths.labels)?;
    if labels.tokens.len() != reps.nrows() {
        return Err(Error::Consistency(format!(
            "{} has {} rows but {} has {} label rows",
            paths.reps.display(),
            reps.nrows(),
            paths.labels.display(),
            labels.tokens.len()
        )));
    }
    let ds = ReprDataset {
        reps,
        tokens: labels.tokens,
        task_labels: labels.task_labels,
        properties: labels.properties,
        sentence_ids: labels.sentence_ids,
        positions: labels.positions,
        meta,
    };
    ds.validate()?;
    Ok(ds)
}

/// Saves next to `path` (see [`DatasetPaths::from_reps`]).
pub fn save_repr_dataset(ds: &ReprDataset, path: impl AsRef<Path>) -> Result<()> {
    save_with_paths(ds, &DatasetPaths::from_reps(path.as_ref()))
}

pub fn save_with_paths(ds: &ReprDataset, paths: &DatasetPaths) -> Result<()> {
    ds.validate()?;
    repd::write(&paths.reps, &ds.reps)?;
    let tsv = format_labels(ds, &paths.labels)?;
    fs::write(&paths.labels, tsv).map_err(|e| Error::io(&paths.labels, e))?;
    let meta = serde_json::to_string_pretty(&ds.meta).expect("metadata serializes");
    fs::write(&paths.meta, meta + "\n").map_err(|e| Error::io(&paths.meta, e))?;
    Ok(())
}

struct LabelColumns {
    tokens: Vec<String>,
    positions: Vec<u32>,
    sentence_ids: Vec<u32>,
    task_labels: Vec<u32>,
    properties: BTreeMap<String, Vec<String>>,
}

fn parse_labels(text: &str, path: &Path) -> Result<LabelColumns> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::format(path, "missing header row"))?
        .split('\t')
        .collect();
    if header.len() < FIXED_COLUMNS.len() || header[..4] != FIXED_COLUMNS {
        return Err(Error::format(
            path,
            format!("header must start with {}", FIXED_COLUMNS.join("\\t")),
        ));
    }
    let prop_names: Vec<String> = header[4..].iter().map(|s| s.to_string()).collect();
    let mut cols = LabelColumns {
        tokens: Vec::new(),
        positions: Vec::new(),
        sentence_ids: Vec::new(),
        task_labels: Vec::new(),
        properties: prop_names.iter().map(|p| (p.clone(), Vec::new())).collect(),
    };
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != header.len() {
            return Err(Error::format(
                path,
                format!(
                    "line {}: expected {} fields, found {}",
                    lineno + 2,
                    header.len(),
                    fields.len()
                ),
            ));
        }
        let int = |s: &str, what: &str| {
            s.parse::<u32>().map_err(|_| {
                Error::format(path, format!("line {}: bad {what} '{s}'", lineno + 2))
            })
        };
        cols.tokens.push(fields[0].to_string());
        cols.positions.push(int(fields[1], "position")?);
        cols.sentence_ids.push(int(fields[2], "sentence_id")?);
        cols.task_labels.push(int(fields[3], "task_label")?);
        for (name, value) in prop_names.iter().zip(&fields[4..]) {
            cols.properties.get_mut(name).unwrap().push(value.to_string());
        }
    }
    Ok(cols)
}

fn format_labels(ds: &ReprDataset, path: &Path) -> Result<String> {
    let clean = |s: &str| -> Result<()> {
        if s.contains(['\t', '\n', '\r']) {
            Err(Error::format(
                path,
                format!("field {s:?} contains a tab or newline"),
            ))
        } else {
            Ok(())
        }
    };
    let mut out = FIXED_COLUMNS.join("\t");
    for name in ds.properties.keys() {
        clean(name)?;
        out.push('\t');
        out.push_str(name);
    }
    out.push('\n');
    for i in 0..ds.len() {
        clean(&ds.tokens[i])?;
        out.push_str(&format!(
            "{}\t{}\t{}\t{}",
            ds.tokens[i], ds.positions[i], ds.sentence_ids[i], ds.task_labels[i]
        ));
        for labels in ds.properties.values() {
            clean(&labels[i])?;
            out.push('\t');
            out.push_str(&labels[i]);
        }
        out.push('\n');
    }
    Ok(out)
}

/// Reads a vocabulary file: one token per line, line number = index.
pub fn load_vocab(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn save_vocab(vocab: &[String], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = vocab.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub label_counts: BTreeMap<String, usize>,
    pub majority_label: String,
    pub majority_fraction: f64,
    pub total: usize,
}

impl LabelStats {
    pub fn fraction(&self, label: &str) -> f64 {
        self.label_counts.get(label).copied().unwrap_or(0) as f64 / self.total as f64
    }
}

/// Label counts and the majority baseline. Ties go to the lexicographically
/// smallest label.
pub fn label_stats<S: AsRef<str>>(labels: &[S]) -> Result<LabelStats> {
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l.as_ref().to_string()).or_default() += 1;
    }
    let mut best: Option<(&String, usize)> = None;
    for (label, &count) in &counts {
        // strict comparison keeps the first (smallest) label on ties
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((label, count));
        }
    }
    let (majority_label, max) = best.expect("non-empty");
    Ok(LabelStats {
        majority_label: majority_label.clone(),
        majority_fraction: max as f64 / labels.len() as f64,
        total: labels.len(),
        label_counts: counts,
    })
}

/// Splits by sentence: every sentence lands wholly in train or in dev.
///
/// The dev side receives `round(dev_fraction * sentences)` sentences, clamped
/// so that neither side is empty.
pub fn split_train_dev(
    ds: &ReprDataset,
    dev_fraction: f64,
    seed: u64,
) -> Result<(ReprDataset, ReprDataset)> {
    if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "dev_fraction must lie in (0, 1), got {dev_fraction}"
        )));
    }
    let sentences: BTreeSet<u32> = ds.sentence_ids.iter().copied().collect();
    if sentences.len() < 2 {
        return Err(Error::TooFewSentences {
            sentences: sentences.len(),
        });
    }
    let mut order: Vec<u32> = sentences.into_iter().collect();
    order.shuffle(&mut seed::rng(seed, seed::stream::SPLIT));
    let n_dev = ((dev_fraction * order.len() as f64).round() as usize).clamp(1, order.len() - 1);
    let dev_set: BTreeSet<u32> = order[..n_dev].iter().copied().collect();
    let (mut train_idx, mut dev_idx) = (Vec::new(), Vec::new());
    for (i, sid) in ds.sentence_ids.iter().enumerate() {
        if dev_set.contains(sid) {
            dev_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    Ok((ds.select(&train_idx), ds.select(&dev_idx)))
}

/// Uniform sample of `k` rows without replacement; rows keep their original
/// relative order.
pub fn sample_tokens(ds: &ReprDataset, k: usize, seed: u64) -> Result<ReprDataset> {
    let n = ds.len();
    if k > n {
        return Err(Error::KTooLarge { k, n });
    }
    let mut rng = seed::rng(seed, seed::stream::SAMPLE);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(ds.select(&idx))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    /// `sentences` sentences of `per_sentence` tokens; one property "tag"
    /// cycling through a/b/c.
    pub(crate) fn toy(sentences: u32, per_sentence: u32, d: usize) -> ReprDataset {
        let n = (sentences * per_sentence) as usize;
        let reps = Array2::from_shape_fn((n, d), |(i, j)| (i * d + j) as f32 * 0.25);
        let tags = ["a", "b", "c"];
        let mut props = BTreeMap::new();
        props.insert(
            "tag".to_string(),
            (0..n).map(|i| tags[i % 3].to_string()).collect(),
        );
        let mut vocabs = BTreeMap::new();
        vocabs.insert("tag".to_string(), tags.iter().map(|s| s.to_string()).collect());
        ReprDataset {
            reps,
            tokens: (0..n).map(|i| format!("w{}", i % 7)).collect(),
            task_labels: (0..n).map(|i| (i % 7) as u32).collect(),
            properties: props,
            sentence_ids: (0..sentences)
                .flat_map(|s| std::iter::repeat_n(s, per_sentence as usize))
                .collect(),
            positions: (0..sentences).flat_map(|_| 0..per_sentence).collect(),
            meta: DatasetMeta {
                model: "toy".into(),
                layer: 0,
                masked: false,
                properties: vocabs,
                vocab_size: 7,
                decoder_file: None,
                decoder_bias_file: None,
                vocab_file: None,
            },
        }
    }

    #[test]
    fn label_stats_majority_and_ties() {
        let s = label_stats(&["a", "a", "b"]).unwrap();
        assert_eq!(s.majority_label, "a");
        assert!((s.majority_fraction - 2.0 / 3.0).abs() < 1e-12);

        let tie = label_stats(&["b", "a", "b", "a"]).unwrap();
        assert_eq!(tie.majority_label, "a");

        let same = label_stats(&["x"; 5]).unwrap();
        assert_eq!(same.majority_fraction, 1.0);

        assert!(matches!(label_stats::<&str>(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.repd");
        let mut ds = toy(4, 3, 5);
        ds.reps[[1, 2]] = f32::from_bits(0x3f80_0001);
        save_repr_dataset(&ds, &path).unwrap();
        let back = load_repr_dataset(&path).unwrap();
        assert_eq!(back, ds);
        for (a, b) in back.reps.iter().zip(ds.reps.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn empty_and_single_value_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let empty = toy(0, 0, 3);
        save_repr_dataset(&empty, dir.path().join("e.repd")).unwrap();
        let back = load_repr_dataset(dir.path().join("e.repd")).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.dim(), 3);

        let mut one = toy(1, 1, 1);
        one.reps = array![[0.5]];
        save_repr_dataset(&one, dir.path().join("o.repd")).unwrap();
        assert_eq!(load_repr_dataset(dir.path().join("o.repd")).unwrap(), one);
    }

    #[test]
    fn overwrite_replaces_old_contents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.repd");
        save_repr_dataset(&toy(10, 4, 8), &path).unwrap();
        let small = toy(1, 2, 2);
        save_repr_dataset(&small, &path).unwrap();
        assert_eq!(load_repr_dataset(&path).unwrap(), small);
    }

    #[test]
    fn truncated_matrix_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.repd");
        save_repr_dataset(&toy(2, 3, 4), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_repr_dataset(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn row_count_mismatch_is_a_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.repd");
        let ds = toy(2, 3, 4);
        save_repr_dataset(&ds, &path).unwrap();
        repd::write(&path, &Array2::zeros((5, 4))).unwrap();
        assert!(matches!(load_repr_dataset(&path), Err(Error::Consistency(_))));
    }

    #[test]
    fn undeclared_labels_are_rejected() {
        let mut ds = toy(2, 3, 2);
        ds.properties.get_mut("tag").unwrap()[0] = "zzz".into();
        assert!(matches!(ds.validate(), Err(Error::Consistency(_))));
        let mut ds = toy(2, 3, 2);
        ds.task_labels[0] = 99;
        assert!(matches!(ds.validate(), Err(Error::Consistency(_))));
    }

    #[test]
    fn split_ten_sentences() {
        let ds = toy(10, 3, 2);
        let (train, dev) = split_train_dev(&ds, 0.1, 3).unwrap();
        let dev_sents: BTreeSet<_> = dev.sentence_ids.iter().collect();
        assert_eq!(dev_sents.len(), 1);
        assert_eq!(train.len() + dev.len(), ds.len());
        let (train2, dev2) = split_train_dev(&ds, 0.1, 3).unwrap();
        assert_eq!(train, train2);
        assert_eq!(dev, dev2);
    }

    #[test]
    fn split_needs_two_sentences() {
        let ds = toy(1, 5, 2);
        assert!(matches!(
            split_train_dev(&ds, 0.5, 0),
            Err(Error::TooFewSentences { sentences: 1 })
        ));
        assert!(split_train_dev(&toy(3, 1, 1), 1.0, 0).is_err());
    }

    #[test]
    fn sample_edge_cases() {
        let ds = toy(20, 10, 2);
        let all = sample_tokens(&ds, ds.len(), 1).unwrap();
        assert_eq!(all, ds);
        assert!(sample_tokens(&ds, 0, 1).unwrap().is_empty());
        assert!(matches!(
            sample_tokens(&ds, ds.len() + 1, 1),
            Err(Error::KTooLarge { .. })
        ));
        let a = sample_tokens(&ds, 100, 1).unwrap();
        let b = sample_tokens(&ds, 100, 2).unwrap();
        assert_ne!(a.reps, b.reps);
        assert_eq!(a, sample_tokens(&ds, 100, 1).unwrap());
    }

    proptest! {
        #[test]
        fn split_partitions_rows_by_sentence(
            sentences in 2u32..40,
            per in 1u32..6,
            frac in 0.05f64..0.95,
            seed in any::<u64>(),
        ) {
            let mut ds = toy(sentences, per, 1);
            // row identity travels through the representation column
            ds.reps = Array2::from_shape_fn((ds.len(), 1), |(i, _)| i as f32);
            let (train, dev) = split_train_dev(&ds, frac, seed).unwrap();
            prop_assert!(!train.is_empty() && !dev.is_empty());
            let mut rows: Vec<u32> = train.reps.iter().chain(dev.reps.iter()).map(|&v| v as u32).collect();
            rows.sort_unstable();
            prop_assert_eq!(rows, (0..ds.len() as u32).collect::<Vec<_>>());
            let a: BTreeSet<_> = train.sentence_ids.iter().collect();
            let b: BTreeSet<_> = dev.sentence_ids.iter().collect();
            prop_assert!(a.is_disjoint(&b));
        }

        #[test]
        fn label_fractions_sum_to_one(labels in proptest::collection::vec("[a-e]", 1..200)) {
            let s = label_stats(&labels).unwrap();
            let total: f64 = s.label_counts.keys().map(|l| s.fraction(l)).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert_eq!(s.label_counts.values().sum::<usize>(), labels.len());
        }
    }
}
