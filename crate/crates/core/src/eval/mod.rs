//! Behavioral metrics: word-prediction accuracy and KL divergence before and
//! after an intervention, per-label breakdowns, label-vs-rest removal and
//! the probe-accuracy/impact correlation.

mod correlation;
mod decoder;
mod report;

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use correlation::{probe_vs_impact_correlation, spearman, Correlation, PValueMethod, EXACT_MAX_N};
pub use decoder::{bias_path, decode_distribution, Decoder};
pub use report::{
    per_label_tsv, reports_to_json, table_tsv, AmnesicReport, PerLabelRow, PerLabelTable,
};

use crate::dataset::ReprDataset;
use crate::error::{Error, Result};
use crate::inlp::{apply_projection, random_projection, run_inlp, InlpConfig, Projection};
use crate::probe::argmax;

const CHUNK: usize = 1024;

/// Representations after `p`, or the originals when `p` is `None`.
fn projected(ds: &ReprDataset, p: Option<&Projection>) -> Result<Array2<f32>> {
    match p {
        Some(p) => apply_projection(p, &ds.reps),
        None => Ok(ds.reps.clone()),
    }
}

fn check(ds: &ReprDataset, dec: &Decoder) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    dec.check_dim(ds.dim())?;
    if let Some(&bad) = ds.task_labels.iter().find(|&&t| t as usize >= dec.vocab_size()) {
        return Err(Error::Consistency(format!(
            "task label {bad} is outside the decoder vocabulary of size {}",
            dec.vocab_size()
        )));
    }
    Ok(())
}

/// Argmax word for every row.
pub fn predict_words(reps: &Array2<f32>, dec: &Decoder) -> Result<Vec<u32>> {
    dec.check_dim(reps.ncols())?;
    let chunks: Vec<ArrayView2<f32>> = reps.axis_chunks_iter(Axis(0), CHUNK).collect();
    let per_chunk: Vec<Vec<u32>> = chunks
        .into_par_iter()
        .map(|c| {
            let logits = dec.logits(c).expect("width checked");
            logits
                .axis_iter(Axis(0))
                .map(|row| argmax(row.iter().copied()) as u32)
                .collect()
        })
        .collect();
    Ok(per_chunk.concat())
}

/// Per-row correctness of the decoder's top word.
fn correct_rows(ds: &ReprDataset, dec: &Decoder, p: Option<&Projection>) -> Result<Vec<bool>> {
    check(ds, dec)?;
    let preds = predict_words(&projected(ds, p)?, dec)?;
    Ok(preds
        .iter()
        .zip(&ds.task_labels)
        .map(|(a, b)| a == b)
        .collect())
}

/// Word-prediction accuracy, after `p` if given.
pub fn lm_accuracy(ds: &ReprDataset, dec: &Decoder, p: Option<&Projection>) -> Result<f64> {
    let correct = correct_rows(ds, dec, p)?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / ds.len() as f64)
}

/// Per-row `KL(vanilla || projected)` in nats.
pub fn kl_per_row(ds: &ReprDataset, dec: &Decoder, p: &Projection) -> Result<Vec<f64>> {
    check(ds, dec)?;
    let after = projected(ds, Some(p))?;
    let pairs: Vec<(ArrayView2<f32>, ArrayView2<f32>)> = ds
        .reps
        .axis_chunks_iter(Axis(0), CHUNK)
        .zip(after.axis_chunks_iter(Axis(0), CHUNK))
        .collect();
    let per_chunk: Vec<Vec<f64>> = pairs
        .into_par_iter()
        .map(|(a, b)| {
            let la = dec.logits(a).expect("width checked");
            let lb = dec.logits(b).expect("width checked");
            la.axis_iter(Axis(0))
                .zip(lb.axis_iter(Axis(0)))
                .map(|(ra, rb)| {
                    let lp = decoder::log_softmax(ra);
                    let lq = decoder::log_softmax(rb);
                    let kl: f64 = lp
                        .iter()
                        .zip(&lq)
                        .map(|(&a, &b)| a.exp() * (a - b))
                        .sum();
                    kl.max(0.0)
                })
                .collect()
        })
        .collect();
    Ok(per_chunk.concat())
}

/// Mean `KL(vanilla || projected)` over rows, in nats.
pub fn mean_kl(ds: &ReprDataset, dec: &Decoder, p: &Projection) -> Result<f64> {
    let rows = kl_per_row(ds, dec, p)?;
    Ok(rows.iter().sum::<f64>() / rows.len() as f64)
}

/// LM accuracy restricted to the rows carrying each label of a property.
pub fn per_label_accuracy(
    ds: &ReprDataset,
    dec: &Decoder,
    amnesic: &Projection,
    rand: &Projection,
    property: &str,
) -> Result<PerLabelTable> {
    let labels = ds.property(property)?;
    let vanilla = correct_rows(ds, dec, None)?;
    let amn = correct_rows(ds, dec, Some(amnesic))?;
    let rnd = correct_rows(ds, dec, Some(rand))?;
    let mut counts: BTreeMap<&str, [usize; 4]> = BTreeMap::new();
    for i in 0..ds.len() {
        let e = counts.entry(labels[i].as_str()).or_default();
        e[0] += 1;
        e[1] += vanilla[i] as usize;
        e[2] += rnd[i] as usize;
        e[3] += amn[i] as usize;
    }
    let declared = ds.property_vocab(property).unwrap_or(&[]);
    let mut order: Vec<&str> = declared
        .iter()
        .map(String::as_str)
        .filter(|l| counts.contains_key(l))
        .collect();
    for l in counts.keys() {
        if !order.contains(l) {
            order.push(l);
        }
    }
    let rows = order
        .into_iter()
        .map(|l| {
            let [n, v, r, a] = counts[l];
            let f = |c: usize| c as f64 / n as f64;
            PerLabelRow {
                label: l.to_string(),
                count: n,
                vanilla: f(v),
                rand: f(r),
                amnesic: f(a),
                delta: f(v) - f(a),
            }
        })
        .collect();
    Ok(PerLabelTable {
        property: property.to_string(),
        rows,
    })
}

/// `"1"` where the label equals `target`, `"0"` elsewhere.
pub fn binarize<S: AsRef<str>>(labels: &[S], target: &str) -> Vec<String> {
    labels
        .iter()
        .map(|l| if l.as_ref() == target { "1" } else { "0" }.to_string())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelVsRestConfig {
    pub iterations: usize,
    /// `max_iterations` and `fixed_iterations` are overridden.
    pub inlp: InlpConfig,
    /// Seed of the rank-matched random projection.
    pub rand_seed: u64,
}

impl Default for LabelVsRestConfig {
    fn default() -> Self {
        LabelVsRestConfig {
            iterations: 60,
            inlp: InlpConfig::default(),
            rand_seed: 0,
        }
    }
}

/// Removes only the distinction between `target` and every other label of
/// `property`, for a fixed number of INLP iterations, and measures the LM
/// accuracy on `eval_ds`.
pub fn label_vs_rest(
    train: &ReprDataset,
    dev: &ReprDataset,
    eval_ds: &ReprDataset,
    dec: &Decoder,
    property: &str,
    target: &str,
    config: &LabelVsRestConfig,
) -> Result<AmnesicReport> {
    if !train.property(property)?.iter().any(|l| l == target) {
        return Err(Error::LabelAbsent(target.to_string()));
    }
    let name = format!("{property}={target}");
    let vocab = vec!["1".to_string(), "0".to_string()];
    let relabel = |ds: &ReprDataset| -> Result<ReprDataset> {
        let labels = binarize(ds.property(property)?, target);
        ds.with_property(&name, labels, vocab.clone())
    };
    let train_b = relabel(train)?;
    let dev_b = relabel(dev)?;
    let inlp_cfg = InlpConfig {
        max_iterations: Some(config.iterations),
        fixed_iterations: true,
        ..config.inlp
    };
    let result = run_inlp(&train_b, &dev_b, &name, &inlp_cfg)?;
    let rand = random_projection(train.dim(), result.removed(), config.rand_seed)?;
    let vanilla_acc = lm_accuracy(eval_ds, dec, None)?;
    let amnesic_acc = lm_accuracy(eval_ds, dec, Some(&result.projection))?;
    let rand_acc = lm_accuracy(eval_ds, dec, Some(&rand))?;
    let majority = crate::dataset::label_stats(&binarize(eval_ds.property(property)?, target))?
        .majority_fraction;
    Ok(AmnesicReport {
        property: target.to_string(),
        removed_dirs: Some(result.removed()),
        num_classes: Some(2),
        majority: Some(majority),
        vanilla_acc: Some(vanilla_acc),
        rand_acc: Some(rand_acc),
        amnesic_acc: Some(amnesic_acc),
        mean_kl_rand: Some(mean_kl(eval_ds, dec, &rand)?),
        mean_kl_amnesic: Some(mean_kl(eval_ds, dec, &result.projection)?),
        ..AmnesicReport::new(target)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::toy;
    use crate::inlp::{ProjectionKind, DEFAULT_TOL};
    use ndarray::{arr1, arr2};

    fn identity_decoder() -> Decoder {
        Decoder::unnamed(Array2::eye(2), None).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let dec = identity_decoder();
        let p = decode_distribution(arr1(&[0.0f32, 0.0]).view(), &dec).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
        let p = decode_distribution(arr1(&[2f32.ln(), 0.0]).view(), &dec).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-7);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-7);
        let wide = Decoder::unnamed(arr2(&[[3.0f32, -1.0], [0.5, 40.0], [-7.0, 2.0]]), Some(vec![0.1, -0.2, 5.0])).unwrap();
        let p = decode_distribution(arr1(&[1.5f32, -0.25]).view(), &wide).unwrap();
        assert!((p.sum() - 1.0).abs() < 1e-6);
        assert!(p.iter().all(|&v| v > 0.0));
        assert!(decode_distribution(arr1(&[1.0f32]).view(), &dec).is_err());
    }

    /// Two-row dataset over a two-word vocabulary.
    fn two_word(reps: Array2<f32>, task: Vec<u32>) -> ReprDataset {
        let mut ds = toy(reps.nrows() as u32, 1, reps.ncols());
        ds.reps = reps;
        ds.task_labels = task;
        ds
    }

    #[test]
    fn kl_hand_case() {
        // vanilla logits [ln9, ln9] -> [0.5, 0.5]; removing e2 leaves [ln9, 0]
        // -> [0.9, 0.1]
        let l9 = 9f32.ln();
        let dec = Decoder::unnamed(Array2::eye(2), Some(vec![l9, 0.0])).unwrap();
        let ds = two_word(arr2(&[[0.0, l9], [0.0, l9]]), vec![0, 1]);
        let p = Projection::from_rows(arr2(&[[0.0, 1.0]]).view(), ProjectionKind::Amnesic, DEFAULT_TOL);
        let kl = mean_kl(&ds, &dec, &p).unwrap();
        assert!((kl - 0.5108256237659907).abs() < 1e-4, "{kl}");
        assert_eq!(mean_kl(&ds, &dec, &Projection::identity(2)).unwrap(), 0.0);
    }

    #[test]
    fn identity_projection_matches_vanilla() {
        let ds = toy(20, 5, 4);
        let dec = Decoder::unnamed(
            Array2::from_shape_fn((7, 4), |(i, j)| ((i * 3 + j * 5) % 7) as f32 - 3.0),
            Some(vec![0.0; 7]),
        )
        .unwrap();
        let ds = ds.with_reps(ds.reps.clone()).unwrap();
        let ds = ReprDataset {
            task_labels: (0..ds.len() as u32).map(|i| i % 7).collect(),
            ..ds
        };
        let v = lm_accuracy(&ds, &dec, None).unwrap();
        assert_eq!(lm_accuracy(&ds, &dec, Some(&Projection::identity(4))).unwrap(), v);
        assert!(mean_kl(&ds, &dec, &Projection::identity(4)).unwrap().abs() < 1e-9);
    }

    #[test]
    fn full_removal_collapses_to_bias_argmax() {
        let ds = toy(10, 5, 3);
        let ds = ReprDataset {
            task_labels: (0..ds.len() as u32).map(|i| (i * 7 + 1) % 4).collect(),
            ..ds
        };
        let everything = Projection::from_rows(Array2::<f64>::eye(3).view(), ProjectionKind::Amnesic, DEFAULT_TOL);
        let emb = Array2::from_shape_fn((4, 3), |(i, j)| (i + 2 * j) as f32);
        // bias favors word 2
        let dec = Decoder::unnamed(emb.clone(), Some(vec![0.0, 0.5, 1.0, -1.0])).unwrap();
        let expected = ds.task_labels.iter().filter(|&&t| t == 2).count() as f64 / ds.len() as f64;
        assert_eq!(lm_accuracy(&ds, &dec, Some(&everything)).unwrap(), expected);
        // without a bias every word ties and word 0 wins
        let dec = Decoder::unnamed(emb, None).unwrap();
        let expected = ds.task_labels.iter().filter(|&&t| t == 0).count() as f64 / ds.len() as f64;
        assert_eq!(lm_accuracy(&ds, &dec, Some(&everything)).unwrap(), expected);
    }

    #[test]
    fn scaling_the_decoder_keeps_accuracy() {
        let ds = toy(30, 4, 5);
        let ds = ReprDataset {
            task_labels: (0..ds.len() as u32).map(|i| i % 6).collect(),
            ..ds
        };
        let emb = Array2::from_shape_fn((6, 5), |(i, j)| ((i * 5 + j * 3) % 11) as f32 - 5.0);
        let a = lm_accuracy(&ds, &Decoder::unnamed(emb.clone(), None).unwrap(), None).unwrap();
        let b = lm_accuracy(&ds, &Decoder::unnamed(emb * 3.5, None).unwrap(), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors() {
        let dec = identity_decoder();
        let empty = two_word(Array2::zeros((0, 2)), vec![]);
        assert!(matches!(lm_accuracy(&empty, &dec, None), Err(Error::EmptyDataset)));
        assert!(matches!(mean_kl(&empty, &dec, &Projection::identity(2)), Err(Error::EmptyDataset)));
        let wide = two_word(Array2::zeros((1, 3)), vec![0]);
        assert!(matches!(lm_accuracy(&wide, &dec, None), Err(Error::DimensionMismatch { .. })));
        let bad = two_word(Array2::zeros((1, 2)), vec![5]);
        assert!(matches!(lm_accuracy(&bad, &dec, None), Err(Error::Consistency(_))));
    }

    fn labeled(n_sent: u32, d: usize) -> (ReprDataset, Decoder) {
        let ds = toy(n_sent, 6, d);
        let v = 9;
        let task: Vec<u32> = (0..ds.len()).map(|i| ((i * 5 + i / 3) % v) as u32).collect();
        let mut ds = ReprDataset {
            task_labels: task,
            ..ds
        };
        ds.meta.vocab_size = v;
        let emb = Array2::from_shape_fn((v, d), |(i, j)| (((i + 1) * (j + 2)) % 7) as f32 - 3.0);
        (ds, Decoder::unnamed(emb, Some(vec![0.1; v])).unwrap())
    }

    #[test]
    fn per_label_rows_partition_the_aggregate() {
        let (ds, dec) = labeled(40, 6);
        let amn = Projection::from_rows(arr2(&[[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]]).view(), ProjectionKind::Amnesic, DEFAULT_TOL);
        let rnd = random_projection(6, 1, 3).unwrap();
        let prop = ds.properties.keys().next().unwrap().clone();
        let table = per_label_accuracy(&ds, &dec, &amn, &rnd, &prop).unwrap();
        let n = ds.len() as f64;
        let weighted = |f: fn(&PerLabelRow) -> f64| {
            table.rows.iter().map(|r| r.count as f64 * f(r)).sum::<f64>() / n
        };
        assert!((weighted(|r| r.vanilla) - lm_accuracy(&ds, &dec, None).unwrap()).abs() < 1e-9);
        assert!((weighted(|r| r.amnesic) - lm_accuracy(&ds, &dec, Some(&amn)).unwrap()).abs() < 1e-9);
        assert!((weighted(|r| r.rand) - lm_accuracy(&ds, &dec, Some(&rnd)).unwrap()).abs() < 1e-9);
        for r in &table.rows {
            assert_eq!(r.delta, r.vanilla - r.amnesic);
        }
    }

    #[test]
    fn single_label_table_equals_aggregate() {
        let (ds, dec) = labeled(10, 4);
        let ds = ds
            .with_property("one", vec!["x".to_string(); ds.len()], vec!["x".to_string()])
            .unwrap();
        let id = Projection::identity(4);
        let table = per_label_accuracy(&ds, &dec, &id, &id, "one").unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rows[0].vanilla, lm_accuracy(&ds, &dec, None).unwrap());
    }

    #[test]
    fn binarize_marks_only_the_target() {
        assert_eq!(binarize(&["a", "b", "a", "c"], "a"), ["1", "0", "1", "0"]);
    }

    #[test]
    fn label_vs_rest_needs_the_label() {
        let (ds, dec) = labeled(10, 4);
        let prop = ds.properties.keys().next().unwrap().clone();
        let err = label_vs_rest(&ds, &ds, &ds, &dec, &prop, "no-such-label", &Default::default());
        assert!(matches!(err, Err(Error::LabelAbsent(l)) if l == "no-such-label"));
    }

    #[test]
    fn label_vs_rest_runs_a_fixed_budget() {
        let (ds, dec) = labeled(60, 12);
        let prop = ds.properties.keys().next().unwrap().clone();
        let target = ds.property(&prop).unwrap()[0].clone();
        let cfg = LabelVsRestConfig {
            iterations: 3,
            ..Default::default()
        };
        let r = label_vs_rest(&ds, &ds, &ds, &dec, &prop, &target, &cfg).unwrap();
        assert_eq!(r.num_classes, Some(2));
        let removed = r.removed_dirs.unwrap();
        assert!((1..=6).contains(&removed), "{removed}");
        assert_eq!(r.property, target);
    }
}
