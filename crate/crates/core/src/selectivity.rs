//! Selectivity control: give amnesic representations the gold property back
//! (as a learned embedding) and see how much word-prediction accuracy returns.
//!
//! The decoder input is `[h ‖ e(z)]` and the decoder is the original
//! embedding matrix concatenated with a new `V x property_dim` matrix. Both
//! are fit by Adam on cross-entropy with early stopping on a held-out
//! sentence split.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{split_train_dev, ReprDataset};
use crate::error::{Error, Result};
use crate::eval::{lm_accuracy, Decoder};
use crate::probe::argmax;
use crate::{repd, seed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectivityConfig {
    /// Width of the property embeddings; 0 just re-fits the decoder.
    pub property_dim: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a dev improvement before stopping.
    pub patience: usize,
    /// Keep the original embedding matrix and bias fixed.
    pub freeze_original: bool,
    /// Fraction of sentences held out for early stopping.
    pub dev_fraction: f64,
    /// Half-width of the uniform init of the new parameters.
    pub init_scale: f64,
}

impl Default for SelectivityConfig {
    fn default() -> Self {
        SelectivityConfig {
            property_dim: 32,
            seed: 0,
            learning_rate: 5e-3,
            batch_size: 64,
            max_epochs: 50,
            patience: 3,
            freeze_original: false,
            dev_fraction: 0.1,
            init_scale: 0.1,
        }
    }
}

/// The serializable part of a selectivity run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectivityOutcome {
    /// Best dev accuracy with the property restored.
    pub restored_accuracy: f64,
    /// Accuracy of the untouched decoder on the same dev rows.
    pub amnesic_accuracy: f64,
    /// 0 is the accuracy before any update.
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// False when training hit `max_epochs` while still improving.
    pub converged: bool,
    /// Dev accuracy after each epoch, starting with epoch 0.
    pub history: Vec<f64>,
    pub config: SelectivityConfig,
}

#[derive(Debug, Clone)]
pub struct SelectivityResult {
    pub outcome: SelectivityOutcome,
    /// One row per entry of `property_labels`.
    pub property_embeddings: Array2<f32>,
    pub property_labels: Vec<String>,
    /// Trained `[E_orig ‖ E_new]`, V x (d + property_dim).
    pub decoder_embeddings: Array2<f32>,
    pub decoder_bias: Vec<f32>,
}

impl SelectivityResult {
    /// Writes the property embeddings (REPD) and their labels (one per line).
    pub fn save_property_embeddings(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        repd::write(path, &self.property_embeddings)?;
        crate::dataset::save_vocab(&self.property_labels, path.with_extension("labels.txt"))
    }
}

#[derive(Clone)]
struct Params {
    e_orig: Array2<f32>,
    bias: Array1<f32>,
    e_new: Array2<f32>,
    z: Array2<f32>,
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    fn step(&mut self, p: &mut [f32], g: &[f32], lr: f64, t: i32) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        let c1 = 1.0 - B1.powi(t);
        let c2 = 1.0 - B2.powi(t);
        for i in 0..p.len() {
            let gi = g[i] as f64;
            let m = B1 * self.m[i] as f64 + (1.0 - B1) * gi;
            let v = B2 * self.v[i] as f64 + (1.0 - B2) * gi * gi;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
            p[i] -= (lr * (m / c1) / ((v / c2).sqrt() + EPS)) as f32;
        }
    }
}

fn slice_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f32, D>) -> &mut [f32] {
    a.as_slice_mut().expect("standard layout")
}

fn slice<D: ndarray::Dimension>(a: &ndarray::Array<f32, D>) -> &[f32] {
    a.as_slice().expect("standard layout")
}

fn logits(params: &Params, h: ArrayView1<f32>, z: usize) -> Array1<f32> {
    let mut l = params.e_orig.dot(&h) + &params.bias;
    if params.z.ncols() > 0 {
        l += &params.e_new.dot(&params.z.row(z));
    }
    l
}

fn accuracy(params: &Params, reps: &Array2<f32>, z: &[usize], y: &[u32]) -> f64 {
    let correct = (0..reps.nrows())
        .filter(|&i| argmax(logits(params, reps.row(i), z[i]).iter().copied()) == y[i] as usize)
        .count();
    correct as f64 / reps.nrows() as f64
}

/// Trains the restoration decoder on `amnesic_ds` (already projected) and
/// returns the best dev accuracy it reaches.
pub fn run_selectivity(
    amnesic_ds: &ReprDataset,
    property: &str,
    dec: &Decoder,
    config: &SelectivityConfig,
) -> Result<SelectivityResult> {
    if amnesic_ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if dec.dim() != amnesic_ds.dim() {
        return Err(Error::DimensionMismatch {
            expected: dec.dim(),
            found: amnesic_ds.dim(),
        });
    }
    if config.batch_size == 0 || config.learning_rate <= 0.0 {
        return Err(Error::InvalidArgument(
            "selectivity needs a positive batch size and learning rate".into(),
        ));
    }
    let labels = amnesic_ds.property(property)?;
    let declared = amnesic_ds.property_vocab(property).unwrap_or(&[]);
    let mut property_labels: Vec<String> = declared.to_vec();
    for l in labels {
        if !property_labels.contains(l) {
            property_labels.push(l.clone());
        }
    }
    let index: BTreeMap<&str, usize> = property_labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();

    let (train, dev) = split_train_dev(
        amnesic_ds,
        config.dev_fraction,
        seed::derive(config.seed, seed::stream::SELECTIVITY, 0),
    )?;
    let z_of = |ds: &ReprDataset| -> Result<Vec<usize>> {
        Ok(ds.property(property)?.iter().map(|l| index[l.as_str()]).collect())
    };
    let (train_z, dev_z) = (z_of(&train)?, z_of(&dev)?);
    let amnesic_accuracy = lm_accuracy(&dev, dec, None)?;

    let v = dec.vocab_size();
    let k = config.property_dim;
    let mut rng = seed::rng(config.seed, seed::stream::SELECTIVITY);
    let init = Uniform::new_inclusive(-config.init_scale as f32, config.init_scale as f32)
        .map_err(|e| Error::InvalidArgument(format!("init scale: {e}")))?;
    let z = Array2::from_shape_simple_fn((property_labels.len(), k), || init.sample(&mut rng));
    let e_new = Array2::from_shape_simple_fn((v, k), || init.sample(&mut rng));
    let mut params = Params {
        e_orig: dec.embeddings.as_standard_layout().into_owned(),
        bias: dec
            .bias
            .clone()
            .map(Array1::from)
            .unwrap_or_else(|| Array1::zeros(v)),
        e_new,
        z,
    };
    let mut opt = [
        Adam::new(params.e_orig.len()),
        Adam::new(v),
        Adam::new(params.e_new.len()),
        Adam::new(params.z.len()),
    ];

    let mut history = vec![accuracy(&params, &dev.reps, &dev_z, &dev.task_labels)];
    let mut best = (history[0], 0usize, params.clone());
    let mut stale = 0usize;
    let mut converged = false;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let shuffle_seed = seed::derive(config.seed, seed::stream::SELECTIVITY, 1);
    let mut t = 0i32;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut seed::rng(shuffle_seed, epoch as u64));
        for batch in order.chunks(config.batch_size) {
            t += 1;
            let b = batch.len();
            let h = train.reps.select(Axis(0), batch);
            let zb = params.z.select(Axis(0), &batch.iter().map(|&i| train_z[i]).collect::<Vec<_>>());
            let mut g = h.dot(&params.e_orig.t()) + &params.bias;
            if k > 0 {
                g += &zb.dot(&params.e_new.t());
            }
            for (r, &i) in g.axis_iter_mut(Axis(0)).zip(batch) {
                softmax_minus_onehot(r, train.task_labels[i] as usize, b);
            }
            if !config.freeze_original {
                let d_orig = g.t().dot(&h);
                opt[0].step(slice_mut(&mut params.e_orig), slice(&d_orig), config.learning_rate, t);
                let d_bias = g.sum_axis(Axis(0));
                opt[1].step(slice_mut(&mut params.bias), slice(&d_bias), config.learning_rate, t);
            }
            if k > 0 {
                let d_zb = g.dot(&params.e_new);
                let d_new = g.t().dot(&zb);
                let mut d_z = Array2::<f32>::zeros(params.z.dim());
                for (row, &i) in d_zb.axis_iter(Axis(0)).zip(batch) {
                    let mut dst = d_z.row_mut(train_z[i]);
                    dst += &row;
                }
                opt[2].step(slice_mut(&mut params.e_new), slice(&d_new), config.learning_rate, t);
                opt[3].step(slice_mut(&mut params.z), slice(&d_z), config.learning_rate, t);
            }
        }
        let acc = accuracy(&params, &dev.reps, &dev_z, &dev.task_labels);
        history.push(acc);
        if acc > best.0 {
            best = (acc, epoch, params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                converged = true;
                break;
            }
        }
    }
    if config.max_epochs == 0 {
        converged = true;
    }

    let (restored_accuracy, best_epoch, p) = best;
    let mut decoder_embeddings = Array2::zeros((v, dec.dim() + k));
    decoder_embeddings.slice_mut(s![.., ..dec.dim()]).assign(&p.e_orig);
    decoder_embeddings.slice_mut(s![.., dec.dim()..]).assign(&p.e_new);
    Ok(SelectivityResult {
        outcome: SelectivityOutcome {
            restored_accuracy,
            amnesic_accuracy,
            best_epoch,
            epochs_run: history.len() - 1,
            converged,
            history,
            config: *config,
        },
        property_embeddings: p.z,
        property_labels,
        decoder_embeddings,
        decoder_bias: p.bias.to_vec(),
    })
}

/// Turns a logit row into the cross-entropy gradient `(softmax - onehot) / b`.
fn softmax_minus_onehot(mut row: ndarray::ArrayViewMut1<f32>, gold: usize, b: usize) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x as f64;
    }
    let scale = 1.0 / (sum as f32 * b as f32);
    row.mapv_inplace(|x| x * scale);
    row[gold] -= 1.0 / b as f32;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::toy;

    /// `sentences` sentences of 10 tokens over a `v`-word vocabulary; reps are
    /// pure noise, so nothing but the property can predict the word.
    fn noise_words(sentences: u32, v: usize, d: usize, seed_: u64) -> (ReprDataset, Decoder) {
        let ds = toy(sentences, 10, d);
        let mut rng = seed::rng(seed_, 900);
        let unit = Uniform::new(-1.0f32, 1.0).unwrap();
        let words = Uniform::new(0, v as u32).unwrap();
        let reps = Array2::from_shape_simple_fn((ds.len(), d), || unit.sample(&mut rng));
        let task: Vec<u32> = (0..ds.len()).map(|_| words.sample(&mut rng)).collect();
        let ident: Vec<String> = task.iter().map(|t| format!("w{t}")).collect();
        let vocab: Vec<String> = (0..v).map(|t| format!("w{t}")).collect();
        let mut ds = ReprDataset {
            reps,
            task_labels: task,
            ..ds
        };
        ds.meta.vocab_size = v;
        let ds = ds.with_property("word", ident, vocab)
        .unwrap();
        let emb = Array2::from_shape_simple_fn((v, d), || unit.sample(&mut rng));
        (ds, Decoder::unnamed(emb, None).unwrap())
    }

    #[test]
    fn token_identity_restores_everything() {
        let (ds, dec) = noise_words(200, 50, 8, 1);
        let r = run_selectivity(&ds, "word", &dec, &SelectivityConfig::default()).unwrap();
        assert!(r.outcome.restored_accuracy >= 0.99, "{:?}", r.outcome);
        assert!(r.outcome.amnesic_accuracy < 0.2);
        assert_eq!(r.property_embeddings.dim(), (50, 32));
        assert_eq!(r.decoder_embeddings.dim(), (50, 8 + 32));
    }

    #[test]
    fn deterministic_per_seed() {
        let (ds, dec) = noise_words(40, 20, 6, 2);
        let cfg = SelectivityConfig {
            max_epochs: 4,
            ..Default::default()
        };
        let a = run_selectivity(&ds, "word", &dec, &cfg).unwrap();
        let b = run_selectivity(&ds, "word", &dec, &cfg).unwrap();
        assert_eq!(a.outcome, b.outcome);
        assert_eq!(a.property_embeddings, b.property_embeddings);
        assert_eq!(a.decoder_embeddings, b.decoder_embeddings);
    }

    #[test]
    fn frozen_original_keeps_the_decoder() {
        let (ds, dec) = noise_words(40, 20, 6, 3);
        let cfg = SelectivityConfig {
            max_epochs: 3,
            freeze_original: true,
            ..Default::default()
        };
        let r = run_selectivity(&ds, "word", &dec, &cfg).unwrap();
        assert_eq!(r.decoder_embeddings.slice(s![.., ..6]), dec.embeddings);
        assert!(r.decoder_bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn never_below_the_starting_point() {
        let (ds, dec) = noise_words(60, 30, 6, 4);
        let ds = ds
            .with_property(
                "coin",
                (0..ds.len()).map(|i| ((i * 7919) % 2).to_string()).collect(),
                vec!["0".into(), "1".into()],
            )
            .unwrap();
        let r = run_selectivity(&ds, "coin", &dec, &SelectivityConfig::default()).unwrap();
        assert_eq!(r.outcome.history[0], r.outcome.history[0].min(r.outcome.restored_accuracy));
        assert!(r.outcome.restored_accuracy >= r.outcome.amnesic_accuracy - 0.01);
    }

    #[test]
    fn zero_dim_and_bad_config() {
        let (ds, dec) = noise_words(20, 10, 4, 5);
        let cfg = SelectivityConfig {
            property_dim: 0,
            max_epochs: 2,
            ..Default::default()
        };
        let r = run_selectivity(&ds, "word", &dec, &cfg).unwrap();
        assert_eq!(r.property_embeddings.ncols(), 0);
        let bad = SelectivityConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(run_selectivity(&ds, "word", &dec, &bad).is_err());
        let wrong = Decoder::unnamed(Array2::zeros((10, 5)), None).unwrap();
        assert!(matches!(
            run_selectivity(&ds, "word", &wrong, &cfg),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
