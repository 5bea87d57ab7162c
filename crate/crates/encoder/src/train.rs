//! Masked-token training for the toy encoder.

use std::collections::BTreeMap;

use amnesic::seed;
use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, SyntheticCorpus, MASK};
use crate::error::{EncoderError, Result};
use crate::model::{EncoderConfig, LayeredEncoder, Params};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Sentences per update.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Linear warmup; afterwards the rate decays linearly to a tenth.
    pub warmup_steps: usize,
    pub mask_prob: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
    /// Fraction of sentences held out for the final evaluation.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 6,
            batch_size: 32,
            learning_rate: 2e-3,
            warmup_steps: 100,
            mask_prob: 0.15,
            clip_norm: 1.0,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Held-out masked loss before the first update.
    pub initial_loss: f64,
    /// Mean training loss per masked token, per epoch.
    pub epoch_losses: Vec<f64>,
    pub heldout_loss: f64,
    /// Held-out accuracy, masking one word at a time.
    pub masked_accuracy: f64,
    /// Accuracy of always predicting the most frequent training word.
    pub unigram_baseline: f64,
    /// False when the encoder does not beat the unigram baseline.
    pub converged: bool,
    pub steps: usize,
}

/// Sentences per gradient chunk. Chunks are summed in order, so results do
/// not depend on the number of threads.
const CHUNK: usize = 8;

struct Adam {
    m: Vec<Array2<f32>>,
    v: Vec<Array2<f32>>,
    t: i32,
}

impl Adam {
    fn new(p: &Params) -> Self {
        let zeros: Vec<Array2<f32>> = p.named().iter().map(|(_, t)| Array2::zeros(t.dim())).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        const B1: f32 = 0.9;
        const B2: f32 = 0.999;
        const EPS: f32 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        let g: Vec<&Array2<f32>> = grads.named().into_iter().map(|(_, t)| t).collect();
        let lr = lr as f32;
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.for_each_mut(|_, p| {
            ndarray::Zip::from(p)
                .and(&mut ms[i])
                .and(&mut vs[i])
                .and(g[i])
                .for_each(|p, m, v, &g| {
                    *m = B1 * *m + (1.0 - B1) * g;
                    *v = B2 * *v + (1.0 - B2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                });
            i += 1;
        });
    }
}

/// BERT-style corruption: each word is picked with probability `prob` (at
/// least one per sentence); picked words become `[MASK]` 80% of the time, a
/// random word 10% and stay unchanged 10%. Returns the input and the
/// `(position, original id)` targets.
pub fn mask_sentence(s: &Sentence, prob: f64, vocab_size: usize, rng: &mut impl Rng) -> (Vec<u32>, Vec<(usize, u32)>) {
    let positions: Vec<usize> = s.content_positions().collect();
    let mut picked: Vec<usize> = positions.iter().copied().filter(|_| rng.random::<f64>() < prob).collect();
    if picked.is_empty() {
        if let Some(&p) = positions.choose(rng) {
            picked.push(p);
        }
    }
    let mut input = s.ids.clone();
    let mut targets = Vec::with_capacity(picked.len());
    for p in picked {
        targets.push((p, s.ids[p]));
        let r: f64 = rng.random();
        if r < 0.8 {
            input[p] = MASK;
        } else if r < 0.9 {
            input[p] = rng.random_range(crate::corpus::SEP + 1..vocab_size as u32);
        }
    }
    (input, targets)
}

/// Accuracy and mean loss when each word of each sentence is masked in turn.
pub fn masked_accuracy(enc: &LayeredEncoder, sentences: &[Sentence]) -> Result<(f64, f64)> {
    let per: Vec<Result<(usize, usize, f64)>> = sentences
        .par_iter()
        .map(|s| {
            let mut correct = 0;
            let mut n = 0;
            let mut loss = 0.0;
            for p in s.content_positions() {
                let top = enc.encode(&s.ids, Some(p), &[enc.num_layers()])?;
                let logits = enc.logits(top[0].view());
                let row = logits.row(p);
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let lse = row.iter().map(|&z| ((z - max) as f64).exp()).sum::<f64>().ln() + max as f64;
                loss += lse - row[s.ids[p] as usize] as f64;
                if amnesic::probe::argmax(row.iter().copied()) == s.ids[p] as usize {
                    correct += 1;
                }
                n += 1;
            }
            Ok((correct, n, loss))
        })
        .collect();
    let (mut c, mut n, mut l) = (0usize, 0usize, 0.0f64);
    for r in per {
        let (a, b, x) = r?;
        c += a;
        n += b;
        l += x;
    }
    if n == 0 {
        return Err(EncoderError::Config("no words to evaluate".into()));
    }
    Ok((c as f64 / n as f64, l / n as f64))
}

/// Fraction of held-out words equal to the most frequent training word.
pub fn unigram_baseline(train: &[Sentence], heldout: &[Sentence]) -> f64 {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for s in train {
        for p in s.content_positions() {
            *counts.entry(s.ids[p]).or_default() += 1;
        }
    }
    // ties go to the smallest id
    let top = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(&id, _)| id);
    let (mut hit, mut n) = (0usize, 0usize);
    for s in heldout {
        for p in s.content_positions() {
            hit += (Some(s.ids[p]) == top) as usize;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Trains a fresh encoder with masked-token prediction.
pub fn train_toy_mlm(
    corpus: &SyntheticCorpus,
    config: &EncoderConfig,
    train: &TrainConfig,
) -> Result<(LayeredEncoder, TrainReport)> {
    if corpus.sentences.is_empty() {
        return Err(EncoderError::Config("empty corpus".into()));
    }
    if train.batch_size == 0 || !(train.mask_prob > 0.0 && train.mask_prob <= 1.0) {
        return Err(EncoderError::Config("batch_size must be positive and mask_prob in (0, 1]".into()));
    }
    let mut enc = LayeredEncoder::new(*config, corpus.vocab.clone(), train.seed)?;
    enc.train_config = Some(*train);
    for s in &corpus.sentences {
        enc.check_ids(&s.ids)?;
    }
    let (fit, held) = corpus.split(
        train.holdout_fraction,
        seed::derive(train.seed, seed::stream::ENCODER_TRAIN, 0),
    )?;
    let (_, initial_loss) = masked_accuracy(&enc, &held.sentences)?;

    let steps_per_epoch = fit.sentences.len().div_ceil(train.batch_size);
    let total = (steps_per_epoch * train.epochs).max(1);
    let mut adam = Adam::new(&enc.params);
    let mut mask_rng = seed::rng(
        seed::derive(train.seed, seed::stream::ENCODER_TRAIN, 1),
        seed::stream::ENCODER_TRAIN,
    );
    let order_seed = seed::derive(train.seed, seed::stream::ENCODER_TRAIN, 2);
    let mut order: Vec<usize> = (0..fit.sentences.len()).collect();
    let mut epoch_losses = Vec::with_capacity(train.epochs);
    let mut step = 0usize;
    for epoch in 0..train.epochs {
        order.shuffle(&mut seed::rng(order_seed, epoch as u64));
        let (mut epoch_loss, mut epoch_targets) = (0.0f64, 0usize);
        for batch in order.chunks(train.batch_size) {
            let examples: Vec<(Vec<u32>, Vec<(usize, u32)>)> = batch
                .iter()
                .map(|&i| mask_sentence(&fit.sentences[i], train.mask_prob, enc.vocab_size(), &mut mask_rng))
                .collect();
            let n_targets: usize = examples.iter().map(|e| e.1.len()).sum();
            let weight = 1.0 / n_targets as f32;
            let parts: Vec<(Params, f64)> = examples
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut g = enc.params.zeros_like();
                    let loss = chunk
                        .iter()
                        .map(|(input, targets)| enc.accumulate_gradients(input, targets, weight, &mut g))
                        .sum::<f64>();
                    (g, loss)
                })
                .collect();
            let mut parts = parts.into_iter();
            let (mut grads, mut loss) = parts.next().expect("non-empty batch");
            for (g, l) in parts {
                grads.add_assign(&g);
                loss += l;
            }
            if train.clip_norm > 0.0 {
                let norm = grads
                    .named()
                    .iter()
                    .map(|(_, t)| t.iter().map(|&v| (v as f64).powi(2)).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > train.clip_norm {
                    let f = (train.clip_norm / norm) as f32;
                    grads.for_each_mut(|_, t| *t *= f);
                }
            }
            step += 1;
            let warm = (step as f64 / train.warmup_steps.max(1) as f64).min(1.0);
            let decay = 1.0 - 0.9 * (step as f64 / total as f64);
            adam.step(&mut enc.params, &grads, train.learning_rate * warm * decay);
            epoch_loss += loss;
            epoch_targets += n_targets;
        }
        epoch_losses.push(epoch_loss / epoch_targets.max(1) as f64);
    }

    let (masked_accuracy, heldout_loss) = masked_accuracy(&enc, &held.sentences)?;
    let unigram_baseline = unigram_baseline(&fit.sentences, &held.sentences);
    Ok((
        enc,
        TrainReport {
            initial_loss,
            epoch_losses,
            heldout_loss,
            masked_accuracy,
            unigram_baseline,
            converged: masked_accuracy > unigram_baseline,
            steps: step,
        },
    ))
}
