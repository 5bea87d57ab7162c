//! A hand-built encoder whose tag information is linearly available at one
//! known layer only.
//!
//! Words are `(class c, index i)` pairs. Every layer carries a one-hot word
//! code, except the planted layer `k`, which carries `u_i + t_c`: a code for
//! the within-class index plus a code for the class. Block `k` converts the
//! one-hot code into that form and block `k + 1` converts it back; the other
//! blocks are identities. At layer `k` the tag lives in the `t` subspace and
//! the word can only be recovered from `u` and `t` together, so removing the
//! tag there erases the word. Conversion back falls to a `[PAD]` default
//! when no word is recognized.
//!
//! Attention weights are zero and every layer norm has unit gain and zero
//! bias, so the whole stream can be rotated by an orthogonal matrix fixing
//! the all-ones vector (which commutes with layer norm). A seeded rotation
//! keeps the codes off the coordinate axes.

use amnesic::seed;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_synthetic_corpus, GrammarConfig, SyntheticCorpus, TagClass, Template, PAD, SPECIAL_TOKENS};
use crate::error::{EncoderError, Result};
use crate::model::{Activation, EncoderConfig, LayeredEncoder, Params};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedConfig {
    pub classes: usize,
    pub words_per_class: usize,
    pub num_layers: usize,
    pub planted_layer: usize,
    pub sentences: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            classes: 4,
            words_per_class: 8,
            num_layers: 4,
            planted_layer: 2,
            sentences: 400,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedModel {
    pub encoder: LayeredEncoder,
    pub grammar: GrammarConfig,
    pub planted_layer: usize,
    /// d x d rotation applied to the residual stream.
    pub rotation: Array2<f32>,
}

const CANCEL_GAIN: f32 = 3.0;

/// Class `c` words are `t{c}w{i}`; templates are the rotations of the class
/// sequence, so every class appears once per sentence.
pub fn planted_grammar(cfg: &PlantedConfig) -> GrammarConfig {
    let tags: Vec<String> = (0..cfg.classes).map(|c| format!("T{c}")).collect();
    GrammarConfig {
        classes: tags
            .iter()
            .enumerate()
            .map(|(c, tag)| TagClass {
                tag: tag.clone(),
                words: (0..cfg.words_per_class).map(|i| format!("t{c}w{i}")).collect(),
            })
            .collect(),
        templates: (0..cfg.classes)
            .map(|r| Template {
                tags: (0..cfg.classes).map(|j| tags[(r + j) % cfg.classes].clone()).collect(),
                weight: 1.0,
            })
            .collect(),
        topics: 1,
        sentences: cfg.sentences,
    }
}

/// Layer norm with unit gain and zero bias, as the encoder computes it.
fn ln_vec(v: &Array1<f32>, eps: f32) -> Array1<f32> {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps as f64).sqrt();
    v.mapv(|x| ((x as f64 - mean) * inv) as f32)
}

/// Sequential Gram-Schmidt over the rows, which must be independent.
fn gram_schmidt(rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(rows.len());
    for mut r in rows {
        for _ in 0..2 {
            for q in &out {
                let dot: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
                r.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        r.iter_mut().for_each(|x| *x /= n);
        out.push(r);
    }
    out
}

/// Random orthogonal `d x d` matrix with `R 1 = 1`.
pub fn ones_fixing_rotation(d: usize, seed_: u64) -> Array2<f32> {
    let mut rng = seed::rng(seed_, seed::stream::ENCODER_INIT);
    let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let mut rows = vec![vec![1.0; d]];
    rows.extend((0..d - 1).map(|_| gauss(d)));
    let g: Vec<Vec<f64>> = (0..d - 1).map(|_| gauss(d - 1)).collect();
    let b = gram_schmidt(rows);
    let inner = gram_schmidt(g);
    let b = Array2::from_shape_fn((d, d), |(i, j)| b[i][j]);
    let mut mid = Array2::<f64>::zeros((d, d));
    mid[[0, 0]] = 1.0;
    for i in 0..d - 1 {
        for j in 0..d - 1 {
            mid[[i + 1, j + 1]] = inner[i][j];
        }
    }
    b.t().dot(&mid).dot(&b).mapv(|x| x as f32)
}

/// Builds the planted encoder for `cfg` (without rotation when
/// `rotate` is false).
pub fn planted_encoder(cfg: &PlantedConfig, rotate: bool) -> Result<PlantedModel> {
    let (c_n, m) = (cfg.classes, cfg.words_per_class);
    if c_n < 3 || m < 2 {
        return Err(EncoderError::Config("need at least 3 classes and 2 words per class".into()));
    }
    if cfg.planted_layer > cfg.num_layers || cfg.num_layers == 0 {
        return Err(EncoderError::Config(format!(
            "planted layer {} outside 0..={}",
            cfg.planted_layer, cfg.num_layers
        )));
    }
    let grammar = planted_grammar(cfg);
    let vocab = grammar.vocab()?;
    let words = c_n * m;
    let d = words + SPECIAL_TOKENS.len();
    let ff = 3 * words + 1;
    let config = EncoderConfig {
        num_layers: cfg.num_layers,
        hidden: d,
        heads: 1,
        ff,
        max_len: c_n + 2,
        activation: Activation::Relu,
        tied: false,
        ln_eps: 1e-5,
    };
    let eps = config.ln_eps;
    let k = cfg.planted_layer;
    let v = vocab.len();
    let mut p = Params::zeros(&config, v);
    p.ln0_g.fill(1.0);
    for b in &mut p.blocks {
        b.ln1_g.fill(1.0);
        b.ln2_g.fill(1.0);
    }

    let onehot = |c: usize, i: usize| c * m + i;
    let u_dim = |i: usize| i;
    let t_dim = |c: usize| m + c;
    let special = |s: u32| words + s as usize;
    let word_ids: Vec<(usize, usize, usize)> = (0..c_n)
        .flat_map(|c| (0..m).map(move |i| (c, i)))
        .map(|(c, i)| Ok((c, i, vocab.id(&format!("t{c}w{i}"))? as usize)))
        .collect::<Result<_>>()?;
    let e = |j: usize| {
        let mut x = Array1::<f32>::zeros(d);
        x[j] = 1.0;
        x
    };

    for s in 0..SPECIAL_TOKENS.len() as u32 {
        p.tok.row_mut(s as usize).assign(&e(special(s)));
    }
    for &(c, i, id) in &word_ids {
        let code = if k == 0 {
            e(u_dim(i)) + e(t_dim(c))
        } else {
            e(onehot(c, i))
        };
        p.tok.row_mut(id).assign(&code);
    }

    // value of the active coordinate of a one-hot layer
    let a_hot = ln_vec(&e(0), eps)[0];
    // code of a word at the planted layer, and its active value
    let ut_code = if k == 0 {
        ln_vec(&(e(u_dim(0)) + e(t_dim(0))), eps)
    } else {
        let mut r = ln_vec(&e(onehot(0, 0)), eps);
        r.slice_mut(ndarray::s![..words]).fill(0.0);
        r[u_dim(0)] += CANCEL_GAIN;
        r[t_dim(0)] += CANCEL_GAIN;
        ln_vec(&r, eps)
    };
    let a = ut_code[u_dim(0)];

    // Hidden units 0..words detect words, words..3*words cancel the word
    // dims of the residual, the last unit is the [PAD] default.
    let cancel = |b: &mut crate::model::Block| {
        for j in 0..words {
            b.w1[[j, words + 2 * j]] = 1.0;
            b.w2[[words + 2 * j, j]] = -1.0;
            b.w1[[j, words + 2 * j + 1]] = -1.0;
            b.w2[[words + 2 * j + 1, j]] = 1.0;
        }
    };
    if k >= 1 {
        let b = &mut p.blocks[k - 1];
        cancel(b);
        for &(c, i, _) in &word_ids {
            let h = onehot(c, i);
            b.w1[[onehot(c, i), h]] = 1.0;
            b.b1[[0, h]] = -a_hot / 2.0;
            let scale = CANCEL_GAIN * 2.0 / a_hot;
            b.w2[[h, u_dim(i)]] = scale;
            b.w2[[h, t_dim(c)]] = scale;
        }
    }
    // word evidence x_u + 3 x_t: 4a intact, about 2.2a with the tag removed
    let threshold = 2.5 * a;
    let default = 0.5 * a;
    if k < cfg.num_layers {
        let b = &mut p.blocks[k];
        cancel(b);
        for &(c, i, _) in &word_ids {
            let h = onehot(c, i);
            b.w1[[u_dim(i), h]] = 1.0;
            b.w1[[t_dim(c), h]] = 3.0;
            b.b1[[0, h]] = -threshold;
            b.w2[[h, onehot(c, i)]] = CANCEL_GAIN / (1.5 * a);
        }
        b.b1[[0, ff - 1]] = default;
        b.w2[[ff - 1, special(PAD)]] = CANCEL_GAIN / (1.5 * a);
    }

    let mut out = Array2::<f32>::zeros((v, d));
    for s in 0..SPECIAL_TOKENS.len() as u32 {
        out.row_mut(s as usize).assign(&e(special(s)));
    }
    for &(c, i, id) in &word_ids {
        if k == cfg.num_layers {
            out[[id, u_dim(i)]] = 1.0;
            out[[id, t_dim(c)]] = 3.0;
            p.out_bias[[0, id]] = -threshold;
        } else {
            out[[id, onehot(c, i)]] = 1.0;
        }
    }
    if k == cfg.num_layers {
        out.row_mut(PAD as usize).fill(0.0);
        p.out_bias[[0, PAD as usize]] = default;
    }
    p.out = Some(out);

    let rotation = if rotate {
        ones_fixing_rotation(d, seed::derive(cfg.seed, seed::stream::ENCODER_INIT, 1))
    } else {
        Array2::eye(d)
    };
    p.tok = p.tok.dot(&rotation);
    p.pos = p.pos.dot(&rotation);
    for b in &mut p.blocks {
        b.w1 = rotation.t().dot(&b.w1);
        b.w2 = b.w2.dot(&rotation);
        b.b2 = b.b2.dot(&rotation);
    }
    p.out = p.out.map(|o| o.dot(&rotation));

    let mut encoder = LayeredEncoder::new(config, vocab, cfg.seed)?;
    encoder.params = p;
    encoder.seed = Some(cfg.seed);
    Ok(PlantedModel {
        encoder,
        grammar,
        planted_layer: k,
        rotation,
    })
}

/// Corpus drawn from the planted grammar with its own seed.
pub fn planted_corpus(model: &PlantedModel, sentences: usize, seed_: u64) -> Result<SyntheticCorpus> {
    build_synthetic_corpus(&model.grammar.clone().with_sentences(sentences), seed_)
}
