//! Post-LN transformer encoder with a word-prediction head.
//!
//! Layer 0 is `LN(token + position)`; layer `l` is the output of block `l`.
//! Every block is `x = LN(x + attn(x)); x = LN(x + ffn(x))`. All parameters
//! are 2-d arrays (biases and norm gains are `1 x n`) so they share one
//! storage and checkpoint path. Backpropagation is written out by hand.

use amnesic::inlp::{apply_projection, Projection};
use amnesic::Decoder;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::corpus::{Vocab, CLS, PAD, SEP};
use crate::error::{EncoderError, Result};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_len: usize,
    pub activation: Activation,
    /// Decode with the input token embeddings.
    pub tied: bool,
    pub ln_eps: f32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 6,
            hidden: 64,
            heads: 4,
            ff: 256,
            max_len: 32,
            activation: Activation::Gelu,
            tied: true,
            ln_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EncoderError::Config(m.to_string()));
        if self.hidden == 0 || self.heads == 0 || self.ff == 0 || self.max_len < 3 {
            return bad("hidden, heads and ff must be positive and max_len at least 3");
        }
        if self.hidden % self.heads != 0 {
            return bad("hidden must be a multiple of heads");
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive");
        }
        Ok(())
    }
}

pub const BLOCK_TENSORS: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b", "w1", "b1", "w2", "b2",
    "ln2_g", "ln2_b",
];

/// One transformer block. Weights are `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub wq: Array2<f32>,
    pub bq: Array2<f32>,
    pub wk: Array2<f32>,
    pub bk: Array2<f32>,
    pub wv: Array2<f32>,
    pub bv: Array2<f32>,
    pub wo: Array2<f32>,
    pub bo: Array2<f32>,
    pub ln1_g: Array2<f32>,
    pub ln1_b: Array2<f32>,
    pub w1: Array2<f32>,
    pub b1: Array2<f32>,
    pub w2: Array2<f32>,
    pub b2: Array2<f32>,
    pub ln2_g: Array2<f32>,
    pub ln2_b: Array2<f32>,
}

impl Block {
    pub fn zeros(d: usize, ff: usize) -> Block {
        let z = |r, c| Array2::zeros((r, c));
        Block {
            wq: z(d, d),
            bq: z(1, d),
            wk: z(d, d),
            bk: z(1, d),
            wv: z(d, d),
            bv: z(1, d),
            wo: z(d, d),
            bo: z(1, d),
            ln1_g: z(1, d),
            ln1_b: z(1, d),
            w1: z(d, ff),
            b1: z(1, ff),
            w2: z(ff, d),
            b2: z(1, d),
            ln2_g: z(1, d),
            ln2_b: z(1, d),
        }
    }

    pub fn tensors(&self) -> [&Array2<f32>; 16] {
        [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo,
            &self.ln1_g, &self.ln1_b, &self.w1, &self.b1, &self.w2, &self.b2, &self.ln2_g,
            &self.ln2_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Array2<f32>; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_g,
            &mut self.ln2_b,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// V x d token embeddings (also the decoder when tied).
    pub tok: Array2<f32>,
    /// max_len x d.
    pub pos: Array2<f32>,
    pub ln0_g: Array2<f32>,
    pub ln0_b: Array2<f32>,
    pub blocks: Vec<Block>,
    /// Untied decoder, V x d.
    pub out: Option<Array2<f32>>,
    /// 1 x V.
    pub out_bias: Array2<f32>,
}

impl Params {
    pub fn zeros(config: &EncoderConfig, vocab_size: usize) -> Params {
        let d = config.hidden;
        Params {
            tok: Array2::zeros((vocab_size, d)),
            pos: Array2::zeros((config.max_len, d)),
            ln0_g: Array2::zeros((1, d)),
            ln0_b: Array2::zeros((1, d)),
            blocks: (0..config.num_layers)
                .map(|_| Block::zeros(d, config.ff))
                .collect(),
            out: (!config.tied).then(|| Array2::zeros((vocab_size, d))),
            out_bias: Array2::zeros((1, vocab_size)),
        }
    }

    pub fn zeros_like(&self) -> Params {
        let mut p = self.clone();
        p.for_each_mut(|_, t| t.fill(0.0));
        p
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Array2<f32>)> {
        let mut v = vec![
            ("tok".to_string(), &self.tok),
            ("pos".to_string(), &self.pos),
            ("ln0_g".to_string(), &self.ln0_g),
            ("ln0_b".to_string(), &self.ln0_b),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_TENSORS.iter().zip(b.tensors()) {
                v.push((format!("block{l}.{name}"), t));
            }
        }
        if let Some(o) = &self.out {
            v.push(("out".to_string(), o));
        }
        v.push(("out_bias".to_string(), &self.out_bias));
        v
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Array2<f32>)) {
        f("tok", &mut self.tok);
        f("pos", &mut self.pos);
        f("ln0_g", &mut self.ln0_g);
        f("ln0_b", &mut self.ln0_b);
        for b in &mut self.blocks {
            for (name, t) in BLOCK_TENSORS.iter().zip(b.tensors_mut()) {
                f(name, t);
            }
        }
        if let Some(o) = &mut self.out {
            f("out", o);
        }
        f("out_bias", &mut self.out_bias);
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Params) {
        let others: Vec<&Array2<f32>> = other.named().into_iter().map(|(_, t)| t).collect();
        let mut i = 0;
        self.for_each_mut(|_, t| {
            *t += others[i];
            i += 1;
        });
    }

    pub fn num_values(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayeredEncoder {
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub params: Params,
    /// How the weights were trained, when they were.
    pub train_config: Option<TrainConfig>,
    pub seed: Option<u64>,
}

/// Result of [`LayeredEncoder::intervene`].
#[derive(Debug, Clone, PartialEq)]
pub struct Intervention {
    pub at_layer: usize,
    /// Layers `at_layer..=L`; the first entry is the projected layer.
    pub layers: Vec<Array2<f32>>,
    /// T x V word logits from the final layer.
    pub logits: Array2<f32>,
}

/// Rows never projected by an intervention.
pub fn is_exempt(id: u32) -> bool {
    id == PAD || id == CLS || id == SEP
}

impl LayeredEncoder {
    /// Randomly initialized encoder.
    pub fn new(config: EncoderConfig, vocab: Vocab, seed_: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Params::zeros(&config, vocab.len());
        let mut rng = amnesic::seed::rng(seed_, amnesic::seed::stream::ENCODER_INIT);
        let emb = Uniform::new_inclusive(-0.1f32, 0.1).expect("valid range");
        params.for_each_mut(|name, t| {
            let (r, c) = t.dim();
            match name {
                "tok" | "pos" | "out" => t.mapv_inplace(|_| emb.sample(&mut rng)),
                "ln0_g" | "ln1_g" | "ln2_g" => t.fill(1.0),
                _ if r > 1 => {
                    let a = (6.0 / (r + c) as f32).sqrt();
                    let u = Uniform::new_inclusive(-a, a).expect("valid range");
                    t.mapv_inplace(|_| u.sample(&mut rng));
                }
                _ => {}
            }
        });
        Ok(LayeredEncoder {
            config,
            vocab,
            params,
            train_config: None,
            seed: Some(seed_),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// V x d decoding matrix.
    pub fn output_embeddings(&self) -> &Array2<f32> {
        self.params.out.as_ref().unwrap_or(&self.params.tok)
    }

    /// The word-prediction layer as an evaluation decoder.
    pub fn decoder(&self) -> Decoder {
        Decoder::new(
            self.output_embeddings().clone(),
            Some(self.params.out_bias.row(0).to_vec()),
            self.vocab.tokens().to_vec(),
        )
        .expect("shapes agree by construction")
    }

    /// Word logits for every row of a final-layer matrix.
    pub fn logits(&self, top: ArrayView2<f32>) -> Array2<f32> {
        top.dot(&self.output_embeddings().t()) + &self.params.out_bias
    }

    pub(crate) fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.len() > self.config.max_len {
            return Err(EncoderError::TooLong {
                len: ids.len(),
                max: self.config.max_len,
            });
        }
        if ids.is_empty() {
            return Err(EncoderError::Config("empty sentence".into()));
        }
        if let Some(&id) = ids.iter().find(|&&i| i as usize >= self.vocab_size()) {
            return Err(EncoderError::UnknownTokenId {
                id,
                size: self.vocab_size(),
            });
        }
        Ok(())
    }

    pub(crate) fn masked_input(&self, ids: &[u32], mask_pos: Option<usize>) -> Result<Vec<u32>> {
        self.check_ids(ids)?;
        let mut input = ids.to_vec();
        if let Some(p) = mask_pos {
            if p >= ids.len() {
                return Err(EncoderError::IndexOutOfRange {
                    index: p,
                    len: ids.len(),
                });
            }
            input[p] = crate::corpus::MASK;
        }
        Ok(input)
    }

    /// Hidden states for the layers in `collect` (0 = embeddings, L = top),
    /// in the order requested. With `mask_pos` that position's token is
    /// replaced by `[MASK]` before anything is computed.
    pub fn encode(&self, ids: &[u32], mask_pos: Option<usize>, collect: &[usize]) -> Result<Vec<Array2<f32>>> {
        let l = self.num_layers();
        if let Some(&bad) = collect.iter().find(|&&c| c > l) {
            return Err(EncoderError::IndexOutOfRange {
                index: bad,
                len: l + 1,
            });
        }
        let all = self.encode_all(ids, mask_pos)?;
        Ok(collect.iter().map(|&c| all[c].clone()).collect())
    }

    /// All `L + 1` hidden-state matrices.
    pub fn encode_all(&self, ids: &[u32], mask_pos: Option<usize>) -> Result<Vec<Array2<f32>>> {
        let input = self.masked_input(ids, mask_pos)?;
        Ok(self.forward(&input, None, None))
    }

    /// Projects layer `at_layer` by `p` (except `[CLS]`, `[SEP]` and `[PAD]`
    /// rows) and runs the remaining blocks.
    pub fn intervene(
        &self,
        ids: &[u32],
        at_layer: usize,
        p: &Projection,
        mask_pos: Option<usize>,
    ) -> Result<Intervention> {
        if at_layer > self.num_layers() {
            return Err(EncoderError::IndexOutOfRange {
                index: at_layer,
                len: self.num_layers() + 1,
            });
        }
        if p.dim() != self.hidden() {
            return Err(amnesic::Error::DimensionMismatch {
                expected: self.hidden(),
                found: p.dim(),
            }
            .into());
        }
        let input = self.masked_input(ids, mask_pos)?;
        let layers = self.forward(&input, Some((at_layer, p)), None);
        let logits = self.logits(layers[self.num_layers()].view());
        Ok(Intervention {
            at_layer,
            layers: layers[at_layer..].to_vec(),
            logits,
        })
    }

    fn project_rows(&self, x: &mut Array2<f32>, ids: &[u32], p: &Projection) {
        if p.is_identity() {
            return;
        }
        let rows: Vec<usize> = (0..ids.len()).filter(|&i| !is_exempt(ids[i])).collect();
        if rows.is_empty() {
            return;
        }
        let sel = x.select(Axis(0), &rows);
        let projected = apply_projection(p, &sel).expect("width checked");
        for (k, &r) in rows.iter().enumerate() {
            x.row_mut(r).assign(&projected.row(k));
        }
    }

    /// Runs the network and returns all layers. `trace` receives what the
    /// backward pass needs.
    pub(crate) fn forward(
        &self,
        ids: &[u32],
        intervention: Option<(usize, &Projection)>,
        mut trace: Option<&mut Trace>,
    ) -> Vec<Array2<f32>> {
        let t = ids.len();
        let p = &self.params;
        let mut e = p.tok.select(Axis(0), &ids.iter().map(|&i| i as usize).collect::<Vec<_>>());
        e += &p.pos.slice(s![..t, ..]);
        let (mut x, ln0) = layer_norm(&e, &p.ln0_g, &p.ln0_b, self.config.ln_eps);
        if let Some(tr) = trace.as_deref_mut() {
            tr.ids = ids.to_vec();
            tr.ln0 = Some(ln0);
            tr.blocks.clear();
        }
        if let Some((0, proj)) = intervention {
            self.project_rows(&mut x, ids, proj);
        }
        let mut layers = Vec::with_capacity(self.num_layers() + 1);
        layers.push(x.clone());
        for (l, block) in p.blocks.iter().enumerate() {
            let (mut out, cache) = self.block_forward(block, &x, trace.is_some());
            if let (Some(tr), Some(c)) = (trace.as_deref_mut(), cache) {
                tr.blocks.push(c);
            }
            if let Some((at, proj)) = intervention {
                if at == l + 1 {
                    self.project_rows(&mut out, ids, proj);
                }
            }
            layers.push(out.clone());
            x = out;
        }
        layers
    }

    fn block_forward(&self, b: &Block, x: &Array2<f32>, keep: bool) -> (Array2<f32>, Option<BlockCache>) {
        let cfg = &self.config;
        let dh = cfg.hidden / cfg.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let q = x.dot(&b.wq) + &b.bq;
        let k = x.dot(&b.wk) + &b.bk;
        let v = x.dot(&b.wv) + &b.bv;
        let mut o = Array2::<f32>::zeros(x.dim());
        let mut attn = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut sc);
            o.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
            attn.push(sc);
        }
        let r1 = x + &(o.dot(&b.wo) + &b.bo);
        let (x1, ln1) = layer_norm(&r1, &b.ln1_g, &b.ln1_b, cfg.ln_eps);
        let pre = x1.dot(&b.w1) + &b.b1;
        let hid = pre.mapv(|z| activation(cfg.activation, z));
        let r2 = &x1 + &(hid.dot(&b.w2) + &b.b2);
        let (x2, ln2) = layer_norm(&r2, &b.ln2_g, &b.ln2_b, cfg.ln_eps);
        let cache = keep.then(|| BlockCache {
            x: x.clone(),
            q,
            k,
            v,
            attn,
            o,
            ln1,
            x1,
            pre,
            hid,
            ln2,
        });
        (x2, cache)
    }

    /// Adds the gradient of the summed cross-entropy at `targets`
    /// (`(position, gold id)` pairs, each weighted by `weight`) to `grads`
    /// and returns the unweighted loss sum.
    pub(crate) fn accumulate_gradients(
        &self,
        input: &[u32],
        targets: &[(usize, u32)],
        weight: f32,
        grads: &mut Params,
    ) -> f64 {
        let mut trace = Trace::default();
        let layers = self.forward(input, None, Some(&mut trace));
        let top = &layers[self.num_layers()];
        let out = self.output_embeddings();
        let mut d_top = Array2::<f32>::zeros(top.dim());
        let mut loss = 0.0f64;
        for &(pos, gold) in targets {
            let h = top.row(pos);
            let mut logits: Array1<f32> = out.dot(&h) + &self.params.out_bias.row(0);
            let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            logits.mapv_inplace(|z| (z - max).exp());
            let sum: f32 = logits.sum();
            loss -= ((logits[gold as usize] / sum) as f64).ln();
            let mut g = logits / sum;
            g[gold as usize] -= 1.0;
            g *= weight;
            let g2 = g.view().insert_axis(Axis(1));
            let gout = g2.dot(&h.insert_axis(Axis(0)));
            match grads.out.as_mut() {
                Some(o) => *o += &gout,
                None => grads.tok += &gout,
            }
            grads.out_bias.row_mut(0).scaled_add(1.0, &g);
            d_top.row_mut(pos).scaled_add(1.0, &g.dot(out));
        }
        let mut dx = d_top;
        for l in (0..self.num_layers()).rev() {
            dx = self.block_backward(&self.params.blocks[l], &trace.blocks[l], &dx, &mut grads.blocks[l]);
        }
        let ln0 = trace.ln0.as_ref().expect("traced");
        let (de, dg, db) = layer_norm_backward(&dx, ln0, &self.params.ln0_g);
        grads.ln0_g += &dg;
        grads.ln0_b += &db;
        for (t, &id) in trace.ids.iter().enumerate() {
            grads.tok.row_mut(id as usize).scaled_add(1.0, &de.row(t));
            grads.pos.row_mut(t).scaled_add(1.0, &de.row(t));
        }
        loss
    }

    fn block_backward(&self, b: &Block, c: &BlockCache, dx2: &Array2<f32>, g: &mut Block) -> Array2<f32> {
        let cfg = &self.config;
        let dh = cfg.hidden / cfg.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (dr2, dg2, db2) = layer_norm_backward(dx2, &c.ln2, &b.ln2_g);
        g.ln2_g += &dg2;
        g.ln2_b += &db2;
        g.w2 += &c.hid.t().dot(&dr2);
        g.b2 += &dr2.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dhid = dr2.dot(&b.w2.t());
        let dpre = &dhid * &c.pre.mapv(|z| activation_grad(cfg.activation, z));
        g.w1 += &c.x1.t().dot(&dpre);
        g.b1 += &dpre.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dx1 = dr2 + dpre.dot(&b.w1.t());
        let (dr1, dg1, db1) = layer_norm_backward(&dx1, &c.ln1, &b.ln1_g);
        g.ln1_g += &dg1;
        g.ln1_b += &db1;
        g.wo += &c.o.t().dot(&dr1);
        g.bo += &dr1.sum_axis(Axis(0)).insert_axis(Axis(0));
        let d_o = dr1.dot(&b.wo.t());
        let mut dq = Array2::<f32>::zeros(c.q.dim());
        let mut dk = Array2::<f32>::zeros(c.k.dim());
        let mut dv = Array2::<f32>::zeros(c.v.dim());
        for h in 0..cfg.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let a = &c.attn[h];
            let doh = d_o.slice(cols);
            let da = doh.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&doh));
            let mut ds = &da * a;
            let row_sums = ds.sum_axis(Axis(1));
            ds -= &(a * &row_sums.insert_axis(Axis(1)));
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        g.wq += &c.x.t().dot(&dq);
        g.bq += &dq.sum_axis(Axis(0)).insert_axis(Axis(0));
        g.wk += &c.x.t().dot(&dk);
        g.bk += &dk.sum_axis(Axis(0)).insert_axis(Axis(0));
        g.wv += &c.x.t().dot(&dv);
        g.bv += &dv.sum_axis(Axis(0)).insert_axis(Axis(0));
        dr1 + dq.dot(&b.wq.t()) + dk.dot(&b.wk.t()) + dv.dot(&b.wv.t())
    }
}

#[derive(Debug, Default)]
pub(crate) struct Trace {
    ids: Vec<u32>,
    ln0: Option<LnCache>,
    blocks: Vec<BlockCache>,
}

#[derive(Debug)]
struct BlockCache {
    x: Array2<f32>,
    q: Array2<f32>,
    k: Array2<f32>,
    v: Array2<f32>,
    attn: Vec<Array2<f32>>,
    o: Array2<f32>,
    ln1: LnCache,
    x1: Array2<f32>,
    pre: Array2<f32>,
    hid: Array2<f32>,
    ln2: LnCache,
}

#[derive(Debug)]
struct LnCache {
    xhat: Array2<f32>,
    inv_std: Array1<f32>,
}

fn layer_norm(x: &Array2<f32>, g: &Array2<f32>, b: &Array2<f32>, eps: f32) -> (Array2<f32>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::<f32>::zeros(x.nrows());
    for (mut row, inv) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d;
        let is = 1.0 / (var + eps as f64).sqrt();
        row.mapv_inplace(|v| ((v as f64 - mean) * is) as f32);
        *inv = is as f32;
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(dy: &Array2<f32>, c: &LnCache, g: &Array2<f32>) -> (Array2<f32>, Array2<f32>, Array2<f32>) {
    let dg = (dy * &c.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * g;
    let d = dy.ncols() as f32;
    let mut dx = Array2::<f32>::zeros(dy.dim());
    for i in 0..dy.nrows() {
        let dxh = dxhat.row(i);
        let xh = c.xhat.row(i);
        let mean_d = dxh.sum() / d;
        let mean_dx = dxh.dot(&xh) / d;
        let is = c.inv_std[i];
        dx.row_mut(i)
            .assign(&((&dxh - mean_d - &(&xh * mean_dx)) * is));
    }
    (dx, dg, db)
}

fn softmax_rows(a: &mut Array2<f32>) {
    for mut row in a.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)

fn activation(a: Activation, z: f32) -> f32 {
    match a {
        Activation::Relu => z.max(0.0),
        Activation::Gelu => 0.5 * z * (1.0 + (GELU_C * (z + 0.044715 * z * z * z)).tanh()),
    }
}

fn activation_grad(a: Activation, z: f32) -> f32 {
    match a {
        Activation::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Gelu => {
            let u = GELU_C * (z + 0.044715 * z * z * z);
            let t = u.tanh();
            0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * z * z)
        }
    }
}
