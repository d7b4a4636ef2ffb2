//! The categorical token predictor shared by teacher, generator and
//! auxiliary model: embeddings, pre-norm transformer blocks with
//! bidirectional attention, and a projection to `V` logits per position.

use maskdistill_tensor::{Array, Checkpoint, Tape, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::tokens::{Condition, TokenSeq, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub seq_len: usize,
    pub classes: usize,
    #[serde(default = "defaults::d_model")]
    pub d_model: usize,
    #[serde(default = "defaults::n_blocks")]
    pub n_blocks: usize,
    #[serde(default = "defaults::n_heads")]
    pub n_heads: usize,
    #[serde(default = "defaults::mlp_ratio")]
    pub mlp_ratio: usize,
}

mod defaults {
    pub fn d_model() -> usize {
        64
    }
    pub fn n_blocks() -> usize {
        2
    }
    pub fn n_heads() -> usize {
        4
    }
    pub fn mlp_ratio() -> usize {
        4
    }
}

impl ModelConfig {
    pub fn new(vocab: usize, seq_len: usize, classes: usize) -> Self {
        Self {
            vocab,
            seq_len,
            classes,
            d_model: defaults::d_model(),
            n_blocks: defaults::n_blocks(),
            n_heads: defaults::n_heads(),
            mlp_ratio: defaults::mlp_ratio(),
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.vocab)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.seq_len == 0 || self.classes == 0 {
            return Err(invalid("model needs vocab >= 2, seq_len >= 1, classes >= 1"));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(invalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(invalid("mlp_ratio must be positive"));
        }
        Ok(())
    }

    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let h = d * self.mlp_ratio;
        let mut out = vec![
            ("token_embedding".to_string(), vec![self.vocab + 2, d]),
            ("cond_embedding".to_string(), vec![self.classes, d]),
            ("positional_embedding".to_string(), vec![self.seq_len, d]),
        ];
        for b in 0..self.n_blocks {
            let p = |s: &str| format!("block{b}.{s}");
            out.extend([
                (p("ln1.gamma"), vec![d]),
                (p("ln1.beta"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.bq"), vec![d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.bk"), vec![d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.bv"), vec![d]),
                (p("attn.wo"), vec![d, d]),
                (p("attn.bo"), vec![d]),
                (p("ln2.gamma"), vec![d]),
                (p("ln2.beta"), vec![d]),
                (p("mlp.w1"), vec![d, h]),
                (p("mlp.b1"), vec![h]),
                (p("mlp.w2"), vec![h, d]),
                (p("mlp.b2"), vec![d]),
            ]);
        }
        out.extend([
            ("final_ln.gamma".to_string(), vec![d]),
            ("final_ln.beta".to_string(), vec![d]),
            ("output.weight".to_string(), vec![d, self.vocab]),
            ("output.bias".to_string(), vec![self.vocab]),
        ]);
        out
    }
}

const EMBEDDINGS: usize = 3;
const PER_BLOCK: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array,
    pub trainable: bool,
}

impl Param {
    pub fn is_embedding(&self) -> bool {
        self.name.ends_with("_embedding")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    params: Vec<Param>,
}

/// Continuous noise for the token embeddings of one sequence:
/// `ê = sqrt(1 - σ²)·e + σ·ε`, with `ε` of shape `[L, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPerturbation {
    pub sigma: f64,
    pub noise: Array,
}

impl EmbeddingPerturbation {
    pub fn sample(sigma: f64, seq_len: usize, d_model: usize, rng: &mut impl Rng) -> Self {
        let noise = (0..seq_len * d_model).map(|_| StandardNormal.sample(rng)).collect();
        Self {
            sigma,
            noise: Array::new(vec![seq_len, d_model], noise).expect("sized"),
        }
    }
}

/// Result of recording a forward pass on a tape.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[B·L, V]` logits.
    pub logits: Var,
    /// One leaf per parameter, in [`ModelParams::params`] order.
    pub leaves: Vec<Var>,
    /// Tape node range `[start, end)` written by this pass.
    pub nodes: std::ops::Range<usize>,
}

impl ModelParams {
    /// Fresh weights: embeddings `N(0, 1)`, linear maps `N(0, 1/fan_in)`,
    /// biases zero, layer-norm gains one.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let params = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = if name.ends_with("_embedding") {
                    (0..n).map(|_| StandardNormal.sample(rng)).collect()
                } else if name.ends_with("gamma") {
                    vec![1.0; n]
                } else if shape.len() == 2 {
                    let std = 1.0 / (shape[0] as f64).sqrt();
                    (0..n).map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>()
                } else {
                    vec![0.0; n]
                };
                Param {
                    name,
                    value: Array::new(shape, data).expect("sized"),
                    trainable: true,
                }
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> Vocab {
        self.config.vocab()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    /// Freezes the token, condition and positional embedding tables.
    pub fn freeze_embeddings(&mut self) {
        self.params
            .iter_mut()
            .filter(|p| p.is_embedding())
            .for_each(|p| p.trainable = false);
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// SHA-256 over every tensor's bytes, in layout order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn write_into(&self, ck: &mut Checkpoint, prefix: &str) {
        for p in &self.params {
            ck.push(format!("{prefix}.{}", p.name), p.value.clone());
        }
    }

    /// Loads `prefix.*` tensors laid out for `config`. All tensors come back trainable.
    pub fn read_from(ck: &Checkpoint, prefix: &str, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        for (name, shape) in config.layout() {
            let value = ck.get(&format!("{prefix}.{name}"))?.clone();
            if value.shape() != shape.as_slice() {
                return Err(invalid(format!(
                    "checkpoint tensor {prefix}.{name} has shape {:?}, expected {shape:?}",
                    value.shape()
                )));
            }
            params.push(Param {
                name,
                value,
                trainable: true,
            });
        }
        Ok(Self { config, params })
    }

    fn check_inputs(&self, seqs: &[TokenSeq], conds: &[Condition]) -> Result<()> {
        if seqs.is_empty() || seqs.len() != conds.len() {
            return Err(invalid(format!("{} sequences but {} conditions", seqs.len(), conds.len())));
        }
        for s in seqs {
            if s.len() != self.config.seq_len {
                return Err(invalid(format!(
                    "sequence length {} != model length {}",
                    s.len(),
                    self.config.seq_len
                )));
            }
            s.check_range(self.config.vocab + 1)?;
        }
        for c in conds {
            if let Condition::Class(k) = c {
                if *k >= self.config.classes {
                    return Err(invalid(format!("class {k} out of range ({} classes)", self.config.classes)));
                }
            }
        }
        Ok(())
    }

    /// Records a forward pass. Parameters marked trainable become
    /// grad-requiring leaves when `with_grad` is set.
    pub fn forward(
        &self,
        tape: &mut Tape,
        seqs: &[TokenSeq],
        conds: &[Condition],
        perturb: Option<&[EmbeddingPerturbation]>,
        with_grad: bool,
    ) -> Result<Forward> {
        self.check_inputs(seqs, conds)?;
        let cfg = &self.config;
        let (b, l, d, heads) = (seqs.len(), cfg.seq_len, cfg.d_model, cfg.n_heads);
        let dh = d / heads;
        let start = tape.len();

        let leaves = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), with_grad && p.trainable))
            .collect::<maskdistill_tensor::Result<Vec<Var>>>()?;
        let w = |i: usize| leaves[i];

        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.ids().iter().copied()).collect();
        let mut tok = tape.gather_rows(w(0), &ids)?;
        if let Some(perturb) = perturb {
            if perturb.len() != b {
                return Err(invalid("one perturbation per sequence required"));
            }
            let mut keep = Vec::with_capacity(b * l * d);
            let mut noise = Vec::with_capacity(b * l * d);
            for p in perturb {
                if !(0.0..=1.0).contains(&p.sigma) || p.noise.shape() != [l, d] {
                    return Err(invalid(format!("bad perturbation (sigma {}, noise {:?})", p.sigma, p.noise.shape())));
                }
                let k = (1.0 - p.sigma * p.sigma).sqrt();
                keep.extend(std::iter::repeat_n(k, l * d));
                noise.extend(p.noise.data().iter().map(|e| p.sigma * e));
            }
            let keep = tape.constant(Array::new(vec![b * l, d], keep)?)?;
            let noise = tape.constant(Array::new(vec![b * l, d], noise)?)?;
            tok = tape.mul(tok, keep)?;
            tok = tape.add(tok, noise)?;
        }

        // Class rows come first, then the token table; the null condition
        // is token row V + 1.
        let cond_table = tape.concat_rows(w(1), w(0))?;
        let null_row = cfg.classes + cfg.vocab().null();
        let cond_ids: Vec<usize> = conds
            .iter()
            .flat_map(|c| {
                let row = match c {
                    Condition::Class(k) => *k,
                    Condition::Null => null_row,
                };
                std::iter::repeat_n(row, l)
            })
            .collect();
        let cond = tape.gather_rows(cond_table, &cond_ids)?;
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let pos = tape.gather_rows(w(2), &pos_ids)?;
        let mut x = tape.add(tok, cond)?;
        x = tape.add(x, pos)?;

        let scale = 1.0 / (dh as f64).sqrt();
        for blk in 0..cfg.n_blocks {
            let o = EMBEDDINGS + blk * PER_BLOCK;
            let h = tape.layer_norm(x, w(o), w(o + 1))?;
            let mut qkv = Vec::with_capacity(3);
            for j in 0..3 {
                let y = tape.matmul(h, w(o + 2 + 2 * j))?;
                let y = tape.add_bias(y, w(o + 3 + 2 * j))?;
                let y = tape.reshape(y, &[b, l, heads, dh])?;
                let y = tape.permute(y, &[0, 2, 1, 3])?;
                qkv.push(tape.reshape(y, &[b * heads, l, dh])?);
            }
            let scores = tape.batch_matmul(qkv[0], qkv[1], true)?;
            let scores = tape.scale(scores, scale)?;
            let att = tape.softmax(scores)?;
            let ctx = tape.batch_matmul(att, qkv[2], false)?;
            let ctx = tape.reshape(ctx, &[b, heads, l, dh])?;
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, &[b * l, d])?;
            let proj = tape.matmul(ctx, w(o + 8))?;
            let proj = tape.add_bias(proj, w(o + 9))?;
            x = tape.add(x, proj)?;

            let h = tape.layer_norm(x, w(o + 10), w(o + 11))?;
            let h = tape.matmul(h, w(o + 12))?;
            let h = tape.add_bias(h, w(o + 13))?;
            let h = tape.gelu(h)?;
            let h = tape.matmul(h, w(o + 14))?;
            let h = tape.add_bias(h, w(o + 15))?;
            x = tape.add(x, h)?;
        }
        let o = EMBEDDINGS + cfg.n_blocks * PER_BLOCK;
        let x = tape.layer_norm(x, w(o), w(o + 1))?;
        let z = tape.matmul(x, w(o + 2))?;
        let logits = tape.add_bias(z, w(o + 3))?;
        Ok(Forward {
            logits,
            leaves,
            nodes: start..tape.len(),
        })
    }

    /// Inference-only logits for a batch.
    pub fn predict_logits(
        &self,
        seqs: &[TokenSeq],
        conds: &[Condition],
        perturb: Option<&[EmbeddingPerturbation]>,
    ) -> Result<Grid> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, seqs, conds, perturb, false)?;
        Grid::from_rows(seqs.len(), self.config.seq_len, self.config.vocab, tape.value(f.logits).data().to_vec())
    }
}

/// `batch × len × vocab` array of logits or probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub batch: usize,
    pub len: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

pub type LogitsGrid = Grid;
pub type ProbGrid = Grid;

impl Grid {
    pub fn from_rows(batch: usize, len: usize, vocab: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * len * vocab {
            return Err(invalid(format!(
                "grid {batch}x{len}x{vocab} needs {} values, got {}",
                batch * len * vocab,
                data.len()
            )));
        }
        Ok(Self { batch, len, vocab, data })
    }

    pub fn row(&self, b: usize, i: usize) -> &[f64] {
        let s = (b * self.len + i) * self.vocab;
        &self.data[s..s + self.vocab]
    }

    pub fn row_mut(&mut self, b: usize, i: usize) -> &mut [f64] {
        let s = (b * self.len + i) * self.vocab;
        &mut self.data[s..s + self.vocab]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.vocab)
    }

    fn same_shape(&self, other: &Grid) -> bool {
        (self.batch, self.len, self.vocab) == (other.batch, other.len, other.vocab)
    }
}

/// Row-wise `softmax(z / τ)`.
pub fn softmax_temperature(logits: &Grid, tau: f64) -> Result<Grid> {
    if !(tau > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    let mut out = logits.clone();
    for row in out.data.chunks_mut(logits.vocab) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / tau).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

/// Classifier-free guidance: `z_uncond + scale·(z_cond − z_uncond)`.
pub fn cfg_combine(z_cond: &Grid, z_uncond: &Grid, scale: f64) -> Result<Grid> {
    if !z_cond.same_shape(z_uncond) {
        return Err(invalid("cfg_combine: logits grids differ in shape"));
    }
    let mut out = z_uncond.clone();
    for (o, c) in out.data.iter_mut().zip(&z_cond.data) {
        *o += scale * (c - *o);
    }
    Ok(out)
}

/// Anything that maps partially masked sequences to per-position logits.
pub trait Denoiser {
    fn vocab(&self) -> Vocab;
    fn seq_len(&self) -> usize;
    fn logits(&self, seqs: &[TokenSeq], conds: &[Condition]) -> Result<Grid>;
}

impl Denoiser for ModelParams {
    fn vocab(&self) -> Vocab {
        self.config.vocab()
    }

    fn seq_len(&self) -> usize {
        self.config.seq_len
    }

    fn logits(&self, seqs: &[TokenSeq], conds: &[Condition]) -> Result<Grid> {
        self.predict_logits(seqs, conds, None)
    }
}

/// How logits become sampling probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Guidance {
    pub cfg_scale: f64,
    pub temperature: f64,
    #[serde(default)]
    pub top_k: Option<usize>,
}

impl Default for Guidance {
    fn default() -> Self {
        Self {
            cfg_scale: 1.0,
            temperature: 1.0,
            top_k: None,
        }
    }
}

/// Guided, temperature-scaled, optionally top-k filtered probabilities.
pub fn guided_probs(den: &dyn Denoiser, seqs: &[TokenSeq], conds: &[Condition], g: &Guidance) -> Result<Grid> {
    let z_cond = den.logits(seqs, conds)?;
    let z = if g.cfg_scale != 1.0 && conds.iter().any(|c| *c != Condition::Null) {
        let nulls = vec![Condition::Null; conds.len()];
        let z_uncond = den.logits(seqs, &nulls)?;
        cfg_combine(&z_cond, &z_uncond, g.cfg_scale)?
    } else {
        z_cond
    };
    let mut p = softmax_temperature(&z, g.temperature)?;
    if let Some(k) = g.top_k {
        top_k_filter(&z, &mut p, k)?;
    }
    Ok(p)
}

/// Zeroes all but the `k` largest-logit entries of each row and renormalizes.
pub fn top_k_filter(logits: &Grid, probs: &mut Grid, k: usize) -> Result<()> {
    if k == 0 {
        return Err(invalid("top_k must be at least 1"));
    }
    if k >= logits.vocab {
        return Ok(());
    }
    let mut order: Vec<usize> = Vec::with_capacity(logits.vocab);
    for (z, p) in logits.rows().zip(probs.data.chunks_mut(logits.vocab)) {
        order.clear();
        order.extend(0..z.len());
        order.sort_by(|&a, &b| z[b].total_cmp(&z[a]));
        for &j in &order[k..] {
            p[j] = 0.0;
        }
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
    }
    Ok(())
}
