//! Encoder–decoder transformer CMLM.
//!
//! The decoder reads the partially observed target (`<mask>` at unobserved
//! positions) with bidirectional self-attention and emits a distribution at
//! every target position. Target length is classified separately from
//! mean-pooled encoder states. Token embeddings are shared by source, target
//! and the output projection; positions use learned tables.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::vocab::{Vocab, EOS, MASK, PAD};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const MASKED_SCORE: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmlmConfig {
    pub model_dim: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Number of length classes and size of the positional tables.
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for CmlmConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            hidden_dim: 128,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            max_len: 32,
            dropout: 0.1,
        }
    }
}

impl CmlmConfig {
    /// Dimensions small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            model_dim: 8,
            hidden_dim: 12,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            max_len: 8,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model_dim", self.model_dim),
            ("hidden_dim", self.hidden_dim),
            ("heads", self.heads),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.model_dim {} is not divisible by model.heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "model.dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Per-position log-probabilities over the vocabulary, row-major `[len, vocab]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbTable {
    pub len: usize,
    pub vocab: usize,
    pub data: Vec<f32>,
}

impl LogProbTable {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn prob(&self, i: usize, token: u32) -> f64 {
        (self.row(i)[token as usize] as f64).exp()
    }

    /// Most probable content-or-EOS token at position `i` and its
    /// probability. `<pad>`, `<mask>`, `<s>` and `<unk>` are never chosen.
    pub fn best_token(&self, i: usize) -> (u32, f64) {
        let row = self.row(i);
        let mut best = (EOS, row[EOS as usize]);
        for (t, &lp) in row.iter().enumerate().skip(crate::vocab::RESERVED.len()) {
            if lp > best.1 {
                best = (t as u32, lp);
            }
        }
        (best.0, (best.1 as f64).exp())
    }
}

/// The prediction interface that decoding and example generation run
/// against. Implemented by the transformer and by lookup-table oracles.
pub trait Cmlm: Sync {
    type Encoded: Send + Sync;

    fn vocab_size(&self) -> usize;

    fn max_len(&self) -> usize;

    fn encode(&self, sources: &[&[u32]]) -> Result<Self::Encoded>;

    /// Per source: log-probabilities of lengths `1..=max_len` (index `c`
    /// holds length `c + 1`).
    fn length_log_probs(&self, enc: &Self::Encoded) -> Result<Vec<Vec<f32>>>;

    /// Distributions at every position of every target. `rows[r]` is the
    /// index of the encoded source that `targets[r]` translates.
    fn token_log_probs(
        &self,
        enc: &Self::Encoded,
        rows: &[usize],
        targets: &[&[u32]],
    ) -> Result<Vec<LogProbTable>>;
}

/// Top-`k` lengths by probability, ties toward shorter lengths.
pub fn top_lengths(length_log_probs: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..length_log_probs.len()).collect();
    idx.sort_by(|&a, &b| {
        length_log_probs[b]
            .partial_cmp(&length_log_probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.into_iter().take(k).map(|c| c + 1).collect()
}

#[derive(Clone, Debug)]
pub struct ParamSet<F> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<F>>,
}

impl<F: Real> ParamSet<F> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }
}

#[derive(Clone, Debug)]
struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Debug)]
struct FfnIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Copy, Debug)]
struct NormIdx {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct EncLayerIdx {
    norm_attn: NormIdx,
    attn: AttnIdx,
    norm_ffn: NormIdx,
    ffn: FfnIdx,
}

#[derive(Clone, Debug)]
struct DecLayerIdx {
    norm_self: NormIdx,
    self_attn: AttnIdx,
    norm_cross: NormIdx,
    cross_attn: AttnIdx,
    norm_ffn: NormIdx,
    ffn: FfnIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: usize,
    out_bias: usize,
    pos_src: usize,
    pos_tgt: usize,
    enc: Vec<EncLayerIdx>,
    enc_norm: NormIdx,
    dec: Vec<DecLayerIdx>,
    dec_norm: NormIdx,
    len_w: usize,
    len_b: usize,
}

struct Builder<'a> {
    names: Vec<String>,
    tensors: Vec<Tensor<f64>>,
    rng: &'a mut SplitMix64,
}

impl Builder<'_> {
    fn push(&mut self, name: String, t: Tensor<f64>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> usize {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| self.rng.normal() * std).collect();
        self.push(name, Tensor::from_f64(shape, &v).expect("shape"))
    }

    fn fill(&mut self, name: String, shape: &[usize], value: f64) -> usize {
        self.push(name, Tensor::full(shape, value))
    }

    fn linear(&mut self, prefix: &str, w: &str, b: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        (
            self.normal(format!("{prefix}.{w}"), &[fan_in, fan_out], std),
            self.fill(format!("{prefix}.{b}"), &[fan_out], 0.0),
        )
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        let (wq, bq) = self.linear(prefix, "wq", "bq", d, d);
        let (wk, bk) = self.linear(prefix, "wk", "bk", d, d);
        let (wv, bv) = self.linear(prefix, "wv", "bv", d, d);
        let (wo, bo) = self.linear(prefix, "wo", "bo", d, d);
        AttnIdx { wq, bq, wk, bk, wv, bv, wo, bo }
    }

    fn ffn(&mut self, prefix: &str, d: usize, h: usize) -> FfnIdx {
        let (w1, b1) = self.linear(prefix, "w1", "b1", d, h);
        let (w2, b2) = self.linear(prefix, "w2", "b2", h, d);
        FfnIdx { w1, b1, w2, b2 }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIdx {
        NormIdx {
            gain: self.fill(format!("{prefix}.gain"), &[d], 1.0),
            bias: self.fill(format!("{prefix}.bias"), &[d], 0.0),
        }
    }
}

/// Parameters of one CMLM plus the layout that names them.
#[derive(Clone, Debug)]
pub struct CmlmModel<F> {
    config: CmlmConfig,
    vocab_size: usize,
    params: ParamSet<F>,
    layout: Layout,
}

/// Graph handles for every parameter of a model, in parameter order.
pub type Bound = Vec<Var>;

/// Dropout settings for one forward pass.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut SplitMix64,
}

/// Encoder output inside a graph.
pub struct EncoderOut {
    /// `[batch * src_width, model_dim]`
    pub states: Var,
    pub src_width: usize,
    pub src_lens: Vec<usize>,
}

/// Token and length log-probabilities of a training batch.
pub struct ForwardOut {
    /// `[batch * tgt_width, vocab]`
    pub token_log_probs: Var,
    /// `[batch, max_len]`
    pub length_log_probs: Var,
    pub tgt_width: usize,
}

fn layout_of(config: &CmlmConfig, vocab_size: usize, rng: &mut SplitMix64) -> (Vec<String>, Vec<Tensor<f64>>, Layout) {
    let d = config.model_dim;
    let mut b = Builder {
        names: Vec::new(),
        tensors: Vec::new(),
        rng,
    };
    let embed = b.normal("embed.tokens".into(), &[vocab_size, d], (d as f64).powf(-0.5));
    let out_bias = b.fill("embed.out_bias".into(), &[vocab_size], 0.0);
    let pos_src = b.normal("embed.pos_src".into(), &[config.max_len, d], 0.5);
    let pos_tgt = b.normal("embed.pos_tgt".into(), &[config.max_len, d], 0.5);
    let enc = (0..config.enc_layers)
        .map(|l| {
            let p = format!("enc.{l}");
            EncLayerIdx {
                norm_attn: b.norm(&format!("{p}.norm_attn"), d),
                attn: b.attn(&format!("{p}.self_attn"), d),
                norm_ffn: b.norm(&format!("{p}.norm_ffn"), d),
                ffn: b.ffn(&format!("{p}.ffn"), d, config.hidden_dim),
            }
        })
        .collect();
    let enc_norm = b.norm("enc.norm", d);
    let dec = (0..config.dec_layers)
        .map(|l| {
            let p = format!("dec.{l}");
            DecLayerIdx {
                norm_self: b.norm(&format!("{p}.norm_self"), d),
                self_attn: b.attn(&format!("{p}.self_attn"), d),
                norm_cross: b.norm(&format!("{p}.norm_cross"), d),
                cross_attn: b.attn(&format!("{p}.cross_attn"), d),
                norm_ffn: b.norm(&format!("{p}.norm_ffn"), d),
                ffn: b.ffn(&format!("{p}.ffn"), d, config.hidden_dim),
            }
        })
        .collect();
    let dec_norm = b.norm("dec.norm", d);
    let len_w = b.normal("length.w".into(), &[d, config.max_len], (d as f64).powf(-0.5));
    let len_b = b.fill("length.b".into(), &[config.max_len], 0.0);
    let layout = Layout {
        embed,
        out_bias,
        pos_src,
        pos_tgt,
        enc,
        enc_norm,
        dec,
        dec_norm,
        len_w,
        len_b,
    };
    (b.names, b.tensors, layout)
}

impl<F: Real> CmlmModel<F> {
    /// Randomly initialized model.
    pub fn new(config: CmlmConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size <= crate::vocab::RESERVED.len() {
            return Err(Error::Config(format!("vocabulary of {vocab_size} has no content tokens")));
        }
        let mut rng = SplitMix64::stream(seed, &[0x696e_6974]);
        let (names, tensors, layout) = layout_of(&config, vocab_size, &mut rng);
        Ok(Self {
            config,
            vocab_size,
            params: ParamSet {
                names,
                tensors: tensors.iter().map(Tensor::cast).collect(),
            },
            layout,
        })
    }

    /// Rebuilds a model from named tensors (e.g. a checkpoint). Names and
    /// shapes must match the layout implied by `config` exactly.
    pub fn from_params(config: CmlmConfig, vocab_size: usize, named: Vec<(String, Tensor<F>)>) -> Result<Self> {
        let template = Self::new(config.clone(), vocab_size, 0)?;
        if named.len() != template.params.len() {
            return Err(Error::Format {
                what: "model parameters",
                msg: format!("expected {} tensors, found {}", template.params.len(), named.len()),
            });
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, t), (want, tt)) in named
            .into_iter()
            .zip(template.params.names.iter().zip(&template.params.tensors))
        {
            if &name != want || t.shape() != tt.shape() {
                return Err(Error::Format {
                    what: "model parameters",
                    msg: format!("{name} {:?} where {want} {:?} expected", t.shape(), tt.shape()),
                });
            }
            tensors.push(t);
        }
        Ok(Self {
            config,
            vocab_size,
            params: ParamSet {
                names: template.params.names,
                tensors,
            },
            layout: template.layout,
        })
    }

    pub fn config(&self) -> &CmlmConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn cast<G: Real>(&self) -> CmlmModel<G> {
        CmlmModel {
            config: self.config.clone(),
            vocab_size: self.vocab_size,
            params: ParamSet {
                names: self.params.names.clone(),
                tensors: self.params.tensors.iter().map(Tensor::cast).collect(),
            },
            layout: self.layout.clone(),
        }
    }

    /// Puts every parameter on `g`: as gradient slots `0..n` when
    /// `trainable`, as constants otherwise.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> Result<Bound> {
        self.params
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if trainable {
                    g.param(i, t.clone())
                } else {
                    g.constant(t.clone())
                }
                .map_err(Error::from)
            })
            .collect()
    }

    fn check_source(&self, src: &[u32]) -> Result<()> {
        if src.is_empty() || src.last() != Some(&EOS) {
            return Err(Error::Invalid("source must be nonempty and end with </s>".into()));
        }
        if src.len() > self.config.max_len {
            return Err(Error::Invalid(format!(
                "source of length {} exceeds the positional table ({})",
                src.len(),
                self.config.max_len
            )));
        }
        if src.contains(&PAD) {
            return Err(Error::Invalid("source contains <pad>".into()));
        }
        Ok(())
    }

    fn check_target(&self, tgt: &[u32]) -> Result<()> {
        if tgt.is_empty() || tgt.len() > self.config.max_len {
            return Err(Error::Invalid(format!(
                "target length {} outside 1..={}",
                tgt.len(),
                self.config.max_len
            )));
        }
        if tgt.contains(&PAD) {
            return Err(Error::Invalid("target contains <pad> within its length".into()));
        }
        if tgt.iter().any(|&t| t as usize >= self.vocab_size) {
            return Err(Error::Invalid("target token outside the vocabulary".into()));
        }
        Ok(())
    }

    /// Token embeddings scaled by √d plus positions, PAD-padded to `width`.
    fn embed(&self, g: &mut Graph<F>, p: &Bound, seqs: &[&[u32]], width: usize, pos: usize) -> Result<Var> {
        let ids: Vec<usize> = seqs
            .iter()
            .flat_map(|s| (0..width).map(move |i| s.get(i).copied().unwrap_or(PAD) as usize))
            .collect();
        let tok = g.embedding(p[self.layout.embed], &ids)?;
        let tok = g.scale(tok, (self.config.model_dim as f64).sqrt())?;
        let positions: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..width).collect();
        let pe = g.embedding(p[pos], &positions)?;
        Ok(g.add(tok, pe)?)
    }

    /// Additive attention mask `[batch * heads, queries, keys]` hiding key
    /// positions at or beyond each row's length.
    fn key_mask(&self, g: &mut Graph<F>, key_lens: &[usize], queries: usize, keys: usize) -> Result<Var> {
        let h = self.config.heads;
        let mut data = Vec::with_capacity(key_lens.len() * h * queries * keys);
        for &len in key_lens {
            let row: Vec<F> = (0..keys)
                .map(|k| if k < len { F::zero() } else { F::from_f64_lossy(MASKED_SCORE) })
                .collect();
            for _ in 0..h * queries {
                data.extend_from_slice(&row);
            }
        }
        Ok(g.constant(Tensor::new(vec![key_lens.len() * h, queries, keys], data)?)?)
    }

    fn dropout(&self, g: &mut Graph<F>, x: Var, drop: &mut Option<Dropout<'_>>) -> Result<Var> {
        let Some(d) = drop.as_mut() else { return Ok(x) };
        if d.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - d.rate;
        let scale = F::from_f64_lossy(1.0 / keep);
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<F> = (0..n)
            .map(|_| if d.rng.next_f64() < keep { scale } else { F::zero() })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?)?;
        Ok(g.mul(x, m)?)
    }

    fn norm(&self, g: &mut Graph<F>, p: &Bound, idx: NormIdx, x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, p[idx.gain], p[idx.bias], LAYER_NORM_EPS)?)
    }

    fn linear(&self, g: &mut Graph<F>, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = g.matmul(x, w)?;
        Ok(g.add(y, b)?)
    }

    fn split_heads(&self, g: &mut Graph<F>, x: Var, batch: usize, len: usize) -> Result<Var> {
        let h = self.config.heads;
        let dh = self.config.model_dim / h;
        let x = g.reshape(x, &[batch, len, h, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        Ok(g.reshape(x, &[batch * h, len, dh])?)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        a: &AttnIdx,
        queries: Var,
        keys: Var,
        batch: usize,
        q_len: usize,
        k_len: usize,
        mask: Var,
    ) -> Result<Var> {
        let d = self.config.model_dim;
        let dh = d / self.config.heads;
        let q = self.linear(g, queries, p[a.wq], p[a.bq])?;
        let k = self.linear(g, keys, p[a.wk], p[a.bk])?;
        let v = self.linear(g, keys, p[a.wv], p[a.bv])?;
        let q = self.split_heads(g, q, batch, q_len)?;
        let k = self.split_heads(g, k, batch, k_len)?;
        let v = self.split_heads(g, v, batch, k_len)?;
        let scores = g.matmul_t(q, k)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let scores = g.add(scores, mask)?;
        let probs = g.softmax(scores, 2)?;
        let ctx = g.matmul(probs, v)?;
        let ctx = g.reshape(ctx, &[batch, self.config.heads, q_len, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[batch * q_len, d])?;
        self.linear(g, ctx, p[a.wo], p[a.bo])
    }

    fn ffn(&self, g: &mut Graph<F>, p: &Bound, f: &FfnIdx, x: Var) -> Result<Var> {
        let h = self.linear(g, x, p[f.w1], p[f.b1])?;
        let h = g.relu(h)?;
        self.linear(g, h, p[f.w2], p[f.b2])
    }

    /// Runs the encoder over PAD-padded sources.
    pub fn encode_graph(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        sources: &[&[u32]],
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<EncoderOut> {
        if sources.is_empty() {
            return Err(Error::Invalid("empty source batch".into()));
        }
        for s in sources {
            self.check_source(s)?;
        }
        let batch = sources.len();
        let width = sources.iter().map(|s| s.len()).max().unwrap_or(1);
        let src_lens: Vec<usize> = sources.iter().map(|s| s.len()).collect();
        let mask = self.key_mask(g, &src_lens, width, width)?;
        let x = self.embed(g, p, sources, width, self.layout.pos_src)?;
        let mut x = self.dropout(g, x, drop)?;
        for layer in &self.layout.enc {
            let h = self.norm(g, p, layer.norm_attn, x)?;
            let h = self.attention(g, p, &layer.attn, h, h, batch, width, width, mask)?;
            let h = self.dropout(g, h, drop)?;
            x = g.add(x, h)?;
            let h = self.norm(g, p, layer.norm_ffn, x)?;
            let h = self.ffn(g, p, &layer.ffn, h)?;
            let h = self.dropout(g, h, drop)?;
            x = g.add(x, h)?;
        }
        let states = self.norm(g, p, self.layout.enc_norm, x)?;
        Ok(EncoderOut {
            states,
            src_width: width,
            src_lens,
        })
    }

    /// Length log-probabilities `[batch, max_len]` from mean-pooled
    /// (PAD-excluded) encoder states.
    pub fn length_graph(&self, g: &mut Graph<F>, p: &Bound, enc: &EncoderOut) -> Result<Var> {
        let batch = enc.src_lens.len();
        let w = enc.src_width;
        let mut pool = vec![F::zero(); batch * batch * w];
        for (b, &len) in enc.src_lens.iter().enumerate() {
            let inv = F::one() / F::from_usize(len).unwrap();
            for i in 0..len {
                pool[b * batch * w + b * w + i] = inv;
            }
        }
        let pool = g.constant(Tensor::new(vec![batch, batch * w], pool)?)?;
        let pooled = g.matmul(pool, enc.states)?;
        let logits = self.linear(g, pooled, p[self.layout.len_w], p[self.layout.len_b])?;
        Ok(g.log_softmax(logits, 1)?)
    }

    /// Decoder over targets whose row `r` attends to encoder row `r` of
    /// `memory` (`[batch * src_width, model_dim]`). Returns
    /// `[batch * tgt_width, vocab]` log-probabilities.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_graph(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        memory: Var,
        src_width: usize,
        src_lens: &[usize],
        targets: &[&[u32]],
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<(Var, usize)> {
        for t in targets {
            self.check_target(t)?;
        }
        let batch = targets.len();
        let width = targets.iter().map(|t| t.len()).max().unwrap_or(1);
        let tgt_lens: Vec<usize> = targets.iter().map(|t| t.len()).collect();
        let self_mask = self.key_mask(g, &tgt_lens, width, width)?;
        let cross_mask = self.key_mask(g, src_lens, width, src_width)?;
        let x = self.embed(g, p, targets, width, self.layout.pos_tgt)?;
        let mut x = self.dropout(g, x, drop)?;
        for layer in &self.layout.dec {
            let h = self.norm(g, p, layer.norm_self, x)?;
            let h = self.attention(g, p, &layer.self_attn, h, h, batch, width, width, self_mask)?;
            let h = self.dropout(g, h, drop)?;
            x = g.add(x, h)?;
            let h = self.norm(g, p, layer.norm_cross, x)?;
            let h = self.attention(g, p, &layer.cross_attn, h, memory, batch, width, src_width, cross_mask)?;
            let h = self.dropout(g, h, drop)?;
            x = g.add(x, h)?;
            let h = self.norm(g, p, layer.norm_ffn, x)?;
            let h = self.ffn(g, p, &layer.ffn, h)?;
            let h = self.dropout(g, h, drop)?;
            x = g.add(x, h)?;
        }
        let h = self.norm(g, p, self.layout.dec_norm, x)?;
        let logits = g.matmul_t(h, p[self.layout.embed])?;
        let logits = g.add(logits, p[self.layout.out_bias])?;
        Ok((g.log_softmax(logits, 1)?, width))
    }

    /// Full forward pass of aligned `(source, target input)` pairs.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        sources: &[&[u32]],
        targets: &[&[u32]],
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<ForwardOut> {
        if sources.len() != targets.len() {
            return Err(Error::Invalid(format!(
                "{} sources but {} targets",
                sources.len(),
                targets.len()
            )));
        }
        let enc = self.encode_graph(g, p, sources, drop)?;
        let length_log_probs = self.length_graph(g, p, &enc)?;
        let (token_log_probs, tgt_width) =
            self.decode_graph(g, p, enc.states, enc.src_width, &enc.src_lens, targets, drop)?;
        Ok(ForwardOut {
            token_log_probs,
            length_log_probs,
            tgt_width,
        })
    }
}

/// Encoder states computed once and reused across predict steps.
pub struct EncodedSources<F> {
    /// `[batch, src_width, model_dim]` flattened.
    states: Vec<F>,
    src_width: usize,
    src_lens: Vec<usize>,
    length_log_probs: Vec<Vec<f32>>,
}

impl<F: Real> Cmlm for CmlmModel<F> {
    type Encoded = EncodedSources<F>;

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn encode(&self, sources: &[&[u32]]) -> Result<Self::Encoded> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false)?;
        let enc = self.encode_graph(&mut g, &p, sources, &mut None)?;
        let len = self.length_graph(&mut g, &p, &enc)?;
        let max_len = self.config.max_len;
        let length_log_probs = g
            .value(len)
            .data()
            .chunks(max_len)
            .map(|r| r.iter().map(|v| v.as_f64() as f32).collect())
            .collect();
        Ok(EncodedSources {
            states: g.value(enc.states).data().to_vec(),
            src_width: enc.src_width,
            src_lens: enc.src_lens,
            length_log_probs,
        })
    }

    fn length_log_probs(&self, enc: &Self::Encoded) -> Result<Vec<Vec<f32>>> {
        Ok(enc.length_log_probs.clone())
    }

    fn token_log_probs(
        &self,
        enc: &Self::Encoded,
        rows: &[usize],
        targets: &[&[u32]],
    ) -> Result<Vec<LogProbTable>> {
        if rows.len() != targets.len() {
            return Err(Error::Invalid("rows and targets differ in count".into()));
        }
        if targets.is_empty() {
            return Ok(Vec::new());
        }
        let d = self.config.model_dim;
        let w = enc.src_width;
        let mut memory = Vec::with_capacity(rows.len() * w * d);
        let mut lens = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= enc.src_lens.len() {
                return Err(Error::Invalid(format!("row {r} has no encoded source")));
            }
            memory.extend_from_slice(&enc.states[r * w * d..(r + 1) * w * d]);
            lens.push(enc.src_lens[r]);
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, false)?;
        let memory = g.constant(Tensor::new(vec![rows.len() * w, d], memory)?)?;
        let (lp, width) = self.decode_graph(&mut g, &p, memory, w, &lens, targets, &mut None)?;
        let v = self.vocab_size;
        let data = g.value(lp).data();
        Ok(targets
            .iter()
            .enumerate()
            .map(|(r, t)| {
                let start = r * width * v;
                LogProbTable {
                    len: t.len(),
                    vocab: v,
                    data: data[start..start + t.len() * v]
                        .iter()
                        .map(|x| x.as_f64() as f32)
                        .collect(),
                }
            })
            .collect())
    }
}

/// Lookup-table model that knows the reference translation of every source
/// it was built with. At the reference length it puts probability
/// `confidence` on the reference token at every position regardless of the
/// observed input; the length head puts `confidence` on the reference
/// length. Unknown sources and other lengths get uniform distributions.
#[derive(Clone, Debug)]
pub struct OracleModel {
    table: HashMap<Vec<u32>, Vec<u32>>,
    vocab_size: usize,
    max_len: usize,
    confidence: f64,
}

impl OracleModel {
    pub fn new<'a, I>(pairs: I, vocab_size: usize, max_len: usize) -> Self
    where
        I: IntoIterator<Item = (&'a [u32], &'a [u32])>,
    {
        Self {
            table: pairs
                .into_iter()
                .map(|(s, t)| (s.to_vec(), t.to_vec()))
                .collect(),
            vocab_size,
            max_len,
            confidence: 0.9,
        }
    }

    pub fn from_vocab(pairs: &[crate::data::EncodedPair], vocab: &Vocab, max_len: usize) -> Self {
        Self::new(
            pairs.iter().map(|p| (p.source.as_slice(), p.target.as_slice())),
            vocab.len(),
            max_len,
        )
    }

    pub fn reference(&self, source: &[u32]) -> Option<&[u32]> {
        self.table.get(source).map(Vec::as_slice)
    }

    fn peaked(&self, n: usize, at: usize) -> Vec<f32> {
        let rest = ((1.0 - self.confidence) / (n - 1) as f64).ln() as f32;
        let mut v = vec![rest; n];
        v[at] = self.confidence.ln() as f32;
        v
    }
}

impl Cmlm for OracleModel {
    type Encoded = Vec<Option<Vec<u32>>>;

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn encode(&self, sources: &[&[u32]]) -> Result<Self::Encoded> {
        Ok(sources.iter().map(|s| self.table.get(*s).cloned()).collect())
    }

    fn length_log_probs(&self, enc: &Self::Encoded) -> Result<Vec<Vec<f32>>> {
        Ok(enc
            .iter()
            .map(|r| match r {
                Some(t) if t.len() <= self.max_len => self.peaked(self.max_len, t.len() - 1),
                _ => vec![-(self.max_len as f32).ln(); self.max_len],
            })
            .collect())
    }

    fn token_log_probs(
        &self,
        enc: &Self::Encoded,
        rows: &[usize],
        targets: &[&[u32]],
    ) -> Result<Vec<LogProbTable>> {
        let v = self.vocab_size;
        Ok(rows
            .iter()
            .zip(targets)
            .map(|(&r, t)| {
                let mut data = Vec::with_capacity(t.len() * v);
                for i in 0..t.len() {
                    match &enc[r] {
                        Some(reference) if reference.len() == t.len() => {
                            data.extend(self.peaked(v, reference[i] as usize));
                        }
                        _ => data.extend(std::iter::repeat(-(v as f32).ln()).take(v)),
                    }
                }
                LogProbTable {
                    len: t.len(),
                    vocab: v,
                    data,
                }
            })
            .collect())
    }
}

/// Replaces every position of `target` with `<mask>`.
pub fn fully_masked(n: usize) -> Vec<u32> {
    vec![MASK; n]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(seed: u64) -> CmlmModel<f64> {
        CmlmModel::new(CmlmConfig::tiny(), 12, seed).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = CmlmConfig::default();
        assert!(c.validate().is_ok());
        c.heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn encode_shape_contract() {
        let m = model(1);
        let mut g = Graph::new();
        let p = m.bind(&mut g, false).unwrap();
        let src = [5u32, 6, 7, 8, EOS];
        let enc = m.encode_graph(&mut g, &p, &[&src], &mut None).unwrap();
        assert_eq!(g.shape(enc.states), &[5, 8]);
        assert_eq!(enc.src_width, 5);
    }

    #[test]
    fn identical_rows_identical_states_and_batch_permutation() {
        let m = model(2);
        let a = [5u32, 6, 7, EOS];
        let b = [9u32, 10, EOS];
        let run = |srcs: &[&[u32]]| {
            let mut g = Graph::new();
            let p = m.bind(&mut g, false).unwrap();
            let enc = m.encode_graph(&mut g, &p, srcs, &mut None).unwrap();
            let w = enc.src_width;
            let data = g.value(enc.states).data().to_vec();
            (data, w)
        };
        let (same, w) = run(&[&a, &a]);
        assert_eq!(same[..w * 8], same[w * 8..]);
        let (ab, w1) = run(&[&a, &b]);
        let (ba, w2) = run(&[&b, &a]);
        assert_eq!(w1, w2);
        let row = |d: &[f64], r: usize, len: usize| d[r * w1 * 8..(r * w1 + len) * 8].to_vec();
        for (x, y) in row(&ab, 0, 4).iter().zip(row(&ba, 1, 4)) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in row(&ab, 1, 3).iter().zip(row(&ba, 0, 3)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_long_source_and_pad_in_target() {
        let m = model(3);
        let long: Vec<u32> = (0..9).map(|_| 5).chain([EOS]).collect();
        assert!(m.encode(&[&long]).is_err());
        let enc = m.encode(&[&[5, EOS]]).unwrap();
        assert!(m.token_log_probs(&enc, &[0], &[&[5, PAD, 6]]).is_err());
    }

    #[test]
    fn predictions_normalize_at_every_position() {
        let m = model(4);
        let enc = m.encode(&[&[5, 6, 7, EOS]]).unwrap();
        let out = m.token_log_probs(&enc, &[0], &[&fully_masked(6)]).unwrap();
        assert_eq!(out[0].len, 6);
        for i in 0..6 {
            let s: f64 = out[0].row(i).iter().map(|&l| (l as f64).exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let lens = m.length_log_probs(&enc).unwrap();
        let s: f64 = lens[0].iter().map(|&l| (l as f64).exp()).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn deterministic_without_dropout() {
        let m = model(5);
        let enc = m.encode(&[&[5, 6, EOS]]).unwrap();
        let y = [MASK, 7, MASK, EOS];
        let a = m.token_log_probs(&enc, &[0], &[&y]).unwrap();
        let b = m.token_log_probs(&enc, &[0], &[&y]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn later_observed_token_changes_earlier_position() {
        let m = model(6);
        let enc = m.encode(&[&[5, 6, 7, EOS]]).unwrap();
        let a = m.token_log_probs(&enc, &[0], &[&[MASK, MASK, 8, EOS]]).unwrap();
        let b = m.token_log_probs(&enc, &[0], &[&[MASK, MASK, 9, EOS]]).unwrap();
        // Position 0 precedes the perturbed position 2.
        assert_ne!(a[0].row(0), b[0].row(0));
    }

    #[test]
    fn top_lengths_descending_and_distinct() {
        let lp = [-3.0f32, -0.5, -1.0, -0.5, -2.0];
        assert_eq!(top_lengths(&lp, 3), vec![2, 4, 3]);
    }

    #[test]
    fn from_params_roundtrip_and_mismatch() {
        let m = model(7);
        let named: Vec<_> = m
            .params()
            .names
            .iter()
            .cloned()
            .zip(m.params().tensors.iter().cloned())
            .collect();
        let back = CmlmModel::from_params(CmlmConfig::tiny(), 12, named.clone()).unwrap();
        assert_eq!(back.params().tensors, m.params().tensors);
        let mut bad = named;
        bad.swap(0, 1);
        assert!(CmlmModel::<f64>::from_params(CmlmConfig::tiny(), 12, bad).is_err());
    }

    #[test]
    fn oracle_predicts_reference() {
        let src = [5u32, 6, EOS];
        let tgt = [7u32, 8, 9, EOS];
        let o = OracleModel::new([(&src[..], &tgt[..])], 12, 8);
        let enc = o.encode(&[&src]).unwrap();
        assert_eq!(top_lengths(&o.length_log_probs(&enc).unwrap()[0], 1), vec![4]);
        let lp = o.token_log_probs(&enc, &[0], &[&fully_masked(4)]).unwrap();
        let toks: Vec<u32> = (0..4).map(|i| lp[0].best_token(i).0).collect();
        assert_eq!(toks, tgt);
    }
}
