//! Training loop: losses, Adam with an inverse-square-root schedule,
//! deterministic batching, metrics records and checkpoints.
//!
//! Every random draw comes from a stream keyed by `(seed, update, slot)`,
//! so a run resumed from a checkpoint replays the uninterrupted run exactly.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::config::RunConfig;
use crate::data::EncodedPair;
use crate::decode::{DecodeOptions, Variant};
use crate::error::{io_err, write_atomic, Error, Result};
use crate::examplegen::{make_nart_example, make_smart_draws, random_mask, MaskPolicy, SmartOptions, TrainingExample};
use crate::metrics::{corpus_bleu, length_accuracy};
use crate::model::{Bound, CmlmConfig, CmlmModel, Dropout};
use crate::rng::SplitMix64;
use crate::tensor::gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
use crate::tensor::{Graph, Real, Tensor, TensorError, Var};
use crate::vocab::{Vocab, EOS, PAD};

const TAG_EPOCH: u64 = 0x6570_6f63;
const TAG_EXAMPLE: u64 = 0x6578_616d;
const TAG_DROPOUT: u64 = 0x6472_6f70;

/// Decoding iterations reported in every metrics record.
pub const LOGGED_ITERATIONS: [usize; 3] = [1, 4, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Nart,
    Smart,
}

impl TrainMode {
    /// NART models keep observed tokens while decoding; SMART models are
    /// trained to revise them.
    pub fn default_variant(self) -> Variant {
        match self {
            TrainMode::Nart => Variant::MaskedOnly,
            TrainMode::Smart => Variant::AllTokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmartConfig {
    pub passes: usize,
    pub mask_policy: MaskPolicy,
    /// Also train on the gold-masked first pass.
    pub first_pass_loss: bool,
}

impl Default for SmartConfig {
    fn default() -> Self {
        Self {
            passes: 2,
            mask_policy: MaskPolicy::Uniform,
            first_pass_loss: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub seed: u64,
    pub updates: u64,
    /// Sentences per update.
    pub batch_size: usize,
    pub warmup: u64,
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Weight λ of the length loss.
    pub length_loss_weight: f64,
    /// 0 disables label smoothing.
    pub label_smoothing: f64,
    /// Mask policy of NART examples.
    pub nart_mask_policy: MaskPolicy,
    pub smart: SmartConfig,
    pub checkpoint_interval: u64,
    pub log_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Nart,
            seed: 1,
            updates: 20_000,
            batch_size: 64,
            warmup: 500,
            peak_lr: 5e-4,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            length_loss_weight: 0.1,
            label_smoothing: 0.0,
            nart_mask_policy: MaskPolicy::Uniform,
            smart: SmartConfig::default(),
            checkpoint_interval: 1000,
            log_interval: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return err("train.batch_size must be positive".into());
        }
        if self.updates > 0 && self.warmup > self.updates {
            return err(format!("train.warmup {} exceeds train.updates {}", self.warmup, self.updates));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return err(format!("train.peak_lr {} must be positive", self.peak_lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return err(format!("train.{name} {b} outside [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return err("train.adam_eps must be positive".into());
        }
        if !(self.length_loss_weight >= 0.0 && self.length_loss_weight.is_finite()) {
            return err("train.length_loss_weight must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return err(format!("train.label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.checkpoint_interval == 0 || self.log_interval == 0 {
            return err("train.checkpoint_interval and train.log_interval must be positive".into());
        }
        self.nart_mask_policy.validate()?;
        self.smart.mask_policy.validate()?;
        if self.mode == TrainMode::Smart && self.smart.passes < 2 {
            return err(format!("train.smart.passes {} < 2", self.smart.passes));
        }
        Ok(())
    }
}

/// Inverse-square-root schedule: linear warmup to `peak` over `warmup`
/// updates, then `peak·sqrt(warmup/step)`. `step` counts from 1.
pub fn learning_rate(step: u64, warmup: u64, peak: f64) -> f64 {
    if warmup == 0 {
        return peak / (step.max(1) as f64).sqrt();
    }
    let s = step.max(1) as f64;
    let w = warmup as f64;
    peak * (s / w).min((w / s).sqrt())
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64, params: &[Tensor<f32>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor<f32>], grads: &[Tensor<f32>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.step += 1;
        let c1 = 1.0 - self.beta1.powf(self.step as f64);
        let c2 = 1.0 - self.beta2.powf(self.step as f64);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (lr / c1) as f32;
        let sqrt_c2 = c2.sqrt() as f32;
        let eps = self.eps as f32;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / (v.sqrt() / sqrt_c2 + eps);
            }
        }
    }
}

/// Examples of one update. `examples[..primary]` form the main token-loss
/// term and carry the length loss; any further examples (first-pass
/// examples of the "1st + 2nd pass" variant) form a second term.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub examples: Vec<TrainingExample>,
    pub primary: usize,
}

impl Batch {
    pub fn new(examples: Vec<TrainingExample>) -> Self {
        let primary = examples.len();
        Self { examples, primary }
    }
}

/// Loss terms of one batch as graph nodes.
pub struct Objective {
    pub total: Var,
    pub token: Var,
    pub length: Var,
    pub first_pass: Option<Var>,
}

/// Scalar loss values of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub token: f64,
    pub length: f64,
    pub first_pass: Option<f64>,
}

impl Objective {
    pub fn values<F: Real>(&self, g: &Graph<F>) -> LossValues {
        let v = |x: Var| g.value(x).data()[0].as_f64();
        LossValues {
            total: v(self.total),
            token: v(self.token),
            length: v(self.length),
            first_pass: self.first_pass.map(v),
        }
    }
}

/// Mean negative log-likelihood over loss positions. `log_probs` is
/// `[rows.len() * width, V]`; row `r` holds example `rows[r]` padded to
/// `width`. With smoothing `ε` each position's loss is
/// `(1−ε)·NLL + ε·(−mean log p)`.
pub fn token_loss<F: Real>(
    g: &mut Graph<F>,
    log_probs: Var,
    width: usize,
    examples: &[&TrainingExample],
    label_smoothing: f64,
) -> Result<Var> {
    let count: usize = examples.iter().map(|e| e.loss_mask.iter().filter(|&&m| m).count()).sum();
    if count == 0 {
        return Err(Error::Invalid("token loss over an empty loss mask".into()));
    }
    let rows = examples.len() * width;
    let mut targets = vec![PAD as usize; rows];
    let mut weights = vec![0.0f64; rows];
    for (b, ex) in examples.iter().enumerate() {
        if ex.gold.len() != ex.loss_mask.len() || ex.gold.len() > width {
            return Err(Error::Invalid(format!(
                "example {b}: gold length {}, loss mask length {}, width {width}",
                ex.gold.len(),
                ex.loss_mask.len()
            )));
        }
        for (i, (&tok, &m)) in ex.gold.iter().zip(&ex.loss_mask).enumerate() {
            targets[b * width + i] = tok as usize;
            if m {
                weights[b * width + i] = 1.0 / count as f64;
            }
        }
    }
    let w = g.constant(Tensor::from_f64(&[rows], &weights)?)?;
    let picked = g.pick(log_probs, &targets)?;
    let mut per_row = picked;
    if label_smoothing > 0.0 {
        let uniform = g.mean(log_probs, 1)?;
        let a = g.scale(picked, 1.0 - label_smoothing)?;
        let b = g.scale(uniform, label_smoothing)?;
        per_row = g.add(a, b)?;
    }
    let weighted = g.mul(per_row, w)?;
    let s = g.sum(weighted)?;
    Ok(g.scale(s, -1.0)?)
}

/// `−mean_b log p(N_b)` over the first `gold_lengths.len()` rows of
/// `length_log_probs` (`[B, max_len]`, class `c` ↔ length `c + 1`).
pub fn length_loss<F: Real>(g: &mut Graph<F>, length_log_probs: Var, gold_lengths: &[usize]) -> Result<Var> {
    let shape = g.shape(length_log_probs).to_vec();
    let (rows, classes) = (shape[0], shape[1]);
    if gold_lengths.is_empty() || gold_lengths.len() > rows {
        return Err(Error::Invalid(format!(
            "length loss over {} lengths with {rows} rows",
            gold_lengths.len()
        )));
    }
    let mut idx = vec![0usize; rows];
    let mut weights = vec![0.0f64; rows];
    for (b, &n) in gold_lengths.iter().enumerate() {
        if n == 0 || n > classes {
            return Err(Error::Invalid(format!("gold length {n} outside 1..={classes}")));
        }
        idx[b] = n - 1;
        weights[b] = 1.0 / gold_lengths.len() as f64;
    }
    let w = g.constant(Tensor::from_f64(&[rows], &weights)?)?;
    let picked = g.pick(length_log_probs, &idx)?;
    let weighted = g.mul(picked, w)?;
    let s = g.sum(weighted)?;
    Ok(g.scale(s, -1.0)?)
}

/// Builds the full objective `token + first_pass + λ·length` for `batch`.
pub fn objective<F: Real>(
    model: &CmlmModel<F>,
    g: &mut Graph<F>,
    p: &Bound,
    batch: &Batch,
    cfg: &TrainConfig,
    drop: &mut Option<Dropout<'_>>,
) -> Result<Objective> {
    if batch.primary == 0 || batch.primary > batch.examples.len() {
        return Err(Error::Invalid(format!(
            "batch of {} examples with {} primary",
            batch.examples.len(),
            batch.primary
        )));
    }
    let sources: Vec<&[u32]> = batch.examples.iter().map(|e| e.source.as_slice()).collect();
    let inputs: Vec<&[u32]> = batch.examples.iter().map(|e| e.input.as_slice()).collect();
    let out = model.forward(g, p, &sources, &inputs, drop)?;
    let w = out.tgt_width;
    let primary: Vec<&TrainingExample> = batch.examples[..batch.primary].iter().collect();
    let rest: Vec<&TrainingExample> = batch.examples[batch.primary..].iter().collect();
    let main_rows = g.slice(out.token_log_probs, 0, 0, batch.primary * w)?;
    let token = token_loss(g, main_rows, w, &primary, cfg.label_smoothing)?;
    let first_pass = if rest.is_empty() {
        None
    } else {
        let rows = g.slice(out.token_log_probs, 0, batch.primary * w, batch.examples.len() * w)?;
        Some(token_loss(g, rows, w, &rest, cfg.label_smoothing)?)
    };
    let lengths: Vec<usize> = primary.iter().map(|e| e.gold.len()).collect();
    let length = length_loss(g, out.length_log_probs, &lengths)?;
    let weighted = g.scale(length, cfg.length_loss_weight)?;
    let mut total = g.add(token, weighted)?;
    if let Some(fp) = first_pass {
        total = g.add(total, fp)?;
    }
    Ok(Objective {
        total,
        token,
        length,
        first_pass,
    })
}

/// Loss values and per-parameter gradients of `batch` without dropout.
pub fn loss_and_gradients<F: Real>(
    model: &CmlmModel<F>,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(LossValues, Vec<Tensor<F>>)> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, true)?;
    let obj = objective(model, &mut g, &p, batch, cfg, &mut None)?;
    let grads = g.backward(obj.total)?;
    let values = obj.values(&g);
    let grads = grads
        .into_slots()
        .into_iter()
        .zip(model.params().tensors.iter())
        .map(|(s, t)| s.unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((values, grads))
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub update: u64,
    /// Mean training token loss since the previous record.
    pub token_loss: f64,
    /// Dev argmax-length accuracy.
    pub length_acc: f64,
    #[serde(rename = "dev_bleu_T1")]
    pub dev_bleu_t1: f64,
    #[serde(rename = "dev_bleu_T4")]
    pub dev_bleu_t4: f64,
    #[serde(rename = "dev_bleu_T10")]
    pub dev_bleu_t10: f64,
}

/// Receives metrics records and checkpoints as training proceeds.
pub trait TrainSink {
    fn metrics(&mut self, record: &MetricsRecord) -> Result<()>;
    /// Stores a checkpoint and returns a label naming it.
    fn checkpoint(&mut self, update: u64, container: &Container) -> Result<String>;
}

/// Keeps everything in memory.
#[derive(Default, Debug)]
pub struct MemorySink {
    pub records: Vec<MetricsRecord>,
    pub checkpoints: Vec<(u64, Vec<u8>)>,
    /// Keep only the most recent checkpoint.
    pub keep_last_only: bool,
}

impl TrainSink for MemorySink {
    fn metrics(&mut self, record: &MetricsRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }

    fn checkpoint(&mut self, update: u64, container: &Container) -> Result<String> {
        if self.keep_last_only {
            self.checkpoints.clear();
        }
        self.checkpoints.push((update, container.to_bytes()));
        Ok(format!("memory checkpoint at update {update}"))
    }
}

/// Writes `metrics.jsonl`, `ckpt-NNNNNN.smck` and `last.smck` into a
/// directory.
pub struct DirSink {
    dir: PathBuf,
}

impl DirSink {
    pub const METRICS: &'static str = "metrics.jsonl";
    pub const LAST: &'static str = "last.smck";

    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn checkpoint_path(&self, update: u64) -> PathBuf {
        self.dir.join(format!("ckpt-{update:06}.smck"))
    }

    /// Drops metrics records after `update`, so a resumed run appends to a
    /// log that matches the uninterrupted one.
    pub fn truncate_metrics(&self, update: u64) -> Result<()> {
        let path = self.dir.join(Self::METRICS);
        let Ok(text) = std::fs::read_to_string(&path) else {
            return Ok(());
        };
        let mut kept = String::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let rec: MetricsRecord = serde_json::from_str(line).map_err(|e| Error::Format {
                what: "metrics log",
                msg: e.to_string(),
            })?;
            if rec.update <= update {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        write_atomic(&path, kept.as_bytes())
    }
}

impl TrainSink for DirSink {
    fn metrics(&mut self, record: &MetricsRecord) -> Result<()> {
        let path = self.dir.join(Self::METRICS);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(f, "{line}").map_err(io_err(&path))
    }

    fn checkpoint(&mut self, update: u64, container: &Container) -> Result<String> {
        let path = self.checkpoint_path(update);
        let bytes = container.to_bytes();
        write_atomic(&path, &bytes)?;
        write_atomic(&self.dir.join(Self::LAST), &bytes)?;
        Ok(path.display().to_string())
    }
}

/// Checkpoint metadata, stored as JSON inside the container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub vocab: Vec<String>,
    pub vocab_hash: String,
    pub update: u64,
    /// Seed and position of the keyed RNG streams; the next update draws
    /// from streams keyed by `rng_cursor + 1`.
    pub rng_seed: u64,
    pub rng_cursor: u64,
    pub adam_step: u64,
    /// Partial sums for the next metrics record.
    pub interval_loss_sum: f64,
    pub interval_updates: u64,
}

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

/// A model restored from a checkpoint.
pub struct Restored {
    pub meta: CheckpointMeta,
    pub vocab: Vocab,
    pub model: CmlmModel<f32>,
    pub adam: Adam,
}

pub fn parse_meta(container: &Container) -> Result<CheckpointMeta> {
    serde_json::from_slice(&container.metadata).map_err(|e| Error::Format {
        what: "checkpoint metadata",
        msg: e.to_string(),
    })
}

pub fn restore(container: &Container) -> Result<Restored> {
    let meta = parse_meta(container)?;
    let vocab = Vocab::from_text(&(meta.vocab.join("\n") + "\n"))?;
    if vocab.fingerprint() != meta.vocab_hash {
        return Err(Error::Format {
            what: "checkpoint",
            msg: format!(
                "stored vocabulary hashes to {} but is labelled {}",
                vocab.fingerprint(),
                meta.vocab_hash
            ),
        });
    }
    let mut params = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, t) in &container.tensors {
        if let Some(n) = name.strip_prefix(ADAM_M) {
            m.push((n.to_string(), t.clone()));
        } else if let Some(n) = name.strip_prefix(ADAM_V) {
            v.push((n.to_string(), t.clone()));
        } else {
            params.push((name.clone(), t.clone()));
        }
    }
    let model = CmlmModel::from_params(meta.config.model.clone(), vocab.len(), params)?;
    let names = &model.params().names;
    let order = |moments: Vec<(String, Tensor<f32>)>, what: &str| -> Result<Vec<Tensor<f32>>> {
        if moments.is_empty() {
            return Ok(model.params().tensors.iter().map(|t| Tensor::zeros(t.shape())).collect());
        }
        let same = moments.len() == names.len() && moments.iter().zip(names).all(|((n, _), want)| n == want);
        if !same {
            return Err(Error::Format {
                what: "checkpoint",
                msg: format!("{what} moments do not match the parameters"),
            });
        }
        Ok(moments.into_iter().map(|(_, t)| t).collect())
    };
    let tc = &meta.config.train;
    let adam = Adam {
        beta1: tc.beta1,
        beta2: tc.beta2,
        eps: tc.adam_eps,
        step: meta.adam_step,
        m: order(m, "first")?,
        v: order(v, "second")?,
    };
    Ok(Restored { meta, vocab, model, adam })
}

/// Fails unless `given` is the vocabulary the checkpoint was trained with.
pub fn check_vocab(meta: &CheckpointMeta, given: &Vocab) -> Result<()> {
    let given = given.fingerprint();
    if given != meta.vocab_hash {
        return Err(Error::VocabMismatch {
            checkpoint: meta.vocab_hash.clone(),
            given,
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub updates: u64,
    pub last_checkpoint: String,
    pub last_record: Option<MetricsRecord>,
}

pub struct Trainer<'a> {
    config: RunConfig,
    vocab: Vocab,
    train: &'a [EncodedPair],
    dev: &'a [EncodedPair],
    model: CmlmModel<f32>,
    adam: Adam,
    update: u64,
    loss_sum: f64,
    loss_count: u64,
    epoch_perm: Option<(u64, Vec<usize>)>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: RunConfig, vocab: Vocab, train: &'a [EncodedPair], dev: &'a [EncodedPair]) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Invalid("empty training split".into()));
        }
        let model = CmlmModel::new(config.model.clone(), vocab.len(), config.train.seed)?;
        let tc = &config.train;
        let adam = Adam::new(tc.beta1, tc.beta2, tc.adam_eps, &model.params().tensors);
        Ok(Self {
            config,
            vocab,
            train,
            dev,
            model,
            adam,
            update: 0,
            loss_sum: 0.0,
            loss_count: 0,
            epoch_perm: None,
        })
    }

    /// Continues a run from `container`. `config` may only differ from the
    /// checkpointed one in `train.updates`.
    pub fn resume(
        container: &Container,
        config: Option<RunConfig>,
        vocab: &Vocab,
        train: &'a [EncodedPair],
        dev: &'a [EncodedPair],
    ) -> Result<Self> {
        let r = restore(container)?;
        check_vocab(&r.meta, vocab)?;
        let mut cfg = r.meta.config.clone();
        if let Some(c) = config {
            let mut probe = c.clone();
            probe.train.updates = cfg.train.updates;
            if probe != cfg {
                return Err(Error::Config(
                    "resumed configuration differs from the checkpoint beyond train.updates".into(),
                ));
            }
            cfg = c;
        }
        cfg.validate()?;
        Ok(Self {
            config: cfg,
            vocab: r.vocab,
            train,
            dev,
            model: r.model,
            adam: r.adam,
            update: r.meta.update,
            loss_sum: r.meta.interval_loss_sum,
            loss_count: r.meta.interval_updates,
            epoch_perm: None,
        })
    }

    pub fn model(&self) -> &CmlmModel<f32> {
        &self.model
    }

    pub fn into_model(self) -> CmlmModel<f32> {
        self.model
    }

    pub fn update(&self) -> u64 {
        self.update
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn checkpoint(&self) -> Container {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            vocab_hash: self.vocab.fingerprint(),
            update: self.update,
            rng_seed: self.config.train.seed,
            rng_cursor: self.update,
            adam_step: self.adam.step,
            interval_loss_sum: self.loss_sum,
            interval_updates: self.loss_count,
        };
        let p = self.model.params();
        let mut tensors: Vec<(String, Tensor<f32>)> = p.names.iter().cloned().zip(p.tensors.iter().cloned()).collect();
        for (n, t) in p.names.iter().zip(&self.adam.m) {
            tensors.push((format!("{ADAM_M}{n}"), t.clone()));
        }
        for (n, t) in p.names.iter().zip(&self.adam.v) {
            tensors.push((format!("{ADAM_V}{n}"), t.clone()));
        }
        Container {
            metadata: serde_json::to_vec(&meta).expect("metadata serializes"),
            tensors,
        }
    }

    fn batch_indices(&mut self, update: u64) -> Vec<usize> {
        let n = self.train.len() as u64;
        let b = self.config.train.batch_size as u64;
        let seed = self.config.train.seed;
        (0..b)
            .map(|j| {
                let pos = (update - 1) * b + j;
                let epoch = pos / n;
                if self.epoch_perm.as_ref().map(|(e, _)| *e) != Some(epoch) {
                    let mut perm: Vec<usize> = (0..self.train.len()).collect();
                    SplitMix64::stream(seed, &[TAG_EPOCH, epoch]).shuffle(&mut perm);
                    self.epoch_perm = Some((epoch, perm));
                }
                self.epoch_perm.as_ref().expect("permutation cached").1[(pos % n) as usize]
            })
            .collect()
    }

    /// Training examples of update `update` (1-based) under the current
    /// parameters.
    pub fn make_batch(&mut self, update: u64) -> Result<Batch> {
        let idx = self.batch_indices(update);
        let seed = self.config.train.seed;
        let mut rngs: Vec<SplitMix64> = (0..idx.len())
            .map(|j| SplitMix64::stream(seed, &[TAG_EXAMPLE, update, j as u64]))
            .collect();
        let tc = &self.config.train;
        match tc.mode {
            TrainMode::Nart => Ok(Batch::new(
                idx.iter()
                    .zip(rngs.iter_mut())
                    .map(|(&i, rng)| {
                        let p = &self.train[i];
                        make_nart_example(&p.source, &p.target, tc.nart_mask_policy, rng)
                    })
                    .collect(),
            )),
            TrainMode::Smart => {
                let pairs: Vec<(&[u32], &[u32])> = idx
                    .iter()
                    .map(|&i| (self.train[i].source.as_slice(), self.train[i].target.as_slice()))
                    .collect();
                let opts = SmartOptions {
                    passes: tc.smart.passes,
                    policy: tc.smart.mask_policy,
                };
                let draws = make_smart_draws(&self.model, &pairs, &opts, &mut rngs)?;
                let mut examples = Vec::with_capacity(draws.len() * 2);
                let mut extra = Vec::new();
                for d in draws {
                    examples.push(d.example);
                    if tc.smart.first_pass_loss && d.gold_pass.loss_mask.iter().any(|&m| m) {
                        extra.push(d.gold_pass);
                    }
                }
                let primary = examples.len();
                examples.extend(extra);
                Ok(Batch { examples, primary })
            }
        }
    }

    /// Runs one update and returns its loss values.
    pub fn step(&mut self) -> Result<LossValues> {
        let update = self.update + 1;
        let batch = self.make_batch(update)?;
        let mut g = Graph::new();
        let p = self.model.bind(&mut g, true)?;
        let rate = self.config.model.dropout;
        let mut drop_rng = SplitMix64::stream(self.config.train.seed, &[TAG_DROPOUT, update]);
        let mut drop = (rate > 0.0).then(|| Dropout {
            rate,
            rng: &mut drop_rng,
        });
        let obj = objective(&self.model, &mut g, &p, &batch, &self.config.train, &mut drop)?;
        let values = obj.values(&g);
        if !values.total.is_finite() {
            return Err(TensorError::NonFinite { op: "loss" }.into());
        }
        let grads = g.backward(obj.total)?;
        let grads: Vec<Tensor<f32>> = grads
            .into_slots()
            .into_iter()
            .zip(self.model.params().tensors.iter())
            .map(|(s, t)| s.unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        let tc = &self.config.train;
        let lr = learning_rate(update, tc.warmup, tc.peak_lr);
        self.adam.update(&mut self.model.params_mut().tensors, &grads, lr);
        if let Some(bad) = self.model.params().tensors.iter().position(|t| !t.is_finite()) {
            return Err(Error::Invalid(format!(
                "parameter {} became non-finite",
                self.model.params().names[bad]
            )));
        }
        self.update = update;
        self.loss_sum += values.token;
        self.loss_count += 1;
        Ok(values)
    }

    fn dev_subset(&self) -> &[EncodedPair] {
        match self.config.eval.dev_sentences {
            0 => self.dev,
            n => &self.dev[..n.min(self.dev.len())],
        }
    }

    /// Dev length accuracy and BLEU at each of [`LOGGED_ITERATIONS`].
    pub fn dev_metrics(&self) -> Result<(f64, [f64; 3])> {
        let dev = self.dev_subset();
        if dev.is_empty() {
            return Ok((0.0, [0.0; 3]));
        }
        let acc = length_accuracy(&self.model, dev)?;
        let variant = self.config.eval.variant_for(self.config.train.mode);
        let mut bleu = [0.0; 3];
        for (b, &t) in bleu.iter_mut().zip(&LOGGED_ITERATIONS) {
            let opts = DecodeOptions::new(t, self.config.eval.length_beam, variant);
            *b = corpus_bleu(&self.model, dev, &opts)?;
        }
        Ok((acc, bleu))
    }

    fn emit_record(&mut self, sink: &mut dyn TrainSink) -> Result<MetricsRecord> {
        let (acc, bleu) = self.dev_metrics()?;
        let rec = MetricsRecord {
            update: self.update,
            token_loss: self.loss_sum / self.loss_count.max(1) as f64,
            length_acc: acc,
            dev_bleu_t1: bleu[0],
            dev_bleu_t4: bleu[1],
            dev_bleu_t10: bleu[2],
        };
        self.loss_sum = 0.0;
        self.loss_count = 0;
        sink.metrics(&rec)?;
        log::info!(
            "update {} token_loss {:.4} length_acc {:.3} dev BLEU T1 {:.2} T4 {:.2} T10 {:.2}",
            rec.update,
            rec.token_loss,
            rec.length_acc,
            rec.dev_bleu_t1,
            rec.dev_bleu_t4,
            rec.dev_bleu_t10
        );
        Ok(rec)
    }

    /// Trains until `train.updates`. A fresh run first stores the initial
    /// checkpoint. On a non-finite loss or parameter the run stops with
    /// [`Error::Diverged`] naming the last stored checkpoint.
    pub fn run(&mut self, sink: &mut dyn TrainSink) -> Result<TrainSummary> {
        let total = self.config.train.updates;
        let mut last_good = if self.update == 0 {
            sink.checkpoint(0, &self.checkpoint())?
        } else {
            format!("checkpoint at update {}", self.update)
        };
        let mut last_record = None;
        while self.update < total {
            let update = self.update + 1;
            match self.step() {
                Ok(_) => {}
                Err(e @ (Error::Tensor(TensorError::NonFinite { .. }) | Error::Invalid(_))) => {
                    return Err(Error::Diverged {
                        update,
                        reason: e.to_string(),
                        last_good,
                    });
                }
                Err(e) => return Err(e),
            }
            let tc = &self.config.train;
            if self.update % tc.log_interval == 0 || self.update == total {
                last_record = Some(self.emit_record(sink)?);
            }
            let tc = &self.config.train;
            if self.update % tc.checkpoint_interval == 0 || self.update == total {
                last_good = sink.checkpoint(self.update, &self.checkpoint())?;
            }
        }
        Ok(TrainSummary {
            updates: self.update,
            last_checkpoint: last_good,
            last_record,
        })
    }
}

/// End-to-end finite-difference check of the training objective on a tiny
/// CMLM in f64. The batch has padding, partial loss masks, a first-pass
/// term, label smoothing and the length loss, so every backward rule the
/// trainer relies on is exercised.
pub fn gradcheck_cmlm(seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let vocab_size = 12;
    let model: CmlmModel<f64> = CmlmModel::new(CmlmConfig::tiny(), vocab_size, seed)?;
    let mut rng = SplitMix64::stream(seed, &[0x6772_6164]);
    let sentence = |n: usize, rng: &mut SplitMix64| -> Vec<u32> {
        (0..n - 1).map(|_| 5 + rng.below(vocab_size - 5) as u32).chain([EOS]).collect()
    };
    let mut examples = Vec::new();
    for (i, &(src_len, tgt_len)) in [(4usize, 5usize), (6, 7), (3, 3)].iter().enumerate() {
        let source = sentence(src_len, &mut rng);
        let gold = sentence(tgt_len, &mut rng);
        let k = rng.range_inclusive(1, tgt_len);
        let (input, mut loss_mask) = random_mask(&gold, k, &mut rng);
        if i == 0 {
            loss_mask = vec![true; tgt_len];
        }
        examples.push(TrainingExample {
            source,
            input,
            gold,
            loss_mask,
        });
    }
    let batch = Batch { examples, primary: 2 };
    let cfg = TrainConfig {
        label_smoothing: 0.1,
        ..TrainConfig::default()
    };
    let params: Vec<(String, Tensor<f64>)> = model
        .params()
        .names
        .iter()
        .cloned()
        .zip(model.params().tensors.iter().cloned())
        .collect();
    let report = gradcheck(
        &params,
        |g, vars| {
            objective(&model, g, &vars.to_vec(), &batch, &cfg, &mut None)
                .map(|o| o.total)
                .map_err(|e| TensorError::Invalid {
                    op: "objective",
                    msg: e.to_string(),
                })
        },
        opts,
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        assert!((learning_rate(500, 500, 5e-4) - 5e-4).abs() < 1e-15);
        assert!((learning_rate(250, 500, 5e-4) - 2.5e-4).abs() < 1e-15);
        assert!((learning_rate(2000, 500, 5e-4) - 2.5e-4).abs() < 1e-15);
        assert!(learning_rate(1, 500, 5e-4) > 0.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::new(vec![2], vec![1.0f32, -1.0]).unwrap()];
        let g = vec![Tensor::new(vec![2], vec![0.5f32, -3.0]).unwrap()];
        let mut adam = Adam::new(0.9, 0.98, 1e-8, &p);
        adam.update(&mut p, &g, 0.1);
        // Bias-corrected first step is lr·sign(g).
        assert!((p[0].data()[0] - 0.9).abs() < 1e-5);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-5);
    }

    #[test]
    fn empty_loss_mask_is_an_error() {
        let mut g: Graph<f64> = Graph::new();
        let lp = g.constant(Tensor::zeros(&[2, 4])).unwrap();
        let ex = TrainingExample {
            source: vec![5, 3],
            input: vec![5, 3],
            gold: vec![5, 3],
            loss_mask: vec![false, false],
        };
        assert!(token_loss(&mut g, lp, 2, &[&ex], 0.0).is_err());
    }

    #[test]
    fn length_out_of_range_is_an_error() {
        let mut g: Graph<f64> = Graph::new();
        let lp = g.constant(Tensor::zeros(&[1, 4])).unwrap();
        assert!(length_loss(&mut g, lp, &[5]).is_err());
        assert!(length_loss(&mut g, lp, &[0]).is_err());
        assert!(length_loss(&mut g, lp, &[4]).is_ok());
    }

    #[test]
    fn token_loss_averages_masked_positions() {
        let mut g: Graph<f64> = Graph::new();
        let data: Vec<f64> = vec![-1.0, -2.0, -3.0, -4.0, -5.0, -6.0];
        let lp = g.constant(Tensor::from_f64(&[3, 2], &data).unwrap()).unwrap();
        let ex = TrainingExample {
            source: vec![5, 3],
            input: vec![1, 1, 1],
            gold: vec![0, 1, 1],
            loss_mask: vec![true, false, true],
        };
        let l = token_loss(&mut g, lp, 3, &[&ex], 0.0).unwrap();
        assert!((g.value(l).data()[0] - (1.0 + 6.0) / 2.0).abs() < 1e-12);
    }
}
