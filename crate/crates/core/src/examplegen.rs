//! Training example construction.
//!
//! NART masks `k` random positions of the gold target and computes loss on
//! the masked positions only. SMART masks the gold target, lets the current
//! model predict every position from that partial input, masks the
//! prediction again with a fresh count, and trains on all positions against
//! gold. The generation passes run on a separate, non-recording graph, so
//! they never contribute gradients.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Cmlm;
use crate::rng::SplitMix64;
use crate::vocab::MASK;

/// How many gold positions the first masking step hides.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    /// `k ~ Uniform{1..N}`
    #[default]
    Uniform,
    /// `k = round(r·N)`, half up.
    FixedRatio(f64),
}

impl MaskPolicy {
    pub const RATIOS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

    pub fn validate(&self) -> Result<()> {
        match self {
            MaskPolicy::Uniform => Ok(()),
            MaskPolicy::FixedRatio(r) if Self::RATIOS.contains(r) => Ok(()),
            MaskPolicy::FixedRatio(r) => Err(Error::Config(format!(
                "fixed mask ratio {r} is not one of {:?}",
                Self::RATIOS
            ))),
        }
    }
}

impl fmt::Display for MaskPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskPolicy::Uniform => f.write_str("Uniform"),
            MaskPolicy::FixedRatio(r) => write!(f, "{}%", (r * 100.0).round()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingExample {
    pub source: Vec<u32>,
    /// Target input with `<mask>` at unobserved positions.
    pub input: Vec<u32>,
    pub gold: Vec<u32>,
    /// Positions that contribute to the token cross-entropy.
    pub loss_mask: Vec<bool>,
}

impl TrainingExample {
    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.input.len()).filter(|&i| self.input[i] == MASK).collect()
    }
}

pub fn sample_mask_count(n: usize, policy: MaskPolicy, rng: &mut SplitMix64) -> usize {
    assert!(n >= 1, "mask count for an empty sequence");
    match policy {
        MaskPolicy::Uniform => rng.range_inclusive(1, n),
        MaskPolicy::FixedRatio(r) => ((r * n as f64 + 0.5).floor().max(0.0) as usize).min(n),
    }
}

/// Copy of `seq` with `<mask>` at `positions`.
pub fn apply_mask(seq: &[u32], positions: &[usize]) -> Vec<u32> {
    let mut out = seq.to_vec();
    for &p in positions {
        out[p] = MASK;
    }
    out
}

/// Masks `k` uniformly chosen positions of `seq`; returns the masked
/// sequence and the position indicator.
pub fn random_mask(seq: &[u32], k: usize, rng: &mut SplitMix64) -> (Vec<u32>, Vec<bool>) {
    let positions = rng.subset(seq.len(), k);
    let mut indicator = vec![false; seq.len()];
    for &p in &positions {
        indicator[p] = true;
    }
    (apply_mask(seq, &positions), indicator)
}

pub fn make_nart_example(
    source: &[u32],
    gold: &[u32],
    policy: MaskPolicy,
    rng: &mut SplitMix64,
) -> TrainingExample {
    let k = sample_mask_count(gold.len(), policy, rng);
    let (input, loss_mask) = random_mask(gold, k, rng);
    TrainingExample {
        source: source.to_vec(),
        input,
        gold: gold.to_vec(),
        loss_mask,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmartOptions {
    /// Forward passes per example; 2 is standard SMART.
    pub passes: usize,
    pub policy: MaskPolicy,
}

impl Default for SmartOptions {
    fn default() -> Self {
        Self {
            passes: 2,
            policy: MaskPolicy::Uniform,
        }
    }
}

/// Both examples built while generating one SMART example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SmartDraw {
    /// Gold-masked input with loss on its masked positions (NART-style).
    pub gold_pass: TrainingExample,
    /// Prediction-based input with loss on every position.
    pub example: TrainingExample,
}

/// Builds SMART examples for a batch of `(source, gold)` pairs, one RNG
/// stream per pair. Each pass over the batch is one batched, non-recording
/// forward of `model`.
pub fn make_smart_draws<M: Cmlm>(
    model: &M,
    pairs: &[(&[u32], &[u32])],
    opts: &SmartOptions,
    rngs: &mut [SplitMix64],
) -> Result<Vec<SmartDraw>> {
    if opts.passes < 2 {
        return Err(Error::Config(format!(
            "SMART needs at least 2 forward passes, got {}",
            opts.passes
        )));
    }
    assert_eq!(pairs.len(), rngs.len(), "one RNG stream per pair");
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let mut gold_pass = Vec::with_capacity(pairs.len());
    let mut current: Vec<Vec<u32>> = Vec::with_capacity(pairs.len());
    for (&(src, gold), rng) in pairs.iter().zip(rngs.iter_mut()) {
        let ex = make_nart_example(src, gold, opts.policy, rng);
        current.push(ex.input.clone());
        gold_pass.push(ex);
    }
    let sources: Vec<&[u32]> = pairs.iter().map(|p| p.0).collect();
    let enc = model.encode(&sources)?;
    let rows: Vec<usize> = (0..pairs.len()).collect();
    for _ in 1..opts.passes {
        let inputs: Vec<&[u32]> = current.iter().map(Vec::as_slice).collect();
        let tables = model.token_log_probs(&enc, &rows, &inputs)?;
        for ((table, cur), rng) in tables.iter().zip(current.iter_mut()).zip(rngs.iter_mut()) {
            let n = cur.len();
            let predicted: Vec<u32> = (0..n).map(|i| table.best_token(i).0).collect();
            assert_eq!(predicted.len(), n, "prediction changed the target length");
            let k = sample_mask_count(n, MaskPolicy::Uniform, rng);
            *cur = random_mask(&predicted, k, rng).0;
        }
    }
    Ok(gold_pass
        .into_iter()
        .zip(current)
        .map(|(gp, input)| {
            let n = input.len();
            SmartDraw {
                example: TrainingExample {
                    source: gp.source.clone(),
                    input,
                    gold: gp.gold.clone(),
                    loss_mask: vec![true; n],
                },
                gold_pass: gp,
            }
        })
        .collect())
}

/// Standard two-pass SMART example.
pub fn make_smart_example<M: Cmlm>(
    model: &M,
    source: &[u32],
    gold: &[u32],
    policy: MaskPolicy,
    rng: &mut SplitMix64,
) -> Result<TrainingExample> {
    make_smart_example_multipass(model, source, gold, 2, policy, rng)
}

/// SMART example built with `passes − 1` predict/re-mask rounds after the
/// gold mask.
pub fn make_smart_example_multipass<M: Cmlm>(
    model: &M,
    source: &[u32],
    gold: &[u32],
    passes: usize,
    policy: MaskPolicy,
    rng: &mut SplitMix64,
) -> Result<TrainingExample> {
    let opts = SmartOptions { passes, policy };
    let mut draws = make_smart_draws(model, &[(source, gold)], &opts, std::slice::from_mut(rng))?;
    Ok(draws.remove(0).example)
}

/// The "1st pass + 2nd pass" variant: the gold-masked example (loss on its
/// masked positions) and the SMART example (loss everywhere), both to be
/// trained on. With a 0% gold mask the first example has no loss positions
/// and is omitted.
pub fn loss_variant_first_plus_second<M: Cmlm>(
    model: &M,
    source: &[u32],
    gold: &[u32],
    opts: &SmartOptions,
    first_pass_loss: bool,
    rng: &mut SplitMix64,
) -> Result<Vec<TrainingExample>> {
    let draw = make_smart_draws(model, &[(source, gold)], opts, std::slice::from_mut(rng))?.remove(0);
    let mut out = Vec::with_capacity(2);
    if first_pass_loss && draw.gold_pass.loss_mask.iter().any(|&m| m) {
        out.push(draw.gold_pass);
    }
    out.push(draw.example);
    Ok(out)
}
