//! Mask-predict decoding.
//!
//! For each of the top-ℓ predicted lengths, decoding starts from a fully
//! masked target and alternates a predict step with a mask step that
//! re-masks the `n_t` least confident positions, `n_t` shrinking linearly
//! with the iteration. The candidate with the best mean log-confidence wins.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{top_lengths, Cmlm, LogProbTable};
use crate::vocab::MASK;

/// Which positions a predict step may rewrite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    MaskedOnly,
    AllTokens,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::MaskedOnly => "masked_only",
            Variant::AllTokens => "all_tokens",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked_only" => Ok(Variant::MaskedOnly),
            "all_tokens" => Ok(Variant::AllTokens),
            other => Err(Error::Config(format!(
                "unknown decoding variant {other:?} (expected masked_only or all_tokens)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeOptions {
    /// Decoding iterations `T`.
    pub iterations: usize,
    /// Length candidates `ℓ`.
    pub length_beam: usize,
    pub variant: Variant,
}

impl DecodeOptions {
    pub fn new(iterations: usize, length_beam: usize, variant: Variant) -> Self {
        Self {
            iterations,
            length_beam,
            variant,
        }
    }

    pub fn validate(&self, max_len: usize) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("decoding needs at least one iteration".into()));
        }
        if self.length_beam == 0 || self.length_beam > max_len {
            return Err(Error::Config(format!(
                "length beam {} outside 1..={max_len}",
                self.length_beam
            )));
        }
        Ok(())
    }
}

/// Tokens to re-mask at iteration `t` of `total`:
/// `max(1, floor(n·(T−t+1)/T))`, which is `n` at `t = 1`.
pub fn mask_count(n: usize, t: usize, total: usize) -> usize {
    assert!(t >= 1 && t <= total, "iteration {t} outside 1..={total}");
    ((n * (total - t + 1)) / total).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeState {
    pub tokens: Vec<u32>,
    /// Model probability of each held token; in `(0, 1]`.
    pub confidence: Vec<f64>,
    pub iteration: usize,
}

impl DecodeState {
    pub fn fully_masked(n: usize) -> Self {
        Self {
            tokens: vec![MASK; n],
            confidence: vec![0.0; n],
            iteration: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Masks the `n` lowest-confidence positions, ties to the lower index.
/// Returns the masked positions in ascending order.
pub fn mask_step(state: &mut DecodeState, n: usize) -> Vec<usize> {
    assert!(n >= 1 && n <= state.len(), "cannot mask {n} of {}", state.len());
    let mut order: Vec<usize> = (0..state.len()).collect();
    order.sort_by(|&a, &b| {
        state.confidence[a]
            .partial_cmp(&state.confidence[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut chosen: Vec<usize> = order.into_iter().take(n).collect();
    chosen.sort_unstable();
    for &i in &chosen {
        state.tokens[i] = MASK;
    }
    chosen
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(f64::MIN_POSITIVE, 1.0)
}

/// Applies one set of model predictions. Returns how many held tokens
/// changed value (masked positions being filled do not count).
pub fn predict_step(state: &mut DecodeState, table: &LogProbTable, variant: Variant) -> usize {
    assert_eq!(table.len, state.len(), "prediction length differs from state");
    let mut changed = 0;
    for i in 0..state.len() {
        let held = state.tokens[i];
        if held == MASK {
            let (tok, p) = table.best_token(i);
            state.tokens[i] = tok;
            state.confidence[i] = clamp_prob(p);
            continue;
        }
        match variant {
            Variant::MaskedOnly => {
                state.confidence[i] = clamp_prob(table.prob(i, held));
            }
            Variant::AllTokens => {
                let (tok, p) = table.best_token(i);
                if tok != held {
                    state.tokens[i] = tok;
                    changed += 1;
                }
                state.confidence[i] = clamp_prob(p);
            }
        }
    }
    state.iteration += 1;
    changed
}

/// Mean log-confidence, so candidates of different length compare fairly.
pub fn candidate_score(state: &DecodeState) -> f64 {
    state.confidence.iter().map(|c| c.ln()).sum::<f64>() / state.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    /// Positions masked before this iteration's predict step.
    pub masked: Vec<usize>,
    /// Tokens and confidences after the predict step.
    pub tokens: Vec<u32>,
    pub confidence: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateTrace {
    pub length: usize,
    pub score: f64,
    pub iterations: Vec<IterationRecord>,
}

impl CandidateTrace {
    /// Last iteration whose predict step changed the tokens (1 if the first
    /// prediction was never revised).
    pub fn iterations_to_fixpoint(&self) -> usize {
        let mut last = 1;
        for w in self.iterations.windows(2) {
            if w[1].tokens != w[0].tokens {
                last = w[1].t;
            }
        }
        last
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub tokens: Vec<u32>,
    pub best: usize,
    pub candidates: Vec<CandidateTrace>,
}

impl DecodeResult {
    pub fn best_trace(&self) -> &CandidateTrace {
        &self.candidates[self.best]
    }
}

/// Decodes a batch of sources. All length candidates of all sources share
/// each predict-step forward pass; rows never interact.
pub fn mask_predict<M: Cmlm>(model: &M, sources: &[&[u32]], opts: &DecodeOptions) -> Result<Vec<DecodeResult>> {
    opts.validate(model.max_len())?;
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let enc = model.encode(sources)?;
    let length_lp = model.length_log_probs(&enc)?;
    let mut rows = Vec::new();
    let mut states = Vec::new();
    let mut traces: Vec<CandidateTrace> = Vec::new();
    for (s, lp) in length_lp.iter().enumerate() {
        for n in top_lengths(lp, opts.length_beam) {
            rows.push(s);
            states.push(DecodeState::fully_masked(n));
            traces.push(CandidateTrace {
                length: n,
                score: 0.0,
                iterations: Vec::with_capacity(opts.iterations),
            });
        }
    }
    let total = opts.iterations;
    for t in 1..=total {
        let mut masked_sets = Vec::with_capacity(states.len());
        for st in states.iter_mut() {
            let masked = if t == 1 {
                (0..st.len()).collect()
            } else {
                mask_step(st, mask_count(st.len(), t, total))
            };
            masked_sets.push(masked);
        }
        let inputs: Vec<&[u32]> = states.iter().map(|s| s.tokens.as_slice()).collect();
        let tables = model.token_log_probs(&enc, &rows, &inputs)?;
        for (((st, table), masked), trace) in states
            .iter_mut()
            .zip(&tables)
            .zip(masked_sets)
            .zip(traces.iter_mut())
        {
            predict_step(st, table, opts.variant);
            trace.iterations.push(IterationRecord {
                t,
                masked,
                tokens: st.tokens.clone(),
                confidence: st.confidence.clone(),
            });
        }
    }
    for (st, trace) in states.iter().zip(traces.iter_mut()) {
        trace.score = candidate_score(st);
    }
    // validate() bounds ℓ by max_len, so every source has exactly ℓ rows.
    let beam = opts.length_beam;
    let mut results = Vec::with_capacity(sources.len());
    let mut finals = states.into_iter().map(|s| s.tokens);
    let mut traces = traces.into_iter();
    for _ in 0..sources.len() {
        let mut toks: Vec<Vec<u32>> = finals.by_ref().take(beam).collect();
        let cands: Vec<CandidateTrace> = traces.by_ref().take(beam).collect();
        let best = cands
            .iter()
            .enumerate()
            .fold(0, |b, (i, c)| if c.score > cands[b].score { i } else { b });
        results.push(DecodeResult {
            tokens: toks.swap_remove(best),
            best,
            candidates: cands,
        });
    }
    Ok(results)
}

/// Writes one JSON record per candidate iteration.
pub fn trace_records(sentence: usize, result: &DecodeResult) -> Vec<serde_json::Value> {
    let mut out = Vec::new();
    for (c, cand) in result.candidates.iter().enumerate() {
        for it in &cand.iterations {
            out.push(serde_json::json!({
                "sentence": sentence,
                "candidate": c,
                "length": cand.length,
                "selected": c == result.best,
                "t": it.t,
                "masked": it.masked,
                "tokens": it.tokens,
                "confidence": it.confidence,
            }));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::OracleModel;
    use crate::vocab::EOS;

    fn state(conf: &[f64]) -> DecodeState {
        DecodeState {
            tokens: (5..5 + conf.len() as u32).collect(),
            confidence: conf.to_vec(),
            iteration: 1,
        }
    }

    #[test]
    fn mask_count_examples() {
        assert_eq!(mask_count(10, 1, 10), 10);
        assert_eq!(mask_count(10, 5, 10), 6);
        assert_eq!(mask_count(3, 10, 10), 1);
    }

    #[test]
    fn mask_step_examples() {
        let mut s = state(&[0.9, 0.1, 0.5]);
        assert_eq!(mask_step(&mut s, 1), vec![1]);
        assert_eq!(s.tokens, vec![5, MASK, 7]);
        let mut s = state(&[0.5, 0.5, 0.5]);
        assert_eq!(mask_step(&mut s, 2), vec![0, 1]);
        let mut s = state(&[0.3, 0.2, 0.1]);
        assert_eq!(mask_step(&mut s, 3), vec![0, 1, 2]);
        assert!(s.tokens.iter().all(|&t| t == MASK));
    }

    #[test]
    fn candidate_score_examples() {
        assert_eq!(candidate_score(&state(&[1.0, 1.0, 1.0])), 0.0);
        let s = state(&[(-1.0f64).exp(), (-3.0f64).exp()]);
        assert!((candidate_score(&s) + 2.0).abs() < 1e-12);
        let long = state(&[0.5; 6]);
        let short = state(&[0.5; 2]);
        assert!((candidate_score(&long) - candidate_score(&short)).abs() < 1e-12);
    }

    fn table(rows: &[&[(u32, f64)]], vocab: usize) -> LogProbTable {
        // Remaining mass spread evenly over the other tokens.
        let mut data = Vec::new();
        for row in rows {
            let used: f64 = row.iter().map(|r| r.1).sum();
            let rest = (1.0 - used) / (vocab - row.len()) as f64;
            let mut r = vec![rest.ln() as f32; vocab];
            for &(t, p) in *row {
                r[t as usize] = p.ln() as f32;
            }
            data.extend(r);
        }
        LogProbTable {
            len: rows.len(),
            vocab,
            data,
        }
    }

    #[test]
    fn variants_differ_only_on_observed_positions() {
        // Position 0 holds 6 but the model prefers 7 there.
        let t = table(&[&[(7, 0.8), (6, 0.1)], &[(8, 0.7)]], 10);
        let mut masked_only = DecodeState {
            tokens: vec![6, MASK],
            confidence: vec![0.5, 0.0],
            iteration: 1,
        };
        let mut all = masked_only.clone();
        predict_step(&mut masked_only, &t, Variant::MaskedOnly);
        let changed = predict_step(&mut all, &t, Variant::AllTokens);
        assert_eq!(masked_only.tokens, vec![6, 8]);
        assert!((masked_only.confidence[0] - 0.1).abs() < 1e-6);
        assert_eq!(all.tokens, vec![7, 8]);
        assert!((all.confidence[0] - 0.8).abs() < 1e-6);
        assert_eq!(changed, 1);
    }

    #[test]
    fn fully_masked_state_variants_coincide() {
        let t = table(&[&[(7, 0.8)], &[(8, 0.7)], &[(EOS, 0.9)]], 10);
        let mut a = DecodeState::fully_masked(3);
        let mut b = a.clone();
        predict_step(&mut a, &t, Variant::MaskedOnly);
        predict_step(&mut b, &t, Variant::AllTokens);
        assert_eq!(a, b);
    }

    #[test]
    fn oracle_converges_immediately() {
        let src = [5u32, 6, 7, EOS];
        let tgt = [8u32, 9, 10, 11, EOS];
        let o = OracleModel::new([(&src[..], &tgt[..])], 12, 8);
        for t in [1, 4, 10] {
            let opts = DecodeOptions::new(t, 1, Variant::MaskedOnly);
            let r = mask_predict(&o, &[&src], &opts).unwrap();
            assert_eq!(r[0].tokens, tgt);
            assert_eq!(r[0].best_trace().iterations.len(), t);
            assert_eq!(r[0].best_trace().iterations[0].tokens, tgt);
            assert_eq!(r[0].best_trace().iterations_to_fixpoint(), 1);
        }
    }

    #[test]
    fn traces_follow_schedule_and_group_by_sentence() {
        let pairs: Vec<(Vec<u32>, Vec<u32>)> = vec![
            (vec![5, EOS], vec![6, 7, EOS]),
            (vec![6, 5, EOS], vec![7, 6, 5, 8, EOS]),
        ];
        let o = OracleModel::new(pairs.iter().map(|(s, t)| (s.as_slice(), t.as_slice())), 12, 8);
        let srcs: Vec<&[u32]> = pairs.iter().map(|p| p.0.as_slice()).collect();
        let opts = DecodeOptions::new(4, 3, Variant::AllTokens);
        let rs = mask_predict(&o, &srcs, &opts).unwrap();
        assert_eq!(rs.len(), 2);
        for (r, (_, tgt)) in rs.iter().zip(&pairs) {
            assert_eq!(&r.tokens, tgt);
            assert_eq!(r.candidates.len(), 3);
            for c in &r.candidates {
                for it in &c.iterations {
                    assert_eq!(it.masked.len(), mask_count(c.length, it.t, 4));
                }
            }
        }
    }

    #[test]
    fn invalid_options_rejected() {
        let o = OracleModel::new(std::iter::empty(), 12, 8);
        assert!(mask_predict(&o, &[&[5, EOS]], &DecodeOptions::new(0, 1, Variant::MaskedOnly)).is_err());
        assert!(mask_predict(&o, &[&[5, EOS]], &DecodeOptions::new(1, 9, Variant::MaskedOnly)).is_err());
        assert!("sideways".parse::<Variant>().is_err());
    }
}
