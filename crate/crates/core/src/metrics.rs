//! Corpus BLEU and grid evaluation of mask-predict decoding.

use std::collections::HashMap;
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EncodedPair;
use crate::decode::{mask_predict, DecodeOptions, Variant};
use crate::error::{Error, Result};
use crate::model::{top_lengths, Cmlm};
use crate::vocab::Vocab;

pub const MAX_ORDER: usize = 4;
/// Stand-in for a zero n-gram precision, keeping the geometric mean finite.
pub const SMOOTHING_EPS: f64 = 1e-9;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 (pooled clipped n-gram counts, one reference per
/// hypothesis, brevity penalty), on a 0–100 scale.
pub fn bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Invalid("BLEU of an empty hypothesis set".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Invalid(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(r, n);
            for (gram, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let log_precision: f64 = (0..MAX_ORDER)
        .map(|i| {
            let p = if totals[i] == 0 || matches[i] == 0 {
                SMOOTHING_EPS
            } else {
                matches[i] as f64 / totals[i] as f64
            };
            p.ln()
        })
        .sum::<f64>()
        / MAX_ORDER as f64;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok((100.0 * bp * log_precision.exp()).clamp(0.0, 100.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub index: usize,
    pub hypothesis: String,
    pub reference: String,
    pub exact: bool,
    pub predicted_length: usize,
    pub fixpoint: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub iterations: usize,
    pub length_beam: usize,
    pub variant: Variant,
    pub bleu: f64,
    pub exact_match: f64,
    pub mean_iterations_to_fixpoint: f64,
    pub length_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sentences: Option<Vec<SentenceRecord>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn find(&self, iterations: usize, length_beam: usize, variant: Variant) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.iterations == iterations && r.length_beam == length_beam && r.variant == variant)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{}\n{:>3} {:>3} {:<12} {:>7} {:>7} {:>9} {:>8}\n",
            self.system, "T", "l", "variant", "BLEU", "exact", "fixpoint", "len_acc"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:>3} {:>3} {:<12} {:>7.2} {:>7.3} {:>9.2} {:>8.3}\n",
                r.iterations,
                r.length_beam,
                r.variant.to_string(),
                r.bleu,
                r.exact_match,
                r.mean_iterations_to_fixpoint,
                r.length_accuracy
            ));
        }
        s
    }

    /// One JSON object per row (sentence records omitted).
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let mut row = r.clone();
            row.sentences = None;
            let mut v = serde_json::to_value(&row).expect("row serializes");
            v["system"] = serde_json::Value::String(self.system.clone());
            s.push_str(&v.to_string());
            s.push('\n');
        }
        s
    }
}

/// Sentences decoded per parallel work item. Fixed, so results do not
/// depend on the thread count.
pub const EVAL_CHUNK: usize = 64;

/// Decodes `sources` in fixed-size chunks, in parallel across chunks.
pub fn decode_corpus<M: Cmlm>(
    model: &M,
    sources: &[&[u32]],
    opts: &DecodeOptions,
) -> Result<Vec<crate::decode::DecodeResult>> {
    let chunks: Vec<Result<Vec<_>>> = sources
        .par_chunks(EVAL_CHUNK)
        .map(|c| mask_predict(model, c, opts))
        .collect();
    let mut out = Vec::with_capacity(sources.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Argmax-length accuracy of the length head.
pub fn length_accuracy<M: Cmlm>(model: &M, pairs: &[EncodedPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let srcs: Vec<&[u32]> = chunk.iter().map(|p| p.source.as_slice()).collect();
        let enc = model.encode(&srcs)?;
        for (lp, p) in model.length_log_probs(&enc)?.iter().zip(chunk) {
            if top_lengths(lp, 1)[0] == p.target.len() {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

fn content(ids: &[u32]) -> Vec<u32> {
    ids.iter().copied().filter(|&i| Vocab::is_content(i)).collect()
}

/// BLEU of mask-predict output against references (content tokens only).
pub fn corpus_bleu<M: Cmlm>(model: &M, pairs: &[EncodedPair], opts: &DecodeOptions) -> Result<f64> {
    let srcs: Vec<&[u32]> = pairs.iter().map(|p| p.source.as_slice()).collect();
    let results = decode_corpus(model, &srcs, opts)?;
    let hyps: Vec<Vec<u32>> = results.iter().map(|r| content(&r.tokens)).collect();
    let refs: Vec<Vec<u32>> = pairs.iter().map(|p| content(&p.target)).collect();
    bleu(&hyps, &refs)
}

/// Evaluates every grid cell on `pairs`.
pub fn evaluate<M: Cmlm>(
    model: &M,
    system: &str,
    vocab: &Vocab,
    pairs: &[EncodedPair],
    grid: &[DecodeOptions],
    keep_sentences: bool,
) -> Result<EvalReport> {
    let srcs: Vec<&[u32]> = pairs.iter().map(|p| p.source.as_slice()).collect();
    let refs: Vec<Vec<u32>> = pairs.iter().map(|p| content(&p.target)).collect();
    let len_acc = length_accuracy(model, pairs)?;
    let mut rows = Vec::with_capacity(grid.len());
    for opts in grid {
        let results = decode_corpus(model, &srcs, opts)?;
        let hyps: Vec<Vec<u32>> = results.iter().map(|r| content(&r.tokens)).collect();
        let score = if pairs.is_empty() { 0.0 } else { bleu(&hyps, &refs)? };
        let n = pairs.len().max(1) as f64;
        let exact = hyps.iter().zip(&refs).filter(|(h, r)| h == r).count() as f64 / n;
        let fix = results
            .iter()
            .map(|r| r.best_trace().iterations_to_fixpoint() as f64)
            .sum::<f64>()
            / n;
        let sentences = keep_sentences.then(|| {
            results
                .iter()
                .zip(pairs)
                .enumerate()
                .map(|(i, (r, p))| SentenceRecord {
                    index: i,
                    hypothesis: vocab.detokenize(&r.tokens),
                    reference: vocab.detokenize(&p.target),
                    exact: content(&r.tokens) == content(&p.target),
                    predicted_length: r.tokens.len(),
                    fixpoint: r.best_trace().iterations_to_fixpoint(),
                })
                .collect()
        });
        rows.push(EvalRow {
            iterations: opts.iterations,
            length_beam: opts.length_beam,
            variant: opts.variant,
            bleu: score,
            exact_match: exact,
            mean_iterations_to_fixpoint: fix,
            length_accuracy: len_acc,
            sentences,
        });
    }
    Ok(EvalReport {
        system: system.to_string(),
        rows,
    })
}

/// Parses `T=1,4,10;l=1,3;variant=masked_only,all_tokens` into the
/// cartesian product (T outermost). Missing axes default to `l=1` and
/// `variant=masked_only`.
pub fn parse_grid(spec: &str) -> Result<Vec<DecodeOptions>> {
    let mut ts = vec![1usize, 4, 10];
    let mut ls = vec![1usize];
    let mut vs = vec![Variant::MaskedOnly];
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, vals) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid axis {part:?} lacks '='")))?;
        let nums = || -> Result<Vec<usize>> {
            vals.split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad number {v:?} in grid axis {key}")))
                })
                .collect()
        };
        match key.trim() {
            "T" | "iterations" => ts = nums()?,
            "l" | "length_beam" => ls = nums()?,
            "variant" => vs = vals.split(',').map(|v| v.trim().parse()).collect::<Result<_>>()?,
            other => return Err(Error::Config(format!("unknown grid axis {other:?}"))),
        }
    }
    let mut grid = Vec::new();
    for &t in &ts {
        for &l in &ls {
            for &v in &vs {
                grid.push(DecodeOptions::new(t, l, v));
            }
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identical_corpus_scores_100() {
        let h = vec![toks("a b c d e"), toks("x y z w")];
        assert!((bleu(&h, &h).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn brevity_penalty_example() {
        let b = bleu(&[toks("a b c d")], &[toks("a b c d e")]).unwrap();
        let expected = 100.0 * (-0.25f64).exp();
        assert!((b - expected).abs() < 1e-6, "{b}");
        assert!((b - 77.88).abs() < 0.01);
    }

    #[test]
    fn no_four_gram_overlap_is_tiny_but_positive() {
        let b = bleu(&[toks("a b c d e f")], &[toks("a b c x d e f")]).unwrap();
        assert!(b > 0.0 && b < 1.0, "{b}");
    }

    #[test]
    fn empty_hypotheses_rejected() {
        let empty: Vec<Vec<String>> = Vec::new();
        assert!(bleu(&empty, &empty).is_err());
    }

    #[test]
    fn grid_parsing() {
        let g = parse_grid("T=1,4,10;l=1,3").unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g[1], DecodeOptions::new(1, 3, Variant::MaskedOnly));
        let g = parse_grid("T=4;variant=masked_only,all_tokens").unwrap();
        assert_eq!(g[1].variant, Variant::AllTokens);
        assert!(parse_grid("beam=3").is_err());
    }
}
