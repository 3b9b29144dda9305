//! Ablation sweeps over SMART training choices.
//!
//! Each cell is the dev BLEU of a model trained with one setting, averaged
//! over `ablate.seeds`. Trained models are cached by configuration, so
//! settings shared between sweeps are trained once.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::EncodedPair;
use crate::decode::{DecodeOptions, Variant};
use crate::error::{Error, Result};
use crate::examplegen::MaskPolicy;
use crate::metrics::corpus_bleu;
use crate::model::CmlmModel;
use crate::train::{MemorySink, TrainMode, Trainer};
use crate::vocab::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    MaskRatio,
    Passes,
    LossPlacement,
    Repredict,
}

impl fmt::Display for Which {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Which::MaskRatio => "mask_ratio",
            Which::Passes => "passes",
            Which::LossPlacement => "loss_placement",
            Which::Repredict => "repredict",
        })
    }
}

impl FromStr for Which {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask_ratio" => Ok(Which::MaskRatio),
            "passes" => Ok(Which::Passes),
            "loss_placement" => Ok(Which::LossPlacement),
            "repredict" => Ok(Which::Repredict),
            other => Err(Error::Config(format!(
                "unknown ablation {other:?} (expected mask_ratio, passes, loss_placement or repredict)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    /// One BLEU per column, averaged over seeds.
    pub bleu: Vec<f64>,
    /// Per-seed BLEU, `[seed][column]`.
    pub per_seed: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub which: Which,
    pub row_header: String,
    /// Decoding iterations of each column.
    pub iterations: Vec<usize>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// BLEU of row `label` at `iterations`.
    pub fn cell(&self, label: &str, iterations: usize) -> Option<f64> {
        let col = self.iterations.iter().position(|&t| t == iterations)?;
        self.row(label).map(|r| r.bleu[col])
    }

    /// Markdown table with a spanning "Decoding Iterations" header.
    pub fn to_table(&self) -> String {
        let w = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain([self.row_header.len()])
            .max()
            .unwrap_or(0);
        let mut s = format!("| {:w$} | Decoding Iterations{} |\n", "", " |".repeat(self.iterations.len() - 1));
        s.push_str(&format!("| {:w$} |", self.row_header));
        for t in &self.iterations {
            s.push_str(&format!(" {t:>5} |"));
        }
        s.push('\n');
        s.push_str(&format!("|{}|", "-".repeat(w + 2)));
        for _ in &self.iterations {
            s.push_str("------:|");
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("| {:w$} |", r.label));
            for b in &r.bleu {
                s.push_str(&format!(" {b:>5.2} |"));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            for (c, &t) in self.iterations.iter().enumerate() {
                let v = serde_json::json!({
                    "ablation": self.which,
                    "row": r.label,
                    "iterations": t,
                    "bleu": r.bleu[c],
                    "per_seed": r.per_seed.iter().map(|p| p[c]).collect::<Vec<_>>(),
                });
                s.push_str(&v.to_string());
                s.push('\n');
            }
        }
        s
    }
}

/// Trained models keyed by their full configuration.
pub struct ModelCache<'a> {
    vocab: &'a Vocab,
    train: &'a [EncodedPair],
    dev: &'a [EncodedPair],
    models: HashMap<String, CmlmModel<f32>>,
}

impl<'a> ModelCache<'a> {
    pub fn new(vocab: &'a Vocab, train: &'a [EncodedPair], dev: &'a [EncodedPair]) -> Self {
        Self {
            vocab,
            train,
            dev,
            models: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn get_or_train(&mut self, cfg: &RunConfig) -> Result<&CmlmModel<f32>> {
        let key = cfg.to_toml();
        if !self.models.contains_key(&key) {
            log::info!(
                "training {:?} seed {} for {} updates",
                cfg.train.mode,
                cfg.train.seed,
                cfg.train.updates
            );
            let mut trainer = Trainer::new(cfg.clone(), self.vocab.clone(), self.train, self.dev)?;
            let mut sink = MemorySink {
                keep_last_only: true,
                ..Default::default()
            };
            trainer.run(&mut sink)?;
            self.models.insert(key.clone(), trainer.into_model());
        }
        Ok(&self.models[&key])
    }
}

/// One training setting and the decoding variants evaluated on it.
struct Setting {
    label: String,
    config: RunConfig,
    variant: Variant,
}

fn smart_base(base: &RunConfig) -> RunConfig {
    let mut c = base.clone();
    c.train.mode = TrainMode::Smart;
    c
}

fn settings(base: &RunConfig, which: Which) -> Vec<Setting> {
    let variant = base.eval.variant_for(TrainMode::Smart);
    let with = |label: String, f: &dyn Fn(&mut RunConfig)| {
        let mut c = smart_base(base);
        f(&mut c);
        Setting {
            label,
            config: c,
            variant,
        }
    };
    match which {
        Which::MaskRatio => MaskPolicy::RATIOS
            .iter()
            .map(|&r| MaskPolicy::FixedRatio(r))
            .chain([MaskPolicy::Uniform])
            .map(|p| with(p.to_string(), &|c| c.train.smart.mask_policy = p))
            .collect(),
        Which::Passes => [2usize, 3, 4]
            .iter()
            .map(|&n| with(n.to_string(), &|c| c.train.smart.passes = n))
            .collect(),
        Which::LossPlacement => vec![
            with("1st Pass + 2nd Pass".into(), &|c| c.train.smart.first_pass_loss = true),
            with("Only 2nd Pass".into(), &|c| c.train.smart.first_pass_loss = false),
        ],
        Which::Repredict => [("Masked Tokens", Variant::MaskedOnly), ("All Tokens", Variant::AllTokens)]
            .iter()
            .map(|&(label, v)| Setting {
                label: label.into(),
                config: smart_base(base),
                variant: v,
            })
            .collect(),
    }
}

fn row_header(which: Which) -> &'static str {
    match which {
        Which::MaskRatio => "Mask Ratio",
        Which::Passes => "Forward Passes",
        Which::LossPlacement => "Loss",
        Which::Repredict => "Re-predict",
    }
}

pub fn iterations_of(which: Which) -> Vec<usize> {
    match which {
        Which::Repredict => vec![4, 10],
        _ => vec![1, 4, 10],
    }
}

/// Runs one sweep, evaluating on `eval_pairs` with `eval.length_beam`.
pub fn run_ablation(
    cache: &mut ModelCache<'_>,
    base: &RunConfig,
    which: Which,
    eval_pairs: &[EncodedPair],
) -> Result<AblationTable> {
    base.validate()?;
    if eval_pairs.is_empty() {
        return Err(Error::Invalid("ablation needs evaluation sentences".into()));
    }
    let iterations = iterations_of(which);
    let mut rows = Vec::new();
    for setting in settings(base, which) {
        let mut per_seed = Vec::new();
        for &seed in &base.ablate.seeds {
            let mut cfg = setting.config.clone();
            cfg.train.seed = seed;
            let model = cache.get_or_train(&cfg)?;
            let mut cells = Vec::with_capacity(iterations.len());
            for &t in &iterations {
                let opts = DecodeOptions::new(t, base.eval.length_beam, setting.variant);
                cells.push(corpus_bleu(model, eval_pairs, &opts)?);
            }
            per_seed.push(cells);
        }
        let n = per_seed.len() as f64;
        let bleu = (0..iterations.len())
            .map(|c| per_seed.iter().map(|p| p[c]).sum::<f64>() / n)
            .collect();
        rows.push(AblationRow {
            label: setting.label,
            bleu,
            per_seed,
        });
    }
    Ok(AblationTable {
        which,
        row_header: row_header(which).into(),
        iterations,
        rows,
    })
}
