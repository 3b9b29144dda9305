//! Run configuration: one TOML document with `task`, `model`, `train`,
//! `eval` and `ablate` tables. Every table is optional; unknown keys are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::TaskSpec;
use crate::decode::Variant;
use crate::error::{io_err, Error, Result};
use crate::model::CmlmConfig;
use crate::train::{TrainConfig, TrainMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iterations: Vec<usize>,
    pub length_beam: usize,
    /// Decoding variant; unset means the trained mode's default.
    pub variant: Option<Variant>,
    /// Dev sentences decoded for each metrics record (0 = whole split).
    pub dev_sentences: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iterations: vec![1, 4, 10],
            length_beam: 3,
            variant: None,
            dev_sentences: 200,
        }
    }
}

impl EvalConfig {
    pub fn variant_for(&self, mode: TrainMode) -> Variant {
        self.variant.unwrap_or(mode.default_variant())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Training seeds averaged in every ablation cell.
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { seeds: vec![1, 2, 3] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub model: CmlmConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parsed configuration plus the verbatim text, for echoing.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok((cfg, text))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.task.max_len + 1 > self.model.max_len {
            return Err(Error::Config(format!(
                "task.max_len {} plus </s> exceeds model.max_len {}",
                self.task.max_len, self.model.max_len
            )));
        }
        if self.task.max_target_len > self.model.max_len {
            return Err(Error::Config(format!(
                "task.max_target_len {} exceeds model.max_len {}",
                self.task.max_target_len, self.model.max_len
            )));
        }
        if self.eval.iterations.is_empty() || self.eval.iterations.contains(&0) {
            return Err(Error::Config("eval.iterations must be non-empty and positive".into()));
        }
        if self.eval.length_beam == 0 || self.eval.length_beam > self.model.max_len {
            return Err(Error::Config(format!(
                "eval.length_beam {} outside 1..={}",
                self.eval.length_beam, self.model.max_len
            )));
        }
        if self.ablate.seeds.is_empty() {
            return Err(Error::Config("ablate.seeds is empty".into()));
        }
        Ok(())
    }
}
