//! Run configuration file.
//!
//! A TOML file with optional `[train]` (including `[train.detector]`,
//! `[train.assign]`, `[train.loss]`), `[augment]`, `[synth]`, `[split]` and
//! `[eval]` tables. Any key left out keeps its built-in default, unknown keys
//! are rejected, and command-line flags override whatever the file says.

use std::path::Path;

use anyhow::{Context, Result};
use gcdet::eval::{EVAL_CONF, EVAL_IOU, PREDICT_CONF, PREDICT_IOU};
use gcdet::{AugmentConfig, SynthConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub ratios: [f64; 3],
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { ratios: [0.7, 0.2, 0.1] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Score threshold and NMS IoU used for metric computation.
    pub conf: f64,
    pub iou: f64,
    /// Thresholds used by `predict`.
    pub predict_conf: f64,
    pub predict_iou: f64,
    pub warmup: usize,
    pub runs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            conf: EVAL_CONF,
            iou: EVAL_IOU,
            predict_conf: PREDICT_CONF,
            predict_iou: PREDICT_IOU,
            warmup: 3,
            runs: 20,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Shared seed; `--seed` wins over it, and it wins over per-table seeds.
    pub seed: Option<u64>,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub synth: SynthConfig,
    pub split: SplitSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Resolves the seed with flag > file > default precedence and pushes it
    /// into every seeded stage.
    pub fn apply_seed(&mut self, flag: Option<u64>) -> u64 {
        let seed = flag.or(self.seed).unwrap_or(self.train.seed);
        self.seed = Some(seed);
        self.train.seed = seed;
        self.synth.seed = seed;
        seed
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}
