//! Run configuration shared by the training, evaluation, and reporting commands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{DEFAULT_ATTENTION_HIDDEN, DEFAULT_EXPERT_DEPTH};
use crate::fusion::{Bandwidth, FusionConfig, DEFAULT_FUSION_DEPTH, DEFAULT_LAMBDA};
use crate::model::{ModelConfig, Variant};
use crate::ssm::DEFAULT_D_STATE;
use crate::survival::DEFAULT_BINS;

pub const SEED_ENV: &str = "ME_MAMBA_SEED";
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to zero over the run, stepped per epoch.
    Cosine,
}

impl LrSchedule {
    /// Rate for 1-based `epoch` of `epochs`.
    pub fn rate(self, lr: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            Self::Constant => lr,
            Self::Cosine => {
                let t = (epoch - 1) as f64 / epochs.max(1) as f64;
                0.5 * lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub lr: f64,
    pub epochs: usize,
    pub lambda: f64,
    pub n_bins: usize,
    pub expert_depth: usize,
    pub fusion_depth: usize,
    pub d_state: usize,
    pub attention_hidden: usize,
    pub folds: usize,
    pub variant: Variant,
    /// Rescale each per-patient gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
    pub lr_schedule: LrSchedule,
    pub cohort: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            lr: 1e-3,
            epochs: 30,
            lambda: DEFAULT_LAMBDA,
            n_bins: DEFAULT_BINS,
            expert_depth: DEFAULT_EXPERT_DEPTH,
            fusion_depth: DEFAULT_FUSION_DEPTH,
            d_state: DEFAULT_D_STATE,
            attention_hidden: DEFAULT_ATTENTION_HIDDEN,
            folds: 5,
            variant: Variant::Full,
            grad_clip: None,
            lr_schedule: LrSchedule::Constant,
            cohort: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_bins", self.n_bins),
            ("expert_depth", self.expert_depth),
            ("fusion_depth", self.fusion_depth),
            ("d_state", self.d_state),
            ("attention_hidden", self.attention_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {}", self.folds)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn model_config(&self, d_model: usize) -> ModelConfig {
        ModelConfig {
            d_model,
            d_state: self.d_state,
            expert_depth: self.expert_depth,
            attention_hidden: self.attention_hidden,
            n_bins: self.n_bins,
            fusion: FusionConfig {
                bandwidth: Bandwidth::Median,
                lambda: self.lambda,
                fusion_depth: self.fusion_depth,
            },
            variant: self.variant,
        }
    }
}
