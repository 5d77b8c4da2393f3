use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::imaging::Modality;
use crate::masking::masked_count;
use crate::model::MimConfig;

/// Everything that determines a pretraining run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: MimConfig,
    pub mask_ratio: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Dataset manifest; a synthetic corpus is generated when absent.
    pub manifest: Option<PathBuf>,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    /// Checkpoint period in steps; 0 keeps only the initial and final ones.
    pub checkpoint_every: u64,
    /// Per-channel mean/std standardization of model inputs.
    pub standardize: bool,
    /// Fill the `seconds` metrics column. Off by default because wall time
    /// would make metrics files differ between identical runs.
    pub log_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = AdamW::default();
        Self {
            model: MimConfig::default(),
            mask_ratio: 0.75,
            batch_size: 16,
            steps: 2000,
            learning_rate: opt.lr,
            weight_decay: opt.weight_decay,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            seed: 0,
            manifest: None,
            synthetic_train: 256,
            synthetic_test: 32,
            checkpoint_every: 500,
            standardize: false,
            log_wall_time: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn modality(&self) -> Modality {
        Modality::from_channels(self.model.channels).expect("validated channel count")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        let n = self.model.n_tokens();
        let m = masked_count(n, self.mask_ratio);
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) || m == 0 || m >= n {
            return fail(format!(
                "mask_ratio {} leaves {m} of {n} tokens masked; need at least one masked and one visible",
                self.mask_ratio
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return fail("betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return fail("eps must be positive".into());
        }
        if self.manifest.is_none() && self.synthetic_train == 0 {
            return fail("synthetic_train must be positive when no manifest is given".into());
        }
        if self.manifest.is_none() && (!self.model.image_height.is_multiple_of(16) || !self.model.image_width.is_multiple_of(16)) {
            return fail("synthetic scenes need image sides that are multiples of 16".into());
        }
        Ok(())
    }
}
