//! Run configuration, read from JSON with every field optional.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::Ablation;
use crate::crf::CrfHyperParams;
use crate::error::{Error, Result};

/// CRF settings; `alpha` and `gamma` default to `0.2 l` and `0.05 l`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfSettings {
    pub w1: f64,
    pub w2: f64,
    pub alpha: Option<f64>,
    pub beta: f64,
    pub gamma: Option<f64>,
    pub damping: f64,
}

impl Default for CrfSettings {
    fn default() -> Self {
        CrfSettings {
            w1: 1.0,
            w2: 1.0,
            alpha: None,
            beta: 0.1,
            gamma: None,
            damping: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augmentation {
    /// Source images may exceed `l` by up to this many pixels per side; a
    /// random `l x l` window is cropped. 0 disables cropping.
    pub random_crop_margin: usize,
    pub horizontal_flip: bool,
}

impl Augmentation {
    pub fn is_active(&self) -> bool {
        self.random_crop_margin > 0 || self.horizontal_flip
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Image side, a multiple of 16.
    pub l: usize,
    /// Width unit: the backbone emits `8c` channels, branches run at `12c`.
    pub c: usize,
    /// Number of action units.
    pub n: usize,
    /// Mean-field iterations.
    #[serde(rename = "T")]
    pub t: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    /// Epochs per decay step; fractional values rescale the schedule to a
    /// longer horizon.
    pub lr_decay_every: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub crf: CrfSettings,
    /// Optional per-AU overrides of `crf`, one entry per AU.
    pub crf_per_au: Option<Vec<CrfSettings>>,
    /// Multiplier on the summed CRF energies in the training loss.
    pub crf_loss_weight: f64,
    /// Divide each image's CRF energy by its pixel count.
    pub crf_loss_per_pixel: bool,
    pub augmentation: Augmentation,
    /// Decision threshold for metrics.
    pub threshold: f64,
    /// Upper bound on cached per-image kernel sets (0 disables the cache).
    pub kernel_cache: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            l: 32,
            c: 2,
            n: 3,
            t: 10,
            epochs: 12,
            batch_size: 8,
            base_lr: 0.006,
            lr_decay: 0.3,
            lr_decay_every: 2.0,
            weight_decay: 0.0005,
            momentum: 0.9,
            seed: 0,
            ablation: Ablation::default(),
            crf: CrfSettings::default(),
            crf_per_au: None,
            crf_loss_weight: 1.0,
            crf_loss_per_pixel: true,
            augmentation: Augmentation::default(),
            threshold: crate::head::DEFAULT_THRESHOLD,
            kernel_cache: 64,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.l == 0 || !self.l.is_multiple_of(16) {
            return fail(format!("l = {} must be a positive multiple of 16", self.l));
        }
        if self.c == 0 || self.n == 0 || self.batch_size == 0 {
            return fail("c, n and batch_size must be at least 1".into());
        }
        if self.base_lr < 0.0 || self.lr_decay <= 0.0 || self.lr_decay_every <= 0.0 {
            return fail("learning rate settings must be non-negative with a positive decay".into());
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return fail("weight decay must be >= 0 and momentum in [0, 1)".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail(format!("threshold {} outside (0, 1)", self.threshold));
        }
        if self.crf_loss_weight < 0.0 {
            return fail("crf_loss_weight must be non-negative".into());
        }
        if let Some(per_au) = &self.crf_per_au {
            if per_au.len() != self.n {
                return fail(format!("crf_per_au has {} entries for {} AUs", per_au.len(), self.n));
            }
        }
        for i in 0..self.n {
            self.crf_hyper(i).validate()?;
        }
        Ok(())
    }

    /// Resolved CRF hyperparameters of AU `index` (0-based).
    pub fn crf_hyper(&self, index: usize) -> CrfHyperParams {
        let s = self.crf_per_au.as_ref().and_then(|v| v.get(index)).unwrap_or(&self.crf);
        let base = CrfHyperParams::for_side(self.l);
        CrfHyperParams {
            w1: s.w1,
            w2: s.w2,
            alpha: s.alpha.unwrap_or(base.alpha),
            beta: s.beta,
            gamma: s.gamma.unwrap_or(base.gamma),
            iterations: self.t,
            damping: s.damping,
        }
    }
}
