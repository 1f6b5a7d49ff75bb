//! Training configuration: a flat key-value TOML document with every method
//! constant materialized, so a written-back resolved config reproduces the
//! run exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridShape;
use crate::rng::fnv1a64;
use crate::stats::PrcIndexing;

/// Everything a training run needs. Serialized flat; unknown keys are
/// rejected so typos fail loudly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    // method constants
    pub lambda_max: f64,
    pub alpha: f64,
    pub beta: f64,
    pub k1: u32,
    pub k2: u32,
    pub k3: u32,
    pub gamma: f64,

    // module toggles (ablations)
    pub use_wl: bool,
    pub use_prc: bool,
    pub use_dus: bool,

    // optimization
    pub epochs: u32,
    pub steps_per_epoch: u32,
    pub n_labeled_per_batch: usize,
    pub n_unlabeled_per_batch: usize,
    pub lr0: f64,
    pub lr_decay_per_epoch: f64,
    pub momentum: f64,
    pub weight_decay: f64,

    // data
    pub classes: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    pub crop_d: usize,
    pub cartilage_classes: Vec<u8>,
    pub augment_flip: bool,
    pub augment_rotate: bool,
    pub master_seed: u64,

    // knobs pinned by design decisions, exposed for experiments
    pub prc_indexing: PrcIndexing,
    pub dice_include_background: bool,
    pub dus_background_rate: f64,
    pub dus_rate_floor: f64,

    // backbone
    pub backbone_stages: usize,
    pub backbone_base_channels: usize,
    pub backbone_short_residual: bool,

    // validation
    pub val_interval: u32,
    pub val_stride_h: usize,
    pub val_stride_w: usize,
    pub val_stride_d: usize,

    /// Bit-reproducibility mode. This implementation is deterministic
    /// regardless; the flag is recorded for provenance and reserved for
    /// future non-deterministic fast paths.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_max: 0.1,
            alpha: 1.0 / 3.0,
            beta: 2.0,
            k1: 1,
            k2: 1,
            k3: 8,
            gamma: 0.999,
            use_wl: true,
            use_prc: true,
            use_dus: true,
            epochs: 40,
            steps_per_epoch: 16,
            n_labeled_per_batch: 2,
            n_unlabeled_per_batch: 2,
            lr0: 0.01,
            lr_decay_per_epoch: 0.9772,
            momentum: 0.9,
            weight_decay: 0.0,
            classes: 5,
            crop_h: 48,
            crop_w: 48,
            crop_d: 16,
            cartilage_classes: vec![2, 4],
            augment_flip: true,
            augment_rotate: true,
            master_seed: 1,
            prc_indexing: PrcIndexing::Centers,
            dice_include_background: true,
            dus_background_rate: 1.0,
            dus_rate_floor: 0.05,
            backbone_stages: 3,
            backbone_base_channels: 4,
            backbone_short_residual: false,
            val_interval: 10,
            val_stride_h: 24,
            val_stride_w: 24,
            val_stride_d: 8,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn crop_shape(&self) -> GridShape {
        GridShape::new(self.crop_h, self.crop_w, self.crop_d)
    }

    pub fn val_stride(&self) -> (usize, usize, usize) {
        (self.val_stride_h, self.val_stride_w, self.val_stride_d)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("gamma", self.gamma)?;
        unit("dus_background_rate", self.dus_background_rate)?;
        unit("dus_rate_floor", self.dus_rate_floor)?;
        unit("momentum", self.momentum)?;
        if self.lambda_max < 0.0 || self.alpha < 0.0 {
            return Err(Error::Config("lambda_max and alpha must be >= 0".into()));
        }
        if self.beta < 1.0 {
            return Err(Error::Config(format!("beta = {} must be >= 1", self.beta)));
        }
        if self.lr0 <= 0.0 || self.lr_decay_per_epoch <= 0.0 || self.lr_decay_per_epoch > 1.0 {
            return Err(Error::Config("lr0 > 0 and 0 < lr_decay_per_epoch <= 1 required".into()));
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.k3 == 0 {
            return Err(Error::Config("epochs, steps_per_epoch, k3 must be positive".into()));
        }
        if self.n_labeled_per_batch == 0 {
            return Err(Error::Config("need at least one labeled sub-volume per batch".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.crop_h == 0 || self.crop_w == 0 || self.crop_d == 0 {
            return Err(Error::Config("crop shape must be positive".into()));
        }
        if self.cartilage_classes.is_empty()
            || self
                .cartilage_classes
                .iter()
                .any(|&c| c == 0 || c as usize >= self.classes)
        {
            return Err(Error::Config(
                "cartilage_classes must be nonempty foreground classes".into(),
            ));
        }
        if self.backbone_stages < 2 || self.backbone_base_channels == 0 {
            return Err(Error::Config("backbone needs >= 2 stages and > 0 channels".into()));
        }
        let div = 1usize << (self.backbone_stages - 1);
        if self.crop_h % div != 0 || self.crop_w % div != 0 || self.crop_d % div != 0 {
            return Err(Error::Config(format!(
                "crop {}x{}x{} not divisible by backbone spatial divisor {div}",
                self.crop_h, self.crop_w, self.crop_d
            )));
        }
        if self.val_interval == 0 {
            return Err(Error::Config("val_interval must be positive".into()));
        }
        if self.val_stride_h == 0 || self.val_stride_w == 0 || self.val_stride_d == 0 {
            return Err(Error::Config("validation stride must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Contract(format!("config serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Stable digest of the resolved config; checkpoints refuse to resume
    /// under a different one.
    pub fn hash(&self) -> Result<u64> {
        Ok(fnv1a64(self.to_toml()?.as_bytes()))
    }

    /// Apply the ablation list from `--ablate` (comma-separated module
    /// names, or "none").
    pub fn apply_ablations(&mut self, spec: &str) -> Result<()> {
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item.to_ascii_lowercase().as_str() {
                "none" => {}
                "wl" => self.use_wl = false,
                "prc" => self.use_prc = false,
                "dus" => self.use_dus = false,
                other => {
                    return Err(Error::Config(format!(
                        "unknown ablation '{other}' (expected wl, prc, dus, or none)"
                    )))
                }
            }
        }
        Ok(())
    }
}
