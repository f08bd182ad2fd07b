//! Model and training configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::LossConfig;
use crate::patterns::PatternSpec;
use crate::refine::RefineConfig;
use crate::sffm::SffmConfig;
use crate::twobranch::BranchConfig;
use crate::uffm::UffmConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preprocess {
    #[default]
    None,
    /// Half-resolution downsample, 304x228 center crop, 10 m cap.
    Nyu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub sffm: SffmConfig,
    pub branches: BranchConfig,
    pub uffm: UffmConfig,
    pub refine: RefineConfig,
    /// Completed depth is clamped to `[0, depth_cap]` meters.
    pub depth_cap: f64,
    pub preprocess: Preprocess,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            sffm: SffmConfig::default(),
            branches: BranchConfig::default(),
            uffm: UffmConfig::default(),
            refine: RefineConfig::default(),
            depth_cap: crate::depthio::NYU_MAX_DEPTH as f64,
            preprocess: Preprocess::None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.branches.validate()?;
        if !(self.depth_cap > 0.0) {
            return Err(Error::Config(format!("depth_cap must be > 0, got {}", self.depth_cap)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    /// Tab-separated manifest; trains on the `train` split and validates on
    /// `val` (or on `train` when there is no `val` entry).
    Manifest { path: PathBuf },
    /// Rendered scenes; validation uses the training scenes.
    Synthetic { count: usize, seed: u64 },
}

/// How the training input is sparsified at each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainPattern {
    /// `n ~ Uniform{min..=max}` random points, redrawn every step.
    RandomRange { min: usize, max: usize },
    /// The same pattern for a given sample at every step.
    Fixed { pattern: PatternSpec },
}

impl Default for TrainPattern {
    fn default() -> Self {
        Self::RandomRange { min: 5, max: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub batch_size: usize,
    pub lr: f64,
    pub plateau_patience: usize,
    pub lr_decay: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps across epochs.
    pub max_steps: Option<usize>,
    pub grad_clip: f64,
    pub pattern: TrainPattern,
    /// Outdoor mode: after sampling, mask a random fraction of rows up to this value.
    pub row_mask: Option<f64>,
    pub val_pattern: PatternSpec,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::Synthetic { count: 8, seed: 0 },
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            batch_size: 2,
            lr: 1e-4,
            plateau_patience: 5,
            lr_decay: 0.3,
            early_stop_patience: 10,
            max_epochs: 200,
            max_steps: None,
            grad_clip: 1.0,
            pattern: TrainPattern::default(),
            row_mask: None,
            val_pattern: PatternSpec::random(500, 0),
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.val_pattern.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad(format!("lr_decay must lie in (0, 1), got {}", self.lr_decay));
        }
        if self.plateau_patience < 1 || self.early_stop_patience < 1 {
            return bad("patience values must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be > 0, got {}", self.grad_clip));
        }
        match &self.pattern {
            TrainPattern::RandomRange { min, max } if *min < 1 || min > max => {
                return bad(format!("random point range {min}..={max} is empty or starts at 0"));
            }
            TrainPattern::Fixed { pattern } => pattern.validate()?,
            _ => {}
        }
        if let Some(f) = self.row_mask {
            if !(0.0..=0.95).contains(&f) {
                return bad(format!("row_mask must lie in [0, 0.95], got {f}"));
            }
        }
        if let DataConfig::Synthetic { count: 0, .. } = self.data {
            return bad("synthetic data needs at least one scene".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if let DataConfig::Manifest { path: p } = &mut cfg.data {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
