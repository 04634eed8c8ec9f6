//! Merged run settings: built-in defaults, then the config file, then flags.
//!
//! The config file is flat TOML; every key mirrors the long flag of the same
//! name with `-` replaced by `_`. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::data::GeneratorSpec;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::relation::{AttentionFn, Fusion, Normalization};
use crate::train::{GradcheckOptions, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub out: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub loss_curve: Option<PathBuf>,
    pub threads: Option<usize>,

    pub count: Option<usize>,
    pub seed: Option<u64>,
    pub min_persons: Option<usize>,
    pub max_persons: Option<usize>,
    pub feature_dim: Option<usize>,
    pub slots: Option<usize>,
    pub focus_prob: Option<f64>,
    pub sigma: Option<f64>,

    pub variant: Option<Variant>,
    pub r: Option<usize>,
    pub n_r: Option<usize>,
    pub fusion: Option<Fusion>,
    pub attention: Option<AttentionFn>,
    pub normalization: Option<Normalization>,
    pub include_self: Option<bool>,
    pub hidden: Option<usize>,

    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub batch_size: Option<usize>,
    pub checkpoint_every: Option<usize>,

    pub trials: Option<usize>,
    pub persons: Option<usize>,

    pub axis: Option<String>,
    pub values: Option<String>,
    pub baseline: Option<bool>,
    pub corpus_name: Option<String>,
}

macro_rules! overlay {
    ($base:ident, $top:ident; $($field:ident),* $(,)?) => {
        $( if $top.$field.is_some() { $base.$field = $top.$field; } )*
    };
}

pub const DEFAULT_COUNT: usize = 1000;
pub const DEFAULT_GRADCHECK_DIM: usize = 8;
pub const DEFAULT_TRIALS: usize = 10;

impl Settings {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {}", e)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config file {}: {}", path.display(), e)))?;
        Settings::from_toml(&text)
    }

    /// Values set in `top` replace those in `self`.
    pub fn overlay(mut self, top: Settings) -> Settings {
        overlay!(self, top;
            out, train, test, data, checkpoint, report, loss_curve, threads,
            count, seed, min_persons, max_persons, feature_dim, slots, focus_prob, sigma,
            variant, r, n_r, fusion, attention, normalization, include_self, hidden,
            epochs, lr, momentum, batch_size, checkpoint_every,
            trials, persons, axis, values, baseline, corpus_name,
        );
        self
    }

    pub fn require_path(&self, value: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
        value.clone().ok_or_else(|| {
            Error::Usage(format!(
                "missing {} path: pass --{} or set `{}` in the config file",
                key,
                key.replace('_', "-"),
                key
            ))
        })
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        let d = GeneratorSpec::default();
        GeneratorSpec {
            min_persons: self.min_persons.unwrap_or(d.min_persons),
            max_persons: self.max_persons.unwrap_or(d.max_persons),
            feature_dim: self.feature_dim.unwrap_or(d.feature_dim),
            slots: self.slots.unwrap_or(d.slots),
            focus_prob: self.focus_prob.unwrap_or(d.focus_prob),
            sigma: self.sigma.unwrap_or(d.sigma),
            seed: self.seed.unwrap_or(d.seed),
        }
    }

    /// Errors when a configured `feature_dim` disagrees with `actual`.
    pub fn check_feature_dim(&self, actual: usize, source: &str) -> Result<()> {
        match self.feature_dim {
            Some(d) if d != actual => Err(Error::Config(format!(
                "configured d_f = {} but {} has d_f = {}",
                d, source, actual
            ))),
            _ => Ok(()),
        }
    }

    pub fn model_config(&self, feature_dim: usize) -> Result<ModelConfig> {
        let mut c = ModelConfig::new(feature_dim);
        if let Some(v) = self.variant {
            c.variant = v;
        }
        let rel = &mut c.relation;
        if let Some(r) = self.r {
            rel.submodules = r;
        }
        if let Some(n) = self.n_r {
            rel.stacks = n;
        }
        if let Some(f) = self.fusion {
            rel.fusion = f;
        }
        if let Some(a) = self.attention {
            rel.attention = a;
        }
        if let Some(n) = self.normalization {
            rel.normalization = n;
        }
        if let Some(s) = self.include_self {
            rel.include_self = s;
        }
        if let Some(h) = self.hidden {
            c.hidden = h;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let c = TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            learning_rate: self.lr.unwrap_or(d.learning_rate),
            momentum: self.momentum.unwrap_or(d.momentum),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            seed: self.seed.unwrap_or(d.seed),
            checkpoint_every: self.checkpoint_every.unwrap_or(d.checkpoint_every),
            threads: self.threads.unwrap_or(d.threads),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn gradcheck_options(&self) -> GradcheckOptions {
        let d = GradcheckOptions::default();
        GradcheckOptions {
            persons: self.persons.unwrap_or(d.persons),
            seed: self.seed.unwrap_or(d.seed),
            ..d
        }
    }
}
