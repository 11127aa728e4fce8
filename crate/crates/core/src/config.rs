//! Run configuration: a line-based `key = value` file.
//!
//! Blank lines and lines starting with `#` are ignored. Keys not present
//! keep their defaults; unknown keys and malformed values are errors that
//! carry the offending line number.

use std::path::Path;
use std::str::FromStr;

use crate::adapter::{AdapterConfig, LossWeights};
use crate::detect::{ScoreMode, Stage1Source};
use crate::error::{Error, Result};
use crate::graph::TopKConfig;
use crate::vig::{EnergyConfig, Pooling, VigTrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub tau: f64,
    pub lambda_pos: f64,
    pub lambda_neg: f64,
    pub lambda_npd: f64,
    pub lambda_energy: f64,
    pub m_in: f64,
    pub t_energy: f64,
    pub n_features: usize,
    pub k_text: usize,
    pub k_patch: usize,
    pub k_cross: usize,
    pub vig_layers: usize,
    /// Feed-forward width; 0 means four times the embedding width.
    pub hidden_dim: usize,
    pub lr_adapter: f64,
    pub lr_vig: f64,
    pub epochs_adapter: usize,
    pub epochs_vig: usize,
    /// 0 means full-batch.
    pub batch_adapter: usize,
    pub batch_vig: usize,
    pub momentum_vig: f64,
    pub init_noise: f64,
    pub pooling: Pooling,
    pub stage1: Stage1Source,
    pub score: ScoreMode,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adapter = AdapterConfig::default();
        let vig = VigTrainConfig::default();
        Self {
            tau: adapter.weights.tau,
            lambda_pos: adapter.weights.lambda_pos,
            lambda_neg: adapter.weights.lambda_neg,
            lambda_npd: adapter.weights.lambda_npd,
            lambda_energy: vig.energy.lambda_energy,
            m_in: vig.energy.margin_in,
            t_energy: vig.energy.temperature,
            n_features: 3,
            k_text: 2,
            k_patch: 10,
            k_cross: 8,
            vig_layers: 4,
            hidden_dim: 0,
            lr_adapter: adapter.learning_rate,
            lr_vig: vig.learning_rate,
            epochs_adapter: adapter.epochs,
            epochs_vig: vig.epochs,
            batch_adapter: adapter.batch_size,
            batch_vig: vig.batch_size,
            momentum_vig: vig.momentum,
            init_noise: adapter.init_noise,
            pooling: Pooling::Mean,
            stage1: Stage1Source::Patches,
            score: ScoreMode::Energy,
            seed: 0,
        }
    }
}

fn parse_number<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        line,
        message: format!("cannot parse {value:?} for {key}"),
    })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| Error::Config {
                line,
                message: "expected `key = value`".into(),
            })?;
            cfg.set(line, key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, line: usize, key: &str, value: &str) -> Result<()> {
        macro_rules! num {
            ($field:ident) => {
                self.$field = parse_number(line, key, value)?
            };
        }
        match key {
            "tau" => num!(tau),
            "lambda_pos" => num!(lambda_pos),
            "lambda_neg" => num!(lambda_neg),
            "lambda_npd" => num!(lambda_npd),
            "lambda_energy" => num!(lambda_energy),
            "m_in" => num!(m_in),
            "t_energy" => num!(t_energy),
            "n_features" => num!(n_features),
            "k_text" => num!(k_text),
            "k_patch" => num!(k_patch),
            "k_cross" => num!(k_cross),
            "vig_layers" => num!(vig_layers),
            "hidden_dim" => num!(hidden_dim),
            "lr_adapter" => num!(lr_adapter),
            "lr_vig" => num!(lr_vig),
            "epochs_adapter" => num!(epochs_adapter),
            "epochs_vig" => num!(epochs_vig),
            "batch_adapter" => num!(batch_adapter),
            "batch_vig" => num!(batch_vig),
            "momentum_vig" => num!(momentum_vig),
            "init_noise" => num!(init_noise),
            "seed" => num!(seed),
            "pooling" => {
                self.pooling = match value {
                    "mean" => Pooling::Mean,
                    "max" => Pooling::Max,
                    _ => return Err(bad_choice(line, key, value, "mean, max")),
                }
            }
            "stage1" => {
                self.stage1 = match value {
                    "patches" => Stage1Source::Patches,
                    "global" => Stage1Source::Global,
                    _ => return Err(bad_choice(line, key, value, "patches, global")),
                }
            }
            "score" => {
                self.score = match value {
                    "energy" => ScoreMode::Energy,
                    "max_softmax" => ScoreMode::MaxSoftmax,
                    "mcm" => ScoreMode::Mcm,
                    _ => return Err(bad_choice(line, key, value, "energy, max_softmax, mcm")),
                }
            }
            _ => {
                return Err(Error::Config {
                    line,
                    message: format!("unknown key {key:?}"),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let range = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::OutOfRange(what.to_string()))
            }
        };
        let positive = |x: f64| x > 0.0 && x.is_finite();
        let non_negative = |x: f64| x >= 0.0 && x.is_finite();
        range(positive(self.tau), "tau must be positive")?;
        range(non_negative(self.lambda_pos), "lambda_pos must be non-negative")?;
        range(non_negative(self.lambda_neg), "lambda_neg must be non-negative")?;
        range(non_negative(self.lambda_npd), "lambda_npd must be non-negative")?;
        range(non_negative(self.lambda_energy), "lambda_energy must be non-negative")?;
        range(!self.m_in.is_nan(), "m_in must be a number")?;
        range(positive(self.t_energy), "t_energy must be positive")?;
        range(self.n_features >= 1, "n_features must be at least 1")?;
        range(
            self.k_text >= 1 && self.k_patch >= 1 && self.k_cross >= 1,
            "k_text, k_patch and k_cross must be at least 1",
        )?;
        range(self.vig_layers >= 1, "vig_layers must be at least 1")?;
        range(positive(self.lr_adapter), "lr_adapter must be positive")?;
        range(positive(self.lr_vig), "lr_vig must be positive")?;
        range(self.batch_vig >= 1, "batch_vig must be at least 1")?;
        range((0.0..1.0).contains(&self.momentum_vig), "momentum_vig must lie in [0, 1)")?;
        range(non_negative(self.init_noise), "init_noise must be non-negative")?;
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_pos: self.lambda_pos,
            lambda_neg: self.lambda_neg,
            lambda_npd: self.lambda_npd,
            tau: self.tau,
        }
    }

    pub fn adapter(&self) -> AdapterConfig {
        AdapterConfig {
            weights: self.loss_weights(),
            learning_rate: self.lr_adapter,
            epochs: self.epochs_adapter,
            batch_size: self.batch_adapter,
            init_noise: self.init_noise,
            seed: self.seed,
        }
    }

    pub fn topk(&self) -> TopKConfig {
        TopKConfig {
            k_text: self.k_text,
            k_patch: self.k_patch,
            k_cross: self.k_cross,
        }
    }

    pub fn energy(&self) -> EnergyConfig {
        EnergyConfig {
            temperature: self.t_energy,
            margin_in: self.m_in,
            lambda_energy: self.lambda_energy,
        }
    }

    pub fn vig(&self) -> VigTrainConfig {
        VigTrainConfig {
            energy: self.energy(),
            learning_rate: self.lr_vig,
            momentum: self.momentum_vig,
            epochs: self.epochs_vig,
            batch_size: self.batch_vig,
            seed: self.seed,
        }
    }

    pub fn hidden_for(&self, dim: usize) -> usize {
        if self.hidden_dim == 0 {
            4 * dim
        } else {
            self.hidden_dim
        }
    }
}

fn bad_choice(line: usize, key: &str, value: &str, allowed: &str) -> Error {
    Error::Config {
        line,
        message: format!("{key} must be one of {allowed}, got {value:?}"),
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    RunConfig::parse(&std::fs::read_to_string(path)?)
}
