//! Run configuration as flat `key = value` text.
//!
//! Lines starting with `#` and blank lines are ignored. Unknown or repeated
//! keys are errors. Values set later through [`RunConfig::set`] override
//! earlier ones, which gives the flag > file > default precedence.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::adaptation::{Activation, StepSchedule, TrainConfig};
use crate::analogy::{default_beta, AnalogyConfig};
use crate::protocol::{ProtocolConfig, Toggles};
use crate::store::SessionMode;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("key `{0}` given twice")]
    Duplicate(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub plan: Option<PathBuf>,
    pub mode: SessionMode,
    pub shots: usize,
    /// Session count; `None` takes the dataset default.
    pub sessions: Option<usize>,
    pub plan_seed: u64,
    pub seed: u64,
    pub train: TrainConfig,
    pub tau_cal: f64,
    /// `None` picks the dataset default.
    pub beta: Option<f64>,
    pub eta: f64,
    pub gamma: f64,
    pub projection_dim: usize,
    pub ridge: f64,
    pub vote_weight: f64,
    pub toggles: Toggles,
}

impl Default for RunConfig {
    fn default() -> Self {
        let analogy = AnalogyConfig::default();
        let protocol = ProtocolConfig::default();
        Self {
            dataset: None,
            plan: None,
            mode: SessionMode::BigStart,
            shots: 5,
            sessions: None,
            plan_seed: 0,
            seed: 0,
            train: TrainConfig::default(),
            tau_cal: analogy.tau_cal,
            beta: None,
            eta: analogy.eta,
            gamma: analogy.gamma,
            projection_dim: protocol.projection_dim,
            ridge: protocol.ridge,
            vote_weight: protocol.vote_weight,
            toggles: Toggles::default(),
        }
    }
}

/// Every accepted key, in manifest order.
pub const KEYS: &[&str] = &[
    "dataset",
    "plan",
    "mode",
    "shots",
    "sessions",
    "plan_seed",
    "seed",
    "epochs",
    "batch_size",
    "learning_rate",
    "sgd_momentum",
    "schedule",
    "alpha",
    "lambda",
    "tau",
    "tau_assign",
    "k",
    "ema_momentum",
    "prune_threshold",
    "init_sigma",
    "bottleneck",
    "activation",
    "residual",
    "tau_cal",
    "beta",
    "eta",
    "gamma",
    "projection_dim",
    "ridge",
    "vote_weight",
    "mixture_losses",
    "calibration",
    "voting",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue { key: key.into(), value: value.into(), reason: e.to_string() })
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

fn path_opt(value: &str) -> Option<PathBuf> {
    (value != "none" && !value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl RunConfig {
    /// Sets one key. `toggle_preset` is accepted as a shorthand for the
    /// three component toggles.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        let t = &mut self.train;
        match key {
            "dataset" => self.dataset = path_opt(value),
            "plan" => self.plan = path_opt(value),
            "mode" => self.mode = parse(key, value)?,
            "shots" => self.shots = parse(key, value)?,
            "sessions" => self.sessions = parse_opt(key, value)?,
            "plan_seed" => self.plan_seed = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "sgd_momentum" => t.sgd_momentum = parse(key, value)?,
            "schedule" => t.schedule = parse::<StepSchedule>(key, value)?,
            "alpha" => t.alpha = parse_opt(key, value)?,
            "lambda" => t.lambda = parse_opt(key, value)?,
            "tau" => t.tau = parse(key, value)?,
            "tau_assign" => t.tau_assign = parse(key, value)?,
            "k" => t.k = parse(key, value)?,
            "ema_momentum" => t.ema_momentum = parse(key, value)?,
            "prune_threshold" => t.prune_threshold = parse(key, value)?,
            "init_sigma" => t.init_sigma = parse(key, value)?,
            "bottleneck" => t.bottleneck = parse_opt(key, value)?,
            "activation" => t.activation = parse::<Activation>(key, value)?,
            "residual" => t.residual = parse(key, value)?,
            "tau_cal" => self.tau_cal = parse(key, value)?,
            "beta" => self.beta = parse_opt(key, value)?,
            "eta" => self.eta = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "projection_dim" => self.projection_dim = parse(key, value)?,
            "ridge" => self.ridge = parse(key, value)?,
            "vote_weight" => self.vote_weight = parse(key, value)?,
            "mixture_losses" => self.toggles.mixture_losses = parse(key, value)?,
            "calibration" => self.toggles.calibration = parse(key, value)?,
            "voting" => self.toggles.voting = parse(key, value)?,
            "toggle_preset" => {
                self.toggles = Toggles::preset(value).ok_or_else(|| ConfigError::BadValue {
                    key: key.into(),
                    value: value.into(),
                    reason: "expected one of B1, B2, B3, B4".into(),
                })?
            }
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies `key = value` text on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut seen = std::collections::BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(ConfigError::Duplicate(k.to_string()));
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    fn value_of(&self, key: &str) -> String {
        let t = &self.train;
        match key {
            "dataset" => show_path(&self.dataset),
            "plan" => show_path(&self.plan),
            "mode" => self.mode.to_string(),
            "shots" => self.shots.to_string(),
            "sessions" => show_opt(&self.sessions),
            "plan_seed" => self.plan_seed.to_string(),
            "seed" => self.seed.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "learning_rate" => t.learning_rate.to_string(),
            "sgd_momentum" => t.sgd_momentum.to_string(),
            "schedule" => t.schedule.to_string(),
            "alpha" => show_opt(&t.alpha),
            "lambda" => show_opt(&t.lambda),
            "tau" => t.tau.to_string(),
            "tau_assign" => t.tau_assign.to_string(),
            "k" => t.k.to_string(),
            "ema_momentum" => t.ema_momentum.to_string(),
            "prune_threshold" => t.prune_threshold.to_string(),
            "init_sigma" => t.init_sigma.to_string(),
            "bottleneck" => show_opt(&t.bottleneck),
            "activation" => t.activation.to_string(),
            "residual" => t.residual.to_string(),
            "tau_cal" => self.tau_cal.to_string(),
            "beta" => show_opt(&self.beta),
            "eta" => self.eta.to_string(),
            "gamma" => self.gamma.to_string(),
            "projection_dim" => self.projection_dim.to_string(),
            "ridge" => self.ridge.to_string(),
            "vote_weight" => self.vote_weight.to_string(),
            "mixture_losses" => self.toggles.mixture_losses.to_string(),
            "calibration" => self.toggles.calibration.to_string(),
            "voting" => self.toggles.voting.to_string(),
            _ => unreachable!("every key in KEYS is handled"),
        }
    }

    /// Every key with its value, one per line, in [`KEYS`] order. Parsing
    /// the output reproduces this configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.value_of(k));
        }
        s
    }

    /// Resolves dataset-dependent defaults.
    pub fn resolved(&self, dataset_name: &str) -> Self {
        Self { beta: Some(self.beta.unwrap_or_else(|| default_beta(dataset_name))), ..self.clone() }
    }

    pub fn protocol(&self, dataset_name: &str) -> ProtocolConfig {
        ProtocolConfig {
            train: TrainConfig { seed: self.seed, ..self.train.clone() },
            analogy: AnalogyConfig {
                tau_cal: self.tau_cal,
                beta: self.beta.unwrap_or_else(|| default_beta(dataset_name)),
                eta: self.eta,
                gamma: self.gamma,
            },
            toggles: self.toggles,
            projection_dim: self.projection_dim,
            ridge: self.ridge,
            vote_weight: self.vote_weight,
            seed: self.seed,
        }
    }

    /// Range checks on every value.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.shots == 0 {
            return Err(ConfigError::Invalid("shots must be at least 1".into()));
        }
        if self.sessions.is_some_and(|s| s < 2) {
            return Err(ConfigError::Invalid("sessions must be at least 2".into()));
        }
        self.protocol("").validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(b) = self.beta {
            if !(0.0..=1.0).contains(&b) {
                return Err(ConfigError::Invalid("beta must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}
