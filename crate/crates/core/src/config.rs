//! Run configuration: every pipeline default in one serializable record.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::InputType;
use crate::labeling::{BpType, Thresholds};
use crate::models::{Arch, ModelSpec, Preset};
use crate::synth::SynthConfig;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "BPSHIFT_SEED";

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{path}: field `{field}`: {msg}")]
pub struct ConfigError {
    pub path: String,
    pub field: String,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub thresholds: Thresholds,
    pub bp_type: BpType,
    pub arch: Arch,
    pub input_type: InputType,
    pub preset: Preset,
    pub seconds: f64,
    pub include_initial_bp: bool,
    /// Balanced training pool size per class (split into train and val).
    pub per_class: usize,
    pub val_fraction: f64,
    pub folds: usize,
    /// Uniform Test-I sample size per class.
    pub test1_per_class: usize,
    pub n_test1_patients: usize,
    pub n_test2_patients: usize,
    /// Overrides of the preset's training schedule.
    pub epochs: Option<usize>,
    pub patience: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    /// Evaluate one model across the sweep grid instead of retraining.
    pub reuse_model: bool,
    /// Wall-clock cap on one training run, in seconds.
    pub time_budget_s: Option<f64>,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            thresholds: Thresholds::default(),
            bp_type: BpType::Mbp,
            arch: Arch::Encoder,
            input_type: InputType::PpgSdppgWaveform,
            preset: Preset::Desk,
            seconds: 7.0,
            include_initial_bp: true,
            per_class: 2000,
            val_fraction: 0.8,
            folds: 5,
            test1_per_class: 500,
            n_test1_patients: 10,
            n_test2_patients: 5,
            epochs: None,
            patience: None,
            batch_size: None,
            lr: None,
            reuse_model: false,
            time_budget_s: None,
            synth: SynthConfig {
                n_patients: 65,
                ..SynthConfig::default()
            },
        }
    }
}

pub const LENGTHS: [f64; 3] = [3.0, 5.0, 7.0];

impl RunConfig {
    pub fn threshold(&self) -> f64 {
        self.thresholds.get(self.bp_type)
    }

    /// Model spec for the configured cell, with schedule overrides applied.
    pub fn model_spec(&self, fs: f64) -> ModelSpec {
        let len = crate::signal::window_len(self.seconds, fs);
        let mut spec = ModelSpec::new(self.arch, self.preset, self.input_type.channels(), len);
        spec.feature_len = self.input_type.feature_len();
        spec.include_initial_bp = self.include_initial_bp;
        if let Some(e) = self.epochs {
            spec.epochs = e;
        }
        if let Some(p) = self.patience {
            spec.patience = p;
        }
        if let Some(b) = self.batch_size {
            spec.batch_size = b;
        }
        if let Some(lr) = self.lr {
            spec.lr = lr;
        }
        spec
    }

    pub fn validate(&self, path: &str) -> Result<(), ConfigError> {
        let err = |field: &str, msg: String| ConfigError {
            path: path.to_string(),
            field: field.to_string(),
            msg,
        };
        for t in BpType::ALL {
            let v = self.thresholds.get(t);
            if !(v > 0.0 && v <= t.grid_max()) {
                return Err(err(
                    &format!("thresholds.{}", t.name()),
                    format!("{v} is outside (0, {}] mmHg", t.grid_max()),
                ));
            }
        }
        if !LENGTHS.contains(&self.seconds) {
            return Err(err("seconds", format!("{} is not one of 3, 5, 7", self.seconds)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(err("val_fraction", "must lie in (0, 1)".into()));
        }
        if self.folds < 2 {
            return Err(err("folds", "need at least 2".into()));
        }
        if self.per_class == 0 || self.test1_per_class == 0 {
            return Err(err("per_class", "must be positive".into()));
        }
        if self.epochs == Some(0) || self.batch_size == Some(0) {
            return Err(err("epochs", "schedule overrides must be positive".into()));
        }
        if self.time_budget_s.is_some_and(|t| !(t > 0.0 && t.is_finite())) {
            return Err(err("time_budget_s", "must be a positive number of seconds".into()));
        }
        if self.lr.is_some_and(|lr| !(lr >= 0.0 && lr.is_finite())) {
            return Err(err("lr", "must be finite and non-negative".into()));
        }
        self.synth
            .validate()
            .map_err(|e| err("synth", e.to_string()))
    }

    /// Applies the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| ConfigError {
                path: SEED_ENV.into(),
                field: "seed".into(),
                msg: format!("`{v}` is not a non-negative integer"),
            })?;
        }
        Ok(())
    }
}

/// Parses a JSON config; absent fields take their defaults and an empty
/// file is the default configuration.
pub fn parse_config(text: &str, path: &str) -> Result<RunConfig, ConfigError> {
    let err = |field: &str, msg: String| ConfigError {
        path: path.to_string(),
        field: field.to_string(),
        msg,
    };
    if text.trim().is_empty() {
        return Ok(RunConfig::default());
    }
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| err("<root>", e.to_string()))?;
    if let Some(seed) = value.get("seed") {
        if seed.as_u64().is_none() {
            return Err(err("seed", format!("{seed} is not a non-negative integer")));
        }
    }
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| {
        let msg = e.to_string();
        let field = msg
            .split('`')
            .nth(1)
            .filter(|_| msg.starts_with("unknown field"))
            .unwrap_or("<root>")
            .to_string();
        err(&field, msg)
    })?;
    cfg.validate(path)?;
    Ok(cfg)
}

pub fn validate_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
        path: shown.clone(),
        field: "<file>".into(),
        msg: e.to_string(),
    })?;
    parse_config(&text, &shown)
}
