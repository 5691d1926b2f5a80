use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transforms::{ModelConfig, LATENT_STRIDE};

/// Flat training configuration, read from JSON.
///
/// A `"preset"` key selects defaults that the remaining keys override.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// RD trade-off; distortion is MSE on `[0, 1]` samples, rate in bpp.
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Multiply the learning rate by `decay_factor` every `decay_every` epochs.
    pub decay_every: usize,
    pub decay_factor: f64,
    pub gop_stride: usize,
    /// Sub-sequences per optimizer step.
    pub batch: usize,
    /// Square spatial crop, a multiple of 16.
    pub crop: usize,
    pub seed: u64,
    /// Architecture preset name (`full`, `desk`, `debug`).
    pub model: String,
    pub checkerboard: bool,
    pub channelwise: bool,
    pub auxiliary: bool,
    /// Training volumes (VVOL files).
    pub train: Vec<PathBuf>,
    /// Held-out volume for periodic evaluation; the first training volume if absent.
    pub eval: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Optimizer steps per epoch; by default one per slice group in the dataset.
    pub steps_per_epoch: Option<usize>,
    /// Evaluate with the real coder every this many epochs (0 = only at the end).
    pub eval_every: usize,
    /// Start from these weights instead of a fresh initialization.
    pub init: Option<PathBuf>,
    /// Rescale the summed gradient to at most this global L2 norm (0 = off).
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 2048.0,
            lr: 1e-4,
            epochs: 200,
            decay_every: 20,
            decay_factor: 0.2,
            gop_stride: 16,
            batch: 1,
            crop: 256,
            seed: 0,
            model: "full".into(),
            checkerboard: true,
            channelwise: true,
            auxiliary: true,
            train: Vec::new(),
            eval: None,
            out_dir: PathBuf::from("runs"),
            steps_per_epoch: None,
            eval_every: 1,
            init: None,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale overfitting run.
    pub fn smoke() -> Self {
        TrainConfig {
            lambda: 8192.0,
            lr: 2e-4,
            epochs: 20,
            decay_every: 1000,
            decay_factor: 0.2,
            crop: 64,
            model: "desk".into(),
            eval_every: 10,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full" | "default" => Some(Self::default()),
            "smoke" => Some(Self::smoke()),
            _ => None,
        }
    }

    /// Parse JSON, applying a `"preset"` key (if any) before the other keys.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::config(format!("config is not valid JSON: {e}")))?;
        let serde_json::Value::Object(mut keys) = value else {
            return Err(Error::config("config must be a JSON object"));
        };
        let base = match keys.remove("preset") {
            None => Self::default(),
            Some(serde_json::Value::String(name)) => {
                Self::preset(&name).ok_or_else(|| Error::config(format!("unknown preset {name:?}")))?
            }
            Some(_) => return Err(Error::config("preset must be a string")),
        };
        let serde_json::Value::Object(mut merged) = serde_json::to_value(base).expect("config serializes") else {
            unreachable!()
        };
        merged.extend(keys);
        let cfg: TrainConfig = serde_json::from_value(serde_json::Value::Object(merged))
            .map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be non-negative"));
        }
        if self.crop == 0 || self.crop % LATENT_STRIDE != 0 {
            return Err(Error::config(format!("crop must be a positive multiple of {LATENT_STRIDE}")));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::config("clip_norm must be non-negative"));
        }
        if self.gop_stride == 0 || self.batch == 0 || self.decay_every == 0 {
            return Err(Error::config("gop_stride, batch and decay_every must be at least 1"));
        }
        self.model_config()?;
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::by_name(&self.model)
            .ok_or_else(|| Error::config(format!("unknown model preset {:?}", self.model)))?;
        m.checkerboard = self.checkerboard;
        m.channelwise = self.channelwise;
        m.auxiliary = self.auxiliary;
        m.validate()?;
        Ok(m)
    }

    /// Learning rate for a given epoch under the step decay.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_and_overrides() {
        let c = TrainConfig::from_json(r#"{"preset": "smoke", "lambda": 2048, "train": ["a.vvol"]}"#).unwrap();
        assert_eq!(c.lambda, 2048.0);
        assert_eq!(c.model, "desk");
        assert_eq!(c.train.len(), 1);
        assert!(TrainConfig::from_json(r#"{"lamda": 1}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"crop": 50}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"preset": "nope"}"#).is_err());
        assert!(TrainConfig::from_json("[1]").is_err());
    }

    #[test]
    fn decay_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 1e-4);
        assert_eq!(c.lr_at(19), 1e-4);
        assert!((c.lr_at(20) - 2e-5).abs() < 1e-18);
        assert!((c.lr_at(45) - 4e-6).abs() < 1e-18);
    }
}
