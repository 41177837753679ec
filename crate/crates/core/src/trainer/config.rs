use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::GroupThresholds;
use crate::distill::{KdConfig, KlVariant};
use crate::error::{Error, Result};
use crate::model::Activation;
use crate::sampling::DeltaTransform;

/// Training settings read from a JSON config file. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub temperature: f64,
    pub kl_variant: KlVariant,
    pub crt_freeze: bool,
    pub use_mlmc_phase2: bool,
    pub seed: u64,
    pub lr_initial: f64,
    pub lr_floor: f64,
    pub lr_patience: usize,
    pub group_thresholds: GroupThresholds,
    pub delta_transform: DeltaTransform,
    /// Also weight the coarser MLMC levels by parent-level deltas.
    pub delta_on_parents: bool,
    /// Stop a phase after this many epochs without validation improvement.
    pub early_stop_patience: Option<usize>,
    pub architecture: Architecture,
}

/// Network shape used for every model of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub extractor_widths: Vec<usize>,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            extractor_widths: vec![64, 32],
            activation: Activation::Relu,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        let kd = KdConfig::default();
        Self {
            epochs: 30,
            batch_size: 128,
            alpha: kd.alpha,
            beta: kd.beta,
            gamma: kd.gamma,
            temperature: kd.temperature,
            kl_variant: kd.kl_variant,
            crt_freeze: true,
            use_mlmc_phase2: true,
            seed: 0,
            lr_initial: 1e-3,
            lr_floor: 1e-7,
            lr_patience: 5,
            group_thresholds: GroupThresholds::default(),
            delta_transform: DeltaTransform::Sqrt,
            delta_on_parents: false,
            early_stop_patience: None,
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn kd(&self) -> KdConfig {
        KdConfig {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            temperature: self.temperature,
            kl_variant: self.kl_variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "epochs and batch_size must be >= 1, got {} and {}",
                self.epochs, self.batch_size
            )));
        }
        if !(self.lr_initial > 0.0 && self.lr_floor > 0.0 && self.lr_floor <= self.lr_initial) {
            return Err(Error::Config(format!(
                "need 0 < lr_floor <= lr_initial, got {} and {}",
                self.lr_floor, self.lr_initial
            )));
        }
        if self.architecture.extractor_widths.is_empty() || self.architecture.extractor_widths.contains(&0) {
            return Err(Error::Config("extractor_widths must be non-empty and positive".into()));
        }
        self.group_thresholds.validate()?;
        self.kd().validate()
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = TrainConfig::from_json("{}").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.batch_size, 128);
        let cfg = TrainConfig::from_json(r#"{"epochs": 3, "kl_variant": "literal", "group_thresholds": {"many": 50, "few": 5}}"#).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.kl_variant, KlVariant::Literal);
        assert_eq!(cfg.group_thresholds.few, 5);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        let err = TrainConfig::from_json(r#"{"epochs": 3, "lambda": 1.0}"#).unwrap_err();
        assert!(err.to_string().contains("lambda"), "{err}");
        assert!(TrainConfig::from_json(r#"{"epochs": 0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"alpha": 0.7}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"group_thresholds": {"many": 5, "few": 10}}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), TrainConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
