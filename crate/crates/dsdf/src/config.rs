use std::path::Path;

use dsdf_core::model::ModelConfig;
use dsdf_core::optim::AdamConfig;
use dsdf_core::Precision;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionName {
    F32,
    F64,
}

impl From<PrecisionName> for Precision {
    fn from(p: PrecisionName) -> Self {
        match p {
            PrecisionName::F32 => Precision::F32,
            PrecisionName::F64 => Precision::F64,
        }
    }
}

/// Training configuration; JSON keys match the field names and unknown
/// keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub image_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub scales: Vec<usize>,
    pub bins: usize,
    pub d_b: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub precision: PrecisionName,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            image_size: m.image_size,
            embed_dim: m.embed_dim,
            heads: m.heads,
            scales: m.scales,
            bins: m.bins,
            d_b: m.blood_dim,
            alpha: m.alpha,
            beta: m.beta,
            lr: AdamConfig::default().lr,
            epochs: 30,
            batch: 8,
            seed: 0,
            precision: PrecisionName::F32,
        }
    }
}

impl TrainConfig {
    /// 64×64 inputs, width 32.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            embed_dim: 32,
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            embed_dim: self.embed_dim,
            heads: self.heads,
            scales: self.scales.clone(),
            bins: self.bins,
            blood_dim: self.d_b,
            alpha: self.alpha,
            beta: self.beta,
            precision: self.precision.into(),
            ..ModelConfig::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        Ok(())
    }
}
