//! TOML experiment configuration.
//!
//! ```toml
//! [[modality]]            # default: R (dense, 3 ch) and D (dense, 1 ch)
//! name = "R"
//! kind = "dense"          # dense | sparse
//! channels = 3
//! spatial = "grid"        # grid | pointset, default grid
//!
//! [backbone]              # defaults: BackboneConfig::toy()
//! depth = 4
//!
//! [train]
//! seed = 0                # required by train
//! regime = "mms"          # complete | mms | fixed_ratio:<r>
//!
//! [data]
//! seed = 7                # required by generate-data
//!
//! [eval]
//! severity = 0.5
//! ```
//!
//! Every section and field is optional; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, TuningMode};
use crate::data::SceneConfig;
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::fpt::SpectralMode;
use crate::modality::{DropoutMode, ModalitySpec};
use crate::train::{Regime, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub seed: Option<u64>,
    /// `mms`
    pub regime: Regime,
    /// `plus_fpt`
    pub tuning: TuningMode,
    /// 30
    pub epochs: usize,
    /// 2
    pub batch_size: usize,
    /// 2e-3
    pub lr: f64,
    /// 1e-4
    pub weight_decay: f64,
    /// 50
    pub warmup_steps: usize,
    /// spectrum_spatial on the channel axis
    pub spectral: SpectralMode,
    /// `zero_fill`
    pub dropout: DropoutMode,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::new(0);
        Self {
            seed: None,
            regime: t.regime,
            tuning: t.tuning,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            warmup_steps: t.warmup_steps,
            spectral: t.spectral,
            dropout: t.dropout,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self) -> Result<TrainConfig> {
        let seed = self
            .seed
            .ok_or_else(|| Error::Config("train.seed is required".into()))?;
        let config = TrainConfig {
            regime: self.regime,
            tuning: self.tuning,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            seed,
            spectral: self.spectral,
            dropout: self.dropout,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Scene generation. Image size, class count and patch size come from `[backbone]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub seed: Option<u64>,
    /// Scenes written by `generate-data`; 200.
    pub scenes: usize,
    /// [3, 6]
    pub shape_count: (usize, usize),
    /// [8.0, 16.0]
    pub radius: (f64, f64),
    /// 0.12
    pub rgb_noise: f64,
    /// 0.04
    pub depth_noise: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SceneConfig::default();
        Self {
            seed: None,
            scenes: 200,
            shape_count: s.shape_count,
            radius: s.radius,
            rgb_noise: s.rgb_noise,
            depth_noise: s.depth_noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Failure severity in (0, 1]; 0.5.
    pub severity: f64,
    /// Seed of the failure random sources; 0.
    pub failure_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            severity: 0.5,
            failure_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub modality: ModalitySpec,
    pub backbone: BackboneConfig,
    pub train: TrainSection,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            modality: ModalitySpec::rgb_depth(),
            backbone: BackboneConfig::toy(),
            train: TrainSection::default(),
            data: DataSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.scene_config().validate()?;
        if !(self.eval.severity > 0.0 && self.eval.severity <= 1.0) {
            return Err(Error::Config(format!("eval.severity {} outside (0, 1]", self.eval.severity)));
        }
        Ok(())
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            height: self.backbone.image_size.0,
            width: self.backbone.image_size.1,
            num_classes: self.backbone.num_classes,
            shape_count: self.data.shape_count,
            radius: self.data.radius,
            patch_size: self.backbone.patch_size,
            rgb_noise: self.data.rgb_noise,
            depth_noise: self.data.depth_noise,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            severity: self.eval.severity,
            dropout: self.train.dropout,
            seed: self.eval.failure_seed,
        }
    }

    /// SHA-256 of the compact JSON encoding, hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert!(c.train.to_train_config().is_err());
    }

    #[test]
    fn roundtrip_and_hash() {
        let text = r#"
            [[modality]]
            name = "R"
            kind = "dense"
            channels = 3
            [[modality]]
            name = "L"
            kind = "sparse"
            channels = 1
            spatial = "pointset"
            [train]
            seed = 4
            regime = "fixed_ratio:0.7"
            tuning = "decoder_only"
            [train.spectral]
            variant = "spatial_only"
        "#;
        let c = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(c.modality.len(), 2);
        let t = c.train.to_train_config().unwrap();
        assert_eq!(t.regime, Regime::FixedRatio(0.7));
        assert_eq!(t.seed, 4);
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(c.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("[train]\nsede = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("[nope]\n").is_err());
        assert!(ExperimentConfig::from_toml("[eval]\nseverity = 0.0\n").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nregime = \"often\"\n").is_err());
    }
}
