//! Run configuration: one JSON document drives data generation,
//! training, inference, and the ablation harness.
//!
//! Every field has a desk-scale default, so a config file only needs
//! the fields it overrides. Unknown fields are rejected to catch typos.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{BlockSpec, EncoderConfig};
use crate::error::PipelineError;
use crate::fusion::FusionVariant;
use crate::objective::LossConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Square side length every image is resized to before training.
    pub input_size: usize,
    /// Encoder blocks as (conv layers, channels) pairs, coarsening by 2x
    /// between consecutive blocks.
    pub blocks: Vec<(usize, usize)>,
    /// Channel width of each fusion block; defaults to the encoder's.
    pub fuse_channels: Option<Vec<usize>>,
    pub head_channels: usize,
    pub fusion_variant: FusionVariant,
    /// Reflection gain: the reflected branch sees -k times the
    /// mean-subtracted image.
    pub k: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Weight of the structural term in the total loss.
    pub mu: f64,
    /// Per-level weights of the structural loss taps.
    pub lambda_l: [f64; 4],
    /// Eta-squared of the F-measure used in evaluation.
    pub eta2: f64,
    pub seed: u64,
    /// Random crop + mirror during training; off makes fixed-seed runs
    /// see identical batches every step.
    pub augment: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            input_size: 64,
            blocks: vec![(2, 8), (2, 16), (2, 32)],
            fuse_channels: None,
            head_channels: 8,
            fusion_variant: FusionVariant::Hyper,
            k: 1.0,
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 4,
            max_steps: 2000,
            mu: 0.01,
            lambda_l: [1.0; 4],
            eta2: 0.3,
            seed: 42,
            augment: true,
        }
    }
}

impl Config {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            blocks: self
                .blocks
                .iter()
                .map(|(convs, channels)| BlockSpec { convs: *convs, channels: *channels })
                .collect(),
            input: (self.input_size, self.input_size),
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { mu: self.mu, lambda: self.lambda_l.to_vec() }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.encoder_config().validate()?;
        if let Some(fuse) = &self.fuse_channels {
            if fuse.len() != self.blocks.len() {
                return Err(PipelineError::invalid(format!(
                    "fuse_channels has {} entries for {} blocks",
                    fuse.len(),
                    self.blocks.len()
                )));
            }
            if fuse.iter().any(|c| *c == 0) {
                return Err(PipelineError::invalid("fuse_channels must be nonzero"));
            }
        }
        if self.head_channels == 0 {
            return Err(PipelineError::invalid("head_channels must be nonzero"));
        }
        if self.k == 0.0 {
            return Err(PipelineError::invalid("reflection gain k must be nonzero"));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("mu", self.mu),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(PipelineError::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        if self.eta2 <= 0.0 {
            return Err(PipelineError::invalid("eta2 must be positive"));
        }
        if self.batch_size == 0 || self.max_steps == 0 {
            return Err(PipelineError::invalid("batch_size and max_steps must be >= 1"));
        }
        if self.lambda_l.iter().any(|l| *l < 0.0) {
            return Err(PipelineError::invalid("lambda_l must be non-negative"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let name = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(&name, e))?;
        let config: Config = serde_json::from_str(&text)
            .map_err(|e| PipelineError::invalid(format!("{name}: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(|e| PipelineError::io(path.display().to_string(), e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let config: Config =
            serde_json::from_str(text).map_err(|e| PipelineError::invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_pin_the_desk_scale_run() {
        let c = Config::default();
        assert_eq!(c.input_size, 64);
        assert_eq!(c.blocks, vec![(2, 8), (2, 16), (2, 32)]);
        assert_eq!(c.head_channels, 8);
        assert_eq!(c.fusion_variant, FusionVariant::Hyper);
        assert_eq!((c.k, c.lr, c.momentum), (1.0, 1e-2, 0.9));
        assert_eq!((c.weight_decay, c.mu, c.eta2), (5e-4, 0.01, 0.3));
        assert_eq!((c.batch_size, c.max_steps, c.seed), (4, 2000, 42));
        assert!(c.augment);
        c.validate().unwrap();
    }

    #[test]
    fn json_round_trip_preserves_every_field() {
        let mut c = Config::default();
        c.fuse_channels = Some(vec![4, 8, 16]);
        c.fusion_variant = FusionVariant::Late;
        c.augment = false;
        let back = Config::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_json_fills_in_defaults() {
        let c = Config::from_json(r#"{"seed": 7, "fusion_variant": "adhoc"}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.fusion_variant, FusionVariant::Adhoc);
        assert_eq!(c.input_size, 64);
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        assert!(Config::from_json(r#"{"learning_rate": 0.1}"#).is_err());
        assert!(Config::from_json(r#"{"lr": -1.0}"#).is_err());
        assert!(Config::from_json(r#"{"batch_size": 0}"#).is_err());
        assert!(Config::from_json(r#"{"fuse_channels": [8]}"#).is_err());
        // Input size must survive the encoder's halving between blocks.
        assert!(Config::from_json(r#"{"input_size": 62}"#).is_err());
        assert!(Config::from_json(r#"{"k": 0.0}"#).is_err());
    }

    #[test]
    fn file_round_trip_matches_in_memory() {
        let dir = std::env::temp_dir().join("saldet-config-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("config.json");
        let c = Config { seed: 99, ..Config::default() };
        c.save(&path).unwrap();
        assert_eq!(Config::load(&path).unwrap(), c);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
