//! Experiment configuration files.
//!
//! A flat key-value file (TOML syntax). Recognised keys:
//!
//! | key        | meaning                                                   |
//! |------------|-----------------------------------------------------------|
//! | `widths`   | list `n_0, ..., n_L`                                      |
//! | `sigma_w2` | weight scale σ², a number or one number per layer         |
//! | `sigma_b2` | bias variance, a number or one number per layer (def. 0)  |
//! | `sigma_v2` | residual mixer scale (residual nets only)                 |
//! | `alpha`    | residual skip decay (residual nets only)                  |
//! | `activation` | `relu`, `tanh`, `sigmoid` or `linear`                   |
//! | `seed`     | master seed (default 0)                                   |
//!
//! Unknown keys are rejected.
//!
//! ```text
//! widths = [10, 20, 1]
//! sigma_w2 = 2.0
//! sigma_b2 = 0.0
//! activation = "relu"
//! seed = 42
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::activation::ActivationKind;
use crate::error::{Error, Result};
use crate::nets::{NetConfig, ResNetConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum PerLayer {
    Uniform(f64),
    Layers(Vec<f64>),
}

impl PerLayer {
    fn expand(&self, layers: usize) -> Vec<f64> {
        match self {
            PerLayer::Uniform(v) => vec![*v; layers],
            PerLayer::Layers(v) => v.clone(),
        }
    }

    fn compact(values: &[f64]) -> Self {
        match values.first() {
            Some(first) if values.iter().all(|v| v.to_bits() == first.to_bits()) => PerLayer::Uniform(*first),
            _ => PerLayer::Layers(values.to_vec()),
        }
    }
}

fn zero() -> PerLayer {
    PerLayer::Uniform(0.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    widths: Vec<usize>,
    sigma_w2: PerLayer,
    #[serde(default = "zero")]
    sigma_b2: PerLayer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma_v2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    activation: ActivationKind,
    #[serde(default)]
    seed: u64,
}

/// Residual settings present in a config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualSettings {
    pub sigma_v2: f64,
    pub alpha: f64,
}

/// A parsed configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub net: NetConfig,
    pub residual: Option<ResidualSettings>,
}

impl ExperimentConfig {
    pub fn plain(net: NetConfig) -> Self {
        Self { net, residual: None }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let layers = raw.widths.len().saturating_sub(1);
        let net = NetConfig::with_layer_variances(
            raw.widths,
            raw.sigma_w2.expand(layers),
            raw.sigma_b2.expand(layers),
            raw.activation,
            raw.seed,
        )?;
        let residual = match (raw.sigma_v2, raw.alpha) {
            (None, None) => None,
            (Some(sigma_v2), Some(alpha)) => Some(ResidualSettings { sigma_v2, alpha }),
            _ => return Err(Error::Config("sigma_v2 and alpha must be given together".into())),
        };
        let cfg = Self { net, residual };
        if cfg.residual.is_some() {
            cfg.resnet_config().expect("residual settings present")?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let raw = RawConfig {
            widths: self.net.layer_widths.clone(),
            sigma_w2: PerLayer::compact(&self.net.sigma_w2),
            sigma_b2: PerLayer::compact(&self.net.sigma_b2),
            sigma_v2: self.residual.map(|r| r.sigma_v2),
            alpha: self.residual.map(|r| r.alpha),
            activation: self.net.activation,
            seed: self.net.seed,
        };
        toml::to_string(&raw).expect("config serialises")
    }

    pub fn resnet_config(&self) -> Option<Result<ResNetConfig>> {
        self.residual.map(|r| ResNetConfig::new(self.net.clone(), r.sigma_v2, r.alpha))
    }
}
