//! Layered configuration: built-in defaults, then the TOML file, then flags.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use mirror_align::{GenConfig, ProbeConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::args::{ProbeOverrides, TrainOverrides};

pub const DEFAULT_TEST_FRACTION: f64 = 0.25;

/// Epoch count used by `ablate --fast`.
pub const FAST_EPOCHS: usize = 40;

fn default_test_fraction() -> f64 {
    DEFAULT_TEST_FRACTION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSection {
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(flatten)]
    pub config: GenConfig,
}

impl Default for GenSection {
    fn default() -> Self {
        GenSection {
            test_fraction: DEFAULT_TEST_FRACTION,
            config: GenConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub gen: GenSection,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }
}

pub fn apply_train(mut cfg: TrainConfig, o: &TrainOverrides) -> TrainConfig {
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.strategy {
        cfg.strategy = v.into();
    }
    if let Some(v) = o.temp {
        cfg.align_temperature = v;
    }
    if let Some(v) = o.lambda_ee {
        cfg.lambda_ee = v;
    }
    if let Some(v) = o.lambda_align {
        cfg.lambda_align = v;
    }
    if let Some(v) = o.dz {
        cfg.d_z = v;
    }
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = o.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = o.au_freq {
        cfg.au_frequency = v;
    }
    if o.stop_grad_encoders {
        cfg.stop_grad_encoders = true;
    }
    cfg
}

pub fn apply_probe(mut cfg: ProbeConfig, o: &ProbeOverrides) -> ProbeConfig {
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.strategy {
        cfg.strategy = v.into();
    }
    if let Some(v) = o.temp {
        cfg.temperature = v;
    }
    if let Some(v) = o.dz {
        cfg.d_z = v;
    }
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = o.batch {
        cfg.batch_size = v;
    }
    cfg
}
