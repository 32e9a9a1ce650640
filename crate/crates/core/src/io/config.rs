//! JSON configuration files.
//!
//! ```json
//! {
//!   "model": {
//!     "stage_channels": [8, 16, 24, 32],
//!     "stage_depths": [1, 1, 2, 1],
//!     "ffn_ratio": 4.0,
//!     "num_classes": 10,
//!     "layer_scale_init": 1e-6
//!   },
//!   "rfa": {
//!     "layer_count": 3,
//!     "schedule": "formula",
//!     "small_kernel": 3,
//!     "dis_topology": "sum"
//!   },
//!   "seed": 0
//! }
//! ```
//!
//! `schedule` is either `"formula"` (`K_n = 2n + 5`) or an explicit list of
//! odd kernels. `ffn_ratio`, `layer_scale_init`, `small_kernel`,
//! `dis_topology`, `amp_projection` and `seed` are optional. Unknown keys
//! are rejected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rfa::{DisTopology, RfaConfig, ScheduleMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub model: ModelSection,
    pub rfa: RfaSection,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub stage_channels: [usize; 4],
    pub stage_depths: [usize; 4],
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: f64,
    pub num_classes: usize,
    #[serde(default = "default_layer_scale")]
    pub layer_scale_init: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RfaSection {
    pub layer_count: usize,
    pub schedule: Schedule,
    #[serde(default = "default_small_kernel")]
    pub small_kernel: usize,
    #[serde(default)]
    pub dis_topology: DisTopology,
    #[serde(default)]
    pub amp_projection: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Schedule {
    Named(ScheduleName),
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleName {
    Formula,
}

fn default_ffn_ratio() -> f64 {
    4.0
}

fn default_layer_scale() -> f64 {
    1e-6
}

fn default_small_kernel() -> usize {
    3
}

impl ConfigFile {
    /// Validated model configuration.
    pub fn to_model_config(&self) -> Result<ModelConfig> {
        let r = &self.rfa;
        let large_kernels = match &r.schedule {
            Schedule::Named(ScheduleName::Formula) => (1..=r.layer_count)
                .map(|n| crate::rfa::kernel_schedule(n, r.layer_count))
                .collect::<Result<Vec<_>>>()?,
            Schedule::Explicit(k) => k.clone(),
        };
        let rfa = RfaConfig {
            layer_count: r.layer_count,
            channels: self.model.stage_channels[0],
            large_kernels,
            small_kernel: r.small_kernel,
            schedule: match r.schedule {
                Schedule::Named(_) => ScheduleMode::Formula,
                Schedule::Explicit(_) => ScheduleMode::Explicit,
            },
            dis_topology: r.dis_topology,
            amp_projection: r.amp_projection,
        };
        let cfg = ModelConfig {
            stage_channels: self.model.stage_channels,
            stage_depths: self.model.stage_depths,
            rfa,
            ffn_ratio: self.model.ffn_ratio,
            num_classes: self.model.num_classes,
            layer_scale_init: self.model.layer_scale_init,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_model_config(cfg: &ModelConfig, seed: u64) -> Self {
        Self {
            model: ModelSection {
                stage_channels: cfg.stage_channels,
                stage_depths: cfg.stage_depths,
                ffn_ratio: cfg.ffn_ratio,
                num_classes: cfg.num_classes,
                layer_scale_init: cfg.layer_scale_init,
            },
            rfa: RfaSection {
                layer_count: cfg.rfa.layer_count,
                schedule: match cfg.rfa.schedule {
                    ScheduleMode::Formula => Schedule::Named(ScheduleName::Formula),
                    ScheduleMode::Explicit => Schedule::Explicit(cfg.rfa.large_kernels.clone()),
                },
                small_kernel: cfg.rfa.small_kernel,
                dis_topology: cfg.rfa.dis_topology,
                amp_projection: cfg.rfa.amp_projection,
            },
            seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<(ModelConfig, RfaConfig, u64)> {
    let file: ConfigFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let model = file.to_model_config()?;
    let rfa = model.rfa.clone();
    Ok((model, rfa, file.seed))
}
