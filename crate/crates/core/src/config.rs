//! Run configuration read from TOML. Unknown keys are rejected.
//!
//! ```toml
//! seed = 7
//!
//! [model]
//! preset = "desk"          # "benchmark", "desk" or "shallow"
//! kind = "qru3d"           # benchmark preset only: qru3d, qru2d, c3d
//! width = 1.0              # benchmark: channel multiplier; shallow: channel count
//! scheme = "A"             # A, U or B
//! global_residual = true
//!
//! [data]
//! inputs = ["scene.hsi"]   # empty: use seeded synthetic scenes instead
//! synthetic_scenes = 2
//! synthetic_extent = [64, 64, 8]
//! patch_size = 16
//! patch_stride = 8
//! augment = false
//! validation = 8
//!
//! [train]
//! schedule = { kind = "constant", epochs = 50, lr = 1e-3, batch_size = 16, noise = { kind = "fixed", sigma = 25.0 } }
//! max_steps = 200
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::net::{DirectionScheme, NetworkConfig};
use crate::qru::UnitKind;
use crate::train::{NoiseModel, Schedule, StageSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: String,
    pub kind: String,
    pub width: Option<f64>,
    pub scheme: String,
    pub global_residual: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "desk".into(),
            kind: "qru3d".into(),
            width: None,
            scheme: "A".into(),
            global_residual: true,
        }
    }
}

impl ModelSection {
    pub fn network(&self) -> Result<NetworkConfig> {
        let scheme: DirectionScheme = self.scheme.parse()?;
        let mut cfg = match self.preset.as_str() {
            "benchmark" => {
                let kind: UnitKind = self.kind.parse()?;
                NetworkConfig::variant(kind, self.width.unwrap_or(1.0), scheme)
            }
            "desk" => NetworkConfig::desk().with_scheme(scheme),
            "shallow" => {
                let w = self.width.unwrap_or(8.0);
                if !(w >= 1.0 && w.fract() == 0.0) {
                    return config_err(format!("shallow width must be a whole channel count, got {w}"));
                }
                NetworkConfig::shallow(w as usize).with_scheme(scheme)
            }
            other => return config_err(format!("unknown model preset {other:?}")),
        };
        cfg.global_residual = self.global_residual;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub inputs: Vec<PathBuf>,
    pub synthetic_scenes: usize,
    pub synthetic_extent: [usize; 3],
    pub patch_size: usize,
    pub patch_stride: usize,
    pub augment: bool,
    /// Held-out patches for validation PSNR.
    pub validation: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            inputs: Vec::new(),
            synthetic_scenes: 2,
            synthetic_extent: [64, 64, 8],
            patch_size: 16,
            patch_stride: 8,
            augment: false,
            validation: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScheduleConfig {
    /// The three-stage, 100-epoch incremental policy.
    Incremental {},
    Constant { epochs: usize, lr: f64, batch_size: usize, noise: NoiseModel },
    Custom { stages: Vec<StageSpec> },
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule> {
        match self {
            ScheduleConfig::Incremental {} => Ok(Schedule::incremental()),
            ScheduleConfig::Constant { epochs, lr, batch_size, noise } => {
                Schedule::constant(*epochs, noise.clone(), *lr, *batch_size)
            }
            ScheduleConfig::Custom { stages } => Schedule::new(stages.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub schedule: ScheduleConfig,
    pub max_steps: Option<usize>,
    /// Stop before this epoch.
    pub end_epoch: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            schedule: ScheduleConfig::Constant {
                epochs: 50,
                lr: 1e-3,
                batch_size: 16,
                noise: NoiseModel::Fixed { sigma: 25.0 },
            },
            max_steps: None,
            end_epoch: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.network()?;
        self.train.schedule.build()?;
        let d = &self.data;
        if d.patch_size == 0 || d.patch_stride == 0 {
            return config_err("patch size and stride must be positive");
        }
        if d.inputs.is_empty() && d.synthetic_scenes == 0 {
            return config_err("no input cubes and no synthetic scenes requested");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(c.model.network().unwrap(), NetworkConfig::desk());
    }

    #[test]
    fn documented_example_parses() {
        let doc = include_str!("config.rs");
        let text: String = doc
            .lines()
            .skip_while(|l| !l.starts_with("//! ```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("//! ```"))
            .map(|l| l.trim_start_matches("//!").trim_start().to_string() + "\n")
            .collect();
        let mut c = RunConfig::from_toml(&text.replace("inputs = [\"scene.hsi\"]", "inputs = []")).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.max_steps, Some(200));
        c.model.preset = "benchmark".into();
        c.model.kind = "c3d".into();
        assert!(c.model.network().is_ok());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_toml("sed = 1").is_err());
        assert!(RunConfig::from_toml("[model]\npreset = \"desk\"\ncolour = 3").is_err());
        assert!(RunConfig::from_toml("[model]\npreset = \"tiny\"").is_err());
        assert!(RunConfig::from_toml("[train.schedule]\nkind = \"incremental\"\nextra = 1").is_err());
        let c = RunConfig::from_toml("[train.schedule]\nkind = \"incremental\"").unwrap();
        assert_eq!(c.train.schedule.build().unwrap().total_epochs(), 100);
    }
}
