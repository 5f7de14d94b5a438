use std::path::{Path, PathBuf};

use dispnet_core::data::{ShapeFamily, SyntheticSpec};
use dispnet_core::losses::MatchMode;
use dispnet_core::metrics::Bounds;
use dispnet_core::model::{AdamConfig, ArchitectureConfig, LossWeights, LrSchedule, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::exit::{config_error, io_error, Failure};

/// Every setting of a run. The effective value, after presets and flags,
/// is written to `<out>/config.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Adds a class head on top of the architecture.
    pub semantic_classes: Option<usize>,
    pub architecture: Architecture,
    pub data: DataConfig,
    pub train: TrainSection,
    pub report: ReportConfig,
}

/// A named preset (`desk`, `full`) or a full layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Architecture {
    Preset(String),
    Custom(ArchitectureConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    /// `root/<split>/{partial,complete}/*.ply`
    Dataset { root: PathBuf, split: String },
    /// One generated pair; point counts follow the architecture.
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_size: usize,
    /// Checkpoint period in steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub weights: LossWeights,
    pub matching: MatchMode,
    pub optimizer: AdamConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    KeyValue,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub formats: Vec<ReportFormat>,
    /// Use the scene scale factors for the scaled Chamfer columns.
    pub scene: bool,
    /// Voxel grid width for IoU; the grid is `x × 3x/5 × x`.
    pub voxel_resolution: usize,
    pub bounds: Bounds,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("run"),
            semantic_classes: None,
            architecture: Architecture::Preset("desk".into()),
            data: DataConfig::Synthetic(SyntheticSpec::default()),
            train: TrainSection::default(),
            report: ReportConfig::default(),
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 1,
            checkpoint_every: 100,
            weights: LossWeights::default(),
            matching: MatchMode::Nearest,
            optimizer: AdamConfig::default(),
        }
    }
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            formats: vec![ReportFormat::KeyValue, ReportFormat::Json],
            scene: false,
            voxel_resolution: 30,
            bounds: Bounds::UNIT,
        }
    }
}

pub const PRESETS: [&str; 3] = ["default", "overfit", "overfit-semantic"];

impl RunConfig {
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "overfit" => Some(Self::overfit()),
            "overfit-semantic" => Some(Self::overfit_semantic()),
            _ => None,
        }
    }

    /// Desk network fitted to one synthetic box.
    pub fn overfit() -> Self {
        let steps = 500;
        Self {
            data: DataConfig::Synthetic(SyntheticSpec {
                family: ShapeFamily::Box,
                seed: 1,
                ..Default::default()
            }),
            train: TrainSection {
                steps,
                checkpoint_every: 100,
                matching: MatchMode::Assignment,
                optimizer: AdamConfig {
                    lr: 1e-3,
                    schedule: LrSchedule::Cosine {
                        total_steps: steps,
                        final_fraction: 0.01,
                    },
                    ..Default::default()
                },
                ..Default::default()
            },
            out: PathBuf::from("run-overfit"),
            ..Default::default()
        }
    }

    /// Labeled synthetic room with a class head.
    pub fn overfit_semantic() -> Self {
        let mut c = Self::overfit();
        c.data = DataConfig::Synthetic(SyntheticSpec {
            family: ShapeFamily::Room,
            seed: 1,
            ..Default::default()
        });
        c.semantic_classes = Some(3);
        c.train.steps = 1000;
        c.train.optimizer.schedule = LrSchedule::Cosine {
            total_steps: 1000,
            final_fraction: 0.01,
        };
        c.out = PathBuf::from("run-overfit-semantic");
        c
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// The architecture this run builds, validated.
    pub fn resolve_architecture(&self) -> Result<ArchitectureConfig, Failure> {
        let base = match &self.architecture {
            Architecture::Preset(name) => match name.as_str() {
                "desk" => ArchitectureConfig::desk(),
                "full" => ArchitectureConfig::full_scale(),
                other => return Err(config_error(format!("unknown architecture preset '{other}' (desk, full)"))),
            },
            Architecture::Custom(c) => c.clone(),
        };
        let arch = match self.semantic_classes {
            Some(n) if base.semantic_classes != Some(n) => base.with_semantic(n),
            _ => base,
        };
        arch.validate().map_err(|e| config_error(e.to_string()))?;
        Ok(arch)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            weights: self.train.weights,
            matching: self.train.matching,
            optimizer: self.train.optimizer,
        }
    }
}
