//! Run configuration: TOML sections, every field defaulted, unknown keys
//! rejected. The resolved form is written next to each run as JSON and can be
//! fed back through `--config` unchanged.

use std::path::{Path, PathBuf};

use baris_harness::model::{AdapterSettings, BackboneConfig, FreezeMode, PipelineConfig};
use baris_harness::scene::{DegradationRanges, Range, SceneConfig};
use baris_harness::{LossKind, OptimizerKind, TrainConfig};
use baris_models::Pool;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub model: ModelSection,
    /// Present means adapters are inserted.
    pub era: Option<EraSection>,
    pub scene: SceneSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dir: PathBuf,
    pub train_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            train_fraction: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub max_steps: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            optimizer: t.optimizer,
            beta1: t.beta1,
            beta2: t.beta2,
            weight_decay: t.weight_decay,
            warmup_fraction: t.warmup_fraction,
            max_steps: t.max_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub kind: LossKind,
    pub bace_scale: usize,
    pub bace_lambda: f64,
    pub bace_pool: Pool,
}

impl Default for LossSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            kind: t.loss,
            bace_scale: t.bace_scale,
            bace_lambda: t.bace_lambda,
            bace_pool: t.bace_pool,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub widths: [usize; 4],
    pub out_channels: usize,
    pub refine_blocks: usize,
    pub freeze: FreezeMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            widths: p.backbone.widths,
            out_channels: p.backbone.out_channels,
            refine_blocks: p.refine_blocks,
            freeze: p.freeze,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EraSection {
    pub gamma: usize,
    pub num_envs: usize,
}

impl Default for EraSection {
    fn default() -> Self {
        let a = AdapterSettings::default();
        Self {
            gamma: a.gamma,
            num_envs: a.num_envs,
        }
    }
}

/// Scene generation; ranges are `[lo, hi]` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub size: usize,
    pub max_instances: usize,
    pub red: [f32; 2],
    pub green: [f32; 2],
    pub blue: [f32; 2],
    pub blur_sigma: [f32; 2],
    pub haze: [f32; 2],
    pub noise_sigma: [f32; 2],
}

impl Default for SceneSection {
    fn default() -> Self {
        let s = SceneConfig::default();
        let d = s.degradation;
        let pair = |r: Range| [r.lo, r.hi];
        Self {
            size: s.size,
            max_instances: s.max_instances,
            red: pair(d.red),
            green: pair(d.green),
            blue: pair(d.blue),
            blur_sigma: pair(d.blur_sigma),
            haze: pair(d.haze),
            noise_sigma: pair(d.noise_sigma),
        }
    }
}

impl SceneSection {
    pub fn to_scene_config(&self) -> Result<SceneConfig, CliError> {
        let r = |p: [f32; 2]| Range::new(p[0], p[1]);
        let cfg = SceneConfig {
            size: self.size,
            max_instances: self.max_instances,
            degradation: DegradationRanges {
                red: r(self.red),
                green: r(self.green),
                blue: r(self.blue),
                blur_sigma: r(self.blur_sigma),
                haze: r(self.haze),
                noise_sigma: r(self.noise_sigma),
            },
        };
        cfg.validate().map_err(CliError::Config)?;
        Ok(cfg)
    }
}

impl RunConfig {
    /// Parses TOML; errors carry the origin and the line and column.
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))
    }

    /// Reads TOML, or JSON when the file ends in `.json` (a `resolved.json`).
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
        } else {
            Self::parse(&text, &path.display().to_string())
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            backbone: BackboneConfig {
                widths: self.model.widths,
                out_channels: self.model.out_channels,
            },
            refine_blocks: self.model.refine_blocks,
            adapters: self.era.map(|e| AdapterSettings {
                gamma: e.gamma,
                num_envs: e.num_envs,
            }),
            freeze: self.model.freeze,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        if self.model.freeze == FreezeMode::Era && self.era.is_none() {
            return Err(CliError::Config(
                "freeze = \"era\" needs adapters; add an [era] section or pass --era".into(),
            ));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(CliError::Config(format!(
                "data.train_fraction must lie in (0, 1), got {}",
                self.data.train_fraction
            )));
        }
        let t = &self.train;
        let cfg = TrainConfig {
            seed: self.seed,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            optimizer: t.optimizer,
            beta1: t.beta1,
            beta2: t.beta2,
            weight_decay: t.weight_decay,
            warmup_fraction: t.warmup_fraction,
            loss: self.loss.kind,
            bace_scale: self.loss.bace_scale,
            bace_lambda: self.loss.bace_lambda,
            bace_pool: self.loss.bace_pool,
            max_steps: t.max_steps,
            pipeline: self.pipeline(),
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}
