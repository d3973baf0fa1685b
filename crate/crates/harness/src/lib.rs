//! Desk-scale pipeline around the model crate: synthetic degraded scenes on
//! disk, a toy backbone with optional adapters, training and segmentation
//! metrics.

pub mod dataset;
pub mod metrics;
pub mod model;
pub mod scene;
pub mod train;

use thiserror::Error;

pub use dataset::{read_dataset, split, write_dataset, Sample};
pub use metrics::{boundary_f, evaluate, iou, Mask, SegScores};
pub use model::{AdapterSettings, BackboneConfig, FreezeMode, Pipeline, PipelineConfig, ToyBackbone};
pub use scene::{generate_scene, DegradationParams, DegradationRanges, SceneConfig, SyntheticScene};
pub use train::{train, LossKind, MetricsRecord, OptimizerKind, StepInfo, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Tensor(#[from] baris_core::TensorError),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error("loss diverged at step {step} (loss = {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("a frozen parameter changed at step {step}")]
    FrozenChanged { step: usize },
}

pub type Result<T> = std::result::Result<T, HarnessError>;
