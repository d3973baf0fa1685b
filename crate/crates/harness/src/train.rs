//! Training loop with warmup and step decay, per-epoch validation, JSONL
//! metrics and checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use baris_core::optim::{AdamW, Optimizer, Sgd};
use baris_core::rng::stream;
use baris_core::{ops, ParamStore, Tape, Tensor};
use baris_models::{total_loss, BaceConfig, Pool};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::metrics::{evaluate, SegScores};
use crate::model::{is_frozen, Pipeline, PipelineConfig};
use crate::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CeOnly,
    CePlusBace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Share of all steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub loss: LossKind,
    pub bace_scale: usize,
    pub bace_lambda: f64,
    pub bace_pool: Pool,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub pipeline: PipelineConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 10,
            batch_size: 8,
            learning_rate: 2e-3,
            optimizer: OptimizerKind::Adamw,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.05,
            warmup_fraction: 0.1,
            loss: LossKind::CeOnly,
            bace_scale: 4,
            bace_lambda: 1.0,
            bace_pool: Pool::Max,
            max_steps: None,
            pipeline: PipelineConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad(format!("epochs and batch_size must be positive, got {} and {}", self.epochs, self.batch_size));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate and weight_decay must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction must lie in [0, 1], got {}", self.warmup_fraction));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        self.bace().validate()?;
        self.pipeline.validate()?;
        Ok(())
    }

    pub fn bace(&self) -> BaceConfig<f32> {
        BaceConfig {
            scale: self.bace_scale,
            lambda: self.bace_lambda,
            pool: self.bace_pool,
            class_weight: None,
        }
    }

    /// Learning rate for 0-based `step` of `total`: linear warmup, then x0.1
    /// after two thirds of training and x0.01 after eleven twelfths.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warmup = (self.warmup_fraction * total as f64).ceil() as usize;
        if step < warmup {
            return self.learning_rate * (step + 1) as f64 / warmup as f64;
        }
        let t = step as f64 / total as f64;
        let decay = if t >= 11.0 / 12.0 {
            0.01
        } else if t >= 8.0 / 12.0 {
            0.1
        } else {
            1.0
        };
        self.learning_rate * decay
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub mask_iou: f64,
    pub boundary_f: f64,
}

/// Passed to the step observer after each optimizer update.
pub struct StepInfo<'a> {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Gradients of the step, in store order.
    pub grads: &'a [Option<Tensor<f32>>],
    pub store: &'a ParamStore<f32>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub steps: usize,
    pub store: ParamStore<f32>,
    pub pipeline: Pipeline,
}

/// Stacks images and targets of `batch` into `[B, 3, H, W]` and `[B, 1, H, W]`.
pub fn collate(batch: &[&Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let stack = |parts: Vec<&Tensor<f32>>| -> Result<Tensor<f32>> {
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(parts[0].shape());
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.numel()).sum());
        for t in &parts {
            t.expect_same_shape(parts[0], "collate")?;
            data.extend_from_slice(t.data());
        }
        Ok(Tensor::new(&shape, data)?)
    };
    Ok((
        stack(batch.iter().map(|s| &s.image).collect())?,
        stack(batch.iter().map(|s| &s.target).collect())?,
    ))
}

/// Validation scores of `pipeline` over `samples`, in batches.
pub fn validate(pipeline: &Pipeline, store: &ParamStore<f32>, samples: &[Sample], batch: usize) -> Result<SegScores> {
    if samples.is_empty() {
        return Ok(SegScores::default());
    }
    let mut total = SegScores::default();
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, targets) = collate(&refs)?;
        let tape = Tape::new();
        let logits = pipeline.forward(&store.bind(&tape), &tape.constant(images))?;
        let [n, _, h, w] = logits.value().dims4("validate")?;
        let s = evaluate(logits.value().data(), targets.data(), n, h, w);
        total.mask_iou += s.mask_iou * n as f64;
        total.boundary_f += s.boundary_f * n as f64;
    }
    let n = samples.len() as f64;
    Ok(SegScores {
        mask_iou: total.mask_iou / n,
        boundary_f: total.boundary_f / n,
    })
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })?;
    writeln!(f, "{line}").map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Trains a fresh pipeline. With `out`, writes `metrics.jsonl` (one record
/// per epoch), `timing.jsonl` (wall-clock per epoch, kept apart so metrics
/// stay reproducible byte for byte) and a checkpoint per epoch.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    out: Option<&Path>,
    observer: &mut dyn FnMut(&StepInfo),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(HarnessError::Config("training set is empty".into()));
    }
    let mut store = ParamStore::<f32>::new();
    let pipeline = Pipeline::new(&mut store, cfg.seed, cfg.pipeline.clone())?;
    let freeze = cfg.pipeline.freeze;
    let frozen = |e: &baris_core::ParamEntry<f32>| is_frozen(&e.name, freeze);
    let frozen_sum = store.checksum(frozen);

    let mut optimizer: Box<dyn Optimizer<f32>> = match cfg.optimizer {
        OptimizerKind::Sgd => Box::new(Sgd { weight_decay: cfg.weight_decay }),
        OptimizerKind::Adamw => Box::new(AdamW::new(cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay)),
    };
    let bace = cfg.bace();
    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let planned = per_epoch * cfg.epochs;
    let total = cfg.max_steps.map_or(planned, |m| m.min(planned));
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        for name in ["metrics.jsonl", "timing.jsonl"] {
            let _ = fs::remove_file(dir.join(name));
        }
    }

    let mut step = 0;
    let mut records = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut stream(cfg.seed, &format!("train/shuffle/{epoch}")));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if step == total {
                break;
            }
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (images, targets) = collate(&refs)?;
            let tape = Tape::new();
            let p = store.bind(&tape);
            let logits = pipeline.forward(&p, &tape.constant(images))?;
            let loss = match cfg.loss {
                LossKind::CeOnly => ops::bce_with_logits(&logits, &targets, None)?,
                LossKind::CePlusBace => total_loss(&logits, &targets, &bace)?,
            };
            let value = loss.value().item() as f64;
            if !value.is_finite() {
                return Err(HarnessError::Divergence { step, loss: value });
            }
            loss.backward()?;
            let grads = p.grads();
            let lr = cfg.lr_at(step, total);
            optimizer.step(&mut store, &grads, lr);
            if freeze != crate::model::FreezeMode::None && store.checksum(frozen) != frozen_sum {
                return Err(HarnessError::FrozenChanged { step });
            }
            observer(&StepInfo {
                step,
                loss: value,
                lr,
                grads: &grads,
                store: &store,
            });
            loss_sum += value;
            batches += 1;
            step += 1;
        }
        if batches == 0 {
            break 'epochs;
        }
        let scores = validate(&pipeline, &store, val_set, 25)?;
        let record = MetricsRecord {
            epoch,
            steps: step,
            train_loss: loss_sum / batches as f64,
            mask_iou: scores.mask_iou,
            boundary_f: scores.boundary_f,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} iou {:.4} bf {:.4} ({:.1}s)",
            record.train_loss,
            record.mask_iou,
            record.boundary_f,
            started.elapsed().as_secs_f64()
        );
        if let Some(dir) = out {
            append_line(&dir.join("metrics.jsonl"), &serde_json::to_string(&record)?)?;
            let timing = serde_json::json!({ "epoch": epoch, "wall_seconds": started.elapsed().as_secs_f64() });
            append_line(&dir.join("timing.jsonl"), &timing.to_string())?;
            store.save(&dir.join("checkpoints").join(format!("epoch_{epoch:03}")))?;
        }
        records.push(record);
        if step == total {
            break;
        }
    }
    Ok(TrainOutcome {
        records,
        steps: step,
        store,
        pipeline,
    })
}
