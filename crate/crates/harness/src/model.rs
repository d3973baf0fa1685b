//! A small four-stage convolutional backbone with optional adapters at the
//! end of each stage, and the full image-to-logits pipeline.

use baris_core::layers::{Conv2d, LayerNorm};
use baris_core::ops::{self, Conv2dSpec, RoiBox};
use baris_core::rng::stream;
use baris_core::{Binding, ParamStore, Result, Scalar, TensorError, Var};
use baris_models::audit::{describe, ParamDesc};
use baris_models::{Decoder, DecoderConfig, Era, EraConfig, FeaturePyramid};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Name prefix of every backbone tensor, adapters excluded.
pub const BACKBONE: &str = "backbone.";
pub const DECODER: &str = "decoder.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSettings {
    pub gamma: usize,
    pub num_envs: usize,
}

impl Default for AdapterSettings {
    fn default() -> Self {
        Self { gamma: 2, num_envs: 16 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub widths: [usize; 4],
    /// Common channel width of the pyramid.
    pub out_channels: usize,
}

impl BackboneConfig {
    /// Widths used for parameter accounting.
    pub const AUDIT: BackboneConfig = BackboneConfig {
        widths: [32, 64, 128, 256],
        out_channels: 64,
    };

    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.out_channels == 0 {
            return Err(TensorError::InvalidArgument {
                op: "backbone config",
                detail: format!("widths and out_channels must be positive: {self:?}"),
            });
        }
        Ok(())
    }
}

/// `x + conv(gelu(conv(LN(x))))`.
#[derive(Clone, Debug)]
struct ResBlock {
    norm: LayerNorm,
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, c: usize) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), c),
            conv1: Conv2d::same(store, rng, &format!("{name}.conv1"), c, c, 3),
            conv2: Conv2d::same(store, rng, &format!("{name}.conv2"), c, c, 3),
        }
    }

    fn forward<T: Scalar>(&self, p: &Binding<T>, x: &Var<T>) -> Result<Var<T>> {
        let h = ops::gelu(&self.conv1.forward(p, &self.norm.forward_nchw(p, x)?)?)?;
        ops::add(x, &self.conv2.forward(p, &h)?)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    /// Stem (5x5, stride 4) for the first stage, 3x3 stride 2 after.
    down: Conv2d,
    block: ResBlock,
    lateral: Conv2d,
}

#[derive(Clone, Debug)]
pub struct ToyBackbone {
    pub cfg: BackboneConfig,
    stages: Vec<Stage>,
    pub adapters: Option<Vec<Era>>,
}

impl ToyBackbone {
    /// Backbone weights come from the `init/backbone` stream and adapter
    /// weights from `init/adapters`, so adding adapters leaves the backbone
    /// initialization unchanged.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        seed: u64,
        cfg: BackboneConfig,
        adapters: Option<AdapterSettings>,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, "init/backbone");
        let mut cin = 3;
        let mut stages = Vec::with_capacity(4);
        for (k, &w) in cfg.widths.iter().enumerate() {
            let name = format!("{BACKBONE}stage{k}");
            let down = if k == 0 {
                let spec = Conv2dSpec { stride: 4, padding: (2, 2), groups: 1 };
                Conv2d::new(store, &mut rng, &format!("{name}.stem"), cin, w, (5, 5), spec, true)
            } else {
                let spec = Conv2dSpec::same(3, 3).with_stride(2);
                Conv2d::new(store, &mut rng, &format!("{name}.down"), cin, w, (3, 3), spec, true)
            };
            stages.push(Stage {
                down,
                block: ResBlock::new(store, &mut rng, &format!("{name}.block"), w),
                lateral: Conv2d::same(store, &mut rng, &format!("{name}.lateral"), w, cfg.out_channels, 1),
            });
            cin = w;
        }
        let adapters = match adapters {
            None => None,
            Some(a) => {
                let mut rng = stream(seed, "init/adapters");
                let eras = cfg
                    .widths
                    .iter()
                    .enumerate()
                    .map(|(k, &w)| {
                        let era_cfg = EraConfig::new(w).with_gamma(a.gamma).with_envs(a.num_envs);
                        Era::new(store, &mut rng, &format!("adapter.stage{k}"), era_cfg)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(eras)
            }
        };
        Ok(Self { cfg, stages, adapters })
    }

    /// Pyramid at strides 4, 8, 16 and 32.
    pub fn forward<T: Scalar>(&self, p: &Binding<T>, image: &Var<T>) -> Result<FeaturePyramid<T>> {
        let mut x = image.clone();
        let mut levels = Vec::with_capacity(4);
        for (k, stage) in self.stages.iter().enumerate() {
            x = stage.block.forward(p, &ops::gelu(&stage.down.forward(p, &x)?)?)?;
            if let Some(eras) = &self.adapters {
                x = eras[k].forward(p, &x)?;
            }
            levels.push(stage.lateral.forward(p, &x)?);
        }
        let levels: [Var<T>; 4] = levels.try_into().map_err(|_| TensorError::InvalidArgument {
            op: "backbone",
            detail: "expected four stages".into(),
        })?;
        FeaturePyramid::new(levels)
    }
}

/// Backbone and adapter tensors of a backbone built with `cfg`.
pub fn describe_backbone(cfg: BackboneConfig, adapters: AdapterSettings) -> Result<(Vec<ParamDesc>, Vec<ParamDesc>)> {
    let mut store = ParamStore::<f32>::new();
    ToyBackbone::new(&mut store, 0, cfg, Some(adapters))?;
    Ok((describe(&store, |n| n.starts_with(BACKBONE)), describe(&store, |n| n.starts_with("adapter."))))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    /// Everything trains.
    None,
    /// Only adapters and the decoder train.
    Era,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub backbone: BackboneConfig,
    pub refine_blocks: usize,
    pub adapters: Option<AdapterSettings>,
    pub freeze: FreezeMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig {
                widths: [16, 24, 32, 48],
                out_channels: 16,
            },
            refine_blocks: 3,
            adapters: None,
            freeze: FreezeMode::None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.freeze == FreezeMode::Era && self.adapters.is_none() {
            return Err(TensorError::InvalidArgument {
                op: "pipeline config",
                detail: "freeze mode `era` needs adapters to be configured".into(),
            });
        }
        self.backbone.validate()
    }
}

/// Image to single-class mask logits at image resolution.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub backbone: ToyBackbone,
    pub decoder: Decoder,
}

impl Pipeline {
    /// Builds all parameters in `store` and applies the freeze mode.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, seed: u64, cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone = ToyBackbone::new(store, seed, cfg.backbone, cfg.adapters)?;
        let mut dcfg = DecoderConfig::new(cfg.backbone.out_channels, 1);
        dcfg.num_refine_blocks = cfg.refine_blocks;
        let decoder = Decoder::new(store, &mut stream(seed, "init/decoder"), "decoder", dcfg)?;
        if cfg.freeze == FreezeMode::Era {
            store.set_trainable_where(false, |n| n.starts_with(BACKBONE));
        }
        Ok(Self { cfg, backbone, decoder })
    }

    /// `[N, 1, H, W]` logits for `[N, 3, H, W]` images. The decoder output
    /// is bilinearly resized up to the image size when smaller.
    pub fn forward<T: Scalar>(&self, p: &Binding<T>, images: &Var<T>) -> Result<Var<T>> {
        let [_, _, h, w] = images.value().dims4("pipeline")?;
        let logits = self.decoder.forward(p, &self.backbone.forward(p, images)?)?;
        let (lh, lw) = (logits.shape()[2], logits.shape()[3]);
        if (lh, lw) == (h, w) {
            return Ok(logits);
        }
        log::debug!("resizing decoder output {lh}x{lw} to {h}x{w} (x{:.2})", h as f64 / lh as f64);
        ops::roi_align(&logits, RoiBox::FULL, h, w)
    }

    /// Side of the decoder output for an input of side `image_side`.
    pub fn decoder_side(&self, image_side: usize) -> usize {
        (image_side / 32) * self.decoder.upscale()
    }
}

/// Parameters that stay fixed under `freeze`.
pub fn is_frozen(name: &str, freeze: FreezeMode) -> bool {
    freeze == FreezeMode::Era && name.starts_with(BACKBONE)
}
