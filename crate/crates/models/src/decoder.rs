//! Refinement decoder: a stack of gated multi-scale refinement blocks, each
//! followed by a depthwise-separable x2 upsample, and a 1x1 mask head.

use baris_core::layers::{Conv2d, DsConv, LayerNorm, Linear};
use baris_core::ops::{self, RoiBox};
use baris_core::{Binding, ParamStore, Result, Scalar, TensorError, Var};
use rand::Rng;

/// Backbone outputs at strides 4, 8, 16 and 32, all with `C` channels.
#[derive(Clone)]
pub struct FeaturePyramid<T> {
    pub levels: [Var<T>; 4],
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn new(levels: [Var<T>; 4]) -> Result<Self> {
        let [n, c, h, w] = levels[0].value().dims4("feature pyramid")?;
        for (k, level) in levels.iter().enumerate().skip(1) {
            let want = [n, c, h >> k, w >> k];
            let got = level.value().dims4("feature pyramid")?;
            if got != want || (h >> k) << k != h || (w >> k) << k != w {
                return Err(TensorError::ShapeMismatch {
                    op: "feature pyramid",
                    detail: format!("f{} is {got:?}, expected {want:?} (halving from f1 {:?})", k + 1, levels[0].shape()),
                });
            }
        }
        Ok(Self { levels })
    }

    pub fn channels(&self) -> usize {
        self.levels[0].shape()[1]
    }

    /// Spatial size of the finest level.
    pub fn finest(&self) -> (usize, usize) {
        let s = self.levels[0].shape();
        (s[2], s[3])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub channels: usize,
    pub num_classes: usize,
    pub num_refine_blocks: usize,
    /// Hidden width of the attention MLP as a multiple of `channels`.
    pub ffn_ratio: usize,
}

impl DecoderConfig {
    pub fn new(channels: usize, num_classes: usize) -> Self {
        Self {
            channels,
            num_classes,
            num_refine_blocks: 3,
            ffn_ratio: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(TensorError::InvalidArgument { op: "decoder config", detail });
        if self.num_refine_blocks == 0 {
            return bad("num_refine_blocks must be at least 1".into());
        }
        if self.channels == 0 || self.num_classes == 0 || self.ffn_ratio == 0 {
            return bad(format!("channels, num_classes and ffn_ratio must be positive: {self:?}"));
        }
        Ok(())
    }
}

/// Gated multi-scale refinement of the coarsest feature map.
#[derive(Clone, Debug)]
pub struct Msgrn {
    pub stage: [DsConv; 4],
    pub fuse: Conv2d,
    pub attn_conv: Conv2d,
    pub attn_norm: LayerNorm,
    pub value: Linear,
    pub gate: DsConv,
    pub ffn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl Msgrn {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, c: usize, ffn_ratio: usize) -> Self {
        let stage = std::array::from_fn(|n| DsConv::new(store, rng, &format!("{name}.stage{}", n + 1), c, c, 3));
        Self {
            stage,
            fuse: Conv2d::same(store, rng, &format!("{name}.fuse"), 4 * c, c, 1),
            attn_conv: Conv2d::same(store, rng, &format!("{name}.attn_conv"), c, c, 3),
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), c),
            value: Linear::new(store, rng, &format!("{name}.value"), c, c),
            gate: DsConv::new(store, rng, &format!("{name}.gate"), c, c, 3),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), c),
            ffn_in: Linear::new(store, rng, &format!("{name}.ffn_in"), c, ffn_ratio * c),
            ffn_out: Linear::new(store, rng, &format!("{name}.ffn_out"), ffn_ratio * c, c),
        }
    }

    /// `MLP(LN(z)) + z` on an NCHW map.
    pub fn ffn<T: Scalar>(&self, p: &Binding<T>, z: &Var<T>) -> Result<Var<T>> {
        let zl = ops::to_channels_last(z)?;
        let hidden = ops::gelu(&self.ffn_in.forward(p, &self.ffn_norm.forward(p, &zl)?)?)?;
        let out = ops::add(&self.ffn_out.forward(p, &hidden)?, &zl)?;
        ops::to_channels_first(&out)
    }

    /// Refines `f4` (the current coarse map) using every pyramid level
    /// resampled to its resolution. Output has the shape of `f4`.
    pub fn forward<T: Scalar>(&self, p: &Binding<T>, pyr: &FeaturePyramid<T>, f4: &Var<T>) -> Result<Var<T>> {
        let [n, c, h, w] = f4.value().dims4("msgrn")?;
        let want = pyr.levels[0].shape();
        if n != want[0] || c != want[1] {
            return Err(TensorError::ShapeMismatch {
                op: "msgrn",
                detail: format!("refined map {:?} does not match pyramid batch/channels {want:?}", f4.shape()),
            });
        }
        let x4 = self.stage[3].forward(p, f4)?;
        let mut resampled = Vec::with_capacity(3);
        for k in 0..3 {
            let xk = self.stage[k].forward(p, &pyr.levels[k])?;
            resampled.push(ops::roi_align(&xk, RoiBox::FULL, h, w)?);
        }
        let x = ops::concat(&[&x4, &resampled[0], &resampled[1], &resampled[2]], 1)?;
        let x_hat = self.fuse.forward(p, &x)?;
        let y = self.attn_norm.forward_nchw(p, &self.attn_conv.forward(p, &x_hat)?)?;
        let v = ops::to_channels_first(&self.value.forward(p, &ops::to_channels_last(&x_hat)?)?)?;
        let gate = ops::sigmoid(&self.gate.forward(p, &resampled[0])?)?;
        let z_hat = ops::mul(&gate, &ops::mul(&y, &v)?)?;
        ops::add(&self.ffn(p, &z_hat)?, &x4)
    }
}

/// Multi-kernel depthwise convs averaged, expanded to `4C`, pixel-shuffled x2.
#[derive(Clone, Debug)]
pub struct Dsu {
    pub depthwise: Vec<Conv2d>,
    pub expand: Conv2d,
}

impl Dsu {
    pub const KERNELS: [usize; 3] = [3, 5, 7];
    pub const FACTOR: usize = 2;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, c: usize) -> Self {
        let depthwise = Self::KERNELS
            .iter()
            .map(|&k| Conv2d::depthwise(store, rng, &format!("{name}.dw{k}"), c, k, k))
            .collect();
        let r2 = Self::FACTOR * Self::FACTOR;
        Self {
            depthwise,
            expand: Conv2d::same(store, rng, &format!("{name}.expand"), c, r2 * c, 1),
        }
    }

    pub fn forward<T: Scalar>(&self, p: &Binding<T>, x: &Var<T>) -> Result<Var<T>> {
        let branches = self
            .depthwise
            .iter()
            .map(|conv| conv.forward(p, x))
            .collect::<Result<Vec<_>>>()?;
        let avg = ops::average(&branches.iter().collect::<Vec<_>>())?;
        ops::pixel_shuffle(&self.expand.forward(p, &avg)?, Self::FACTOR)
    }
}

#[derive(Clone, Debug)]
pub struct RefineBlock {
    pub msgrn: Msgrn,
    pub dsu: Dsu,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub blocks: Vec<RefineBlock>,
    pub head: Conv2d,
}

impl Decoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, cfg: DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let blocks = (0..cfg.num_refine_blocks)
            .map(|i| RefineBlock {
                msgrn: Msgrn::new(store, rng, &format!("{name}.block{i}.msgrn"), c, cfg.ffn_ratio),
                dsu: Dsu::new(store, rng, &format!("{name}.block{i}.dsu"), c),
            })
            .collect();
        let head = Conv2d::same(store, rng, &format!("{name}.head"), c, cfg.num_classes, 1);
        Ok(Self { cfg, blocks, head })
    }

    /// Side length multiplier from the coarsest pyramid level to the logits.
    pub fn upscale(&self) -> usize {
        Dsu::FACTOR.pow(self.blocks.len() as u32)
    }

    /// Mask logits `[N, num_classes, h4 * 2^blocks, w4 * 2^blocks]`.
    pub fn forward<T: Scalar>(&self, p: &Binding<T>, pyr: &FeaturePyramid<T>) -> Result<Var<T>> {
        if pyr.channels() != self.cfg.channels {
            return Err(TensorError::ShapeMismatch {
                op: "decoder",
                detail: format!("pyramid has {} channels, decoder expects {}", pyr.channels(), self.cfg.channels),
            });
        }
        let (fh, fw) = pyr.finest();
        let mut x = pyr.levels[3].clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let (h, w) = (x.shape()[2], x.shape()[3]);
            if h > fh || w > fw {
                log::warn!("refine block {i}: resampling target {h}x{w} exceeds finest level {fh}x{fw}; levels are interpolated up");
            }
            let refined = block.msgrn.forward(p, pyr, &x)?;
            x = block.dsu.forward(p, &refined)?;
        }
        self.head.forward(p, &x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use baris_core::rng::{stream, uniform};
    use baris_core::{Tape, Tensor};

    fn pyramid(tape: &Tape<f64>, seed: u64, n: usize, c: usize, side: usize) -> FeaturePyramid<f64> {
        let mut rng = stream(seed, "pyramid");
        FeaturePyramid::new(std::array::from_fn(|k| {
            tape.constant(uniform(&mut rng, &[n, c, side >> k, side >> k], -1.0, 1.0))
        }))
        .unwrap()
    }

    #[test]
    fn pyramid_must_halve() {
        let t = Tape::<f32>::new();
        let lv = |s: usize| t.constant(Tensor::zeros(&[1, 4, s, s]));
        assert!(FeaturePyramid::new([lv(16), lv(8), lv(4), lv(2)]).is_ok());
        assert!(FeaturePyramid::new([lv(16), lv(8), lv(4), lv(3)]).is_err());
        let wrong_c = t.constant(Tensor::zeros(&[1, 5, 8, 8]));
        assert!(FeaturePyramid::new([lv(16), wrong_c, lv(4), lv(2)]).is_err());
    }

    #[test]
    fn doubling_law() {
        for blocks in 1..=3 {
            let mut store = ParamStore::<f64>::new();
            let mut cfg = DecoderConfig::new(4, 1);
            cfg.num_refine_blocks = blocks;
            let dec = Decoder::new(&mut store, &mut stream(1, "init"), "dec", cfg).unwrap();
            let tape = Tape::new();
            let pyr = pyramid(&tape, 2, 1, 4, 32);
            let out = dec.forward(&store.bind(&tape), &pyr).unwrap();
            assert_eq!(out.shape(), &[1, 1, 4 << blocks, 4 << blocks]);
        }
    }

    #[test]
    fn dsu_with_dirac_kernels_is_shuffled_pointwise() {
        let mut store = ParamStore::<f64>::new();
        let dsu = Dsu::new(&mut store, &mut stream(3, "init"), "dsu", 8);
        for conv in &dsu.depthwise {
            let shape = store.value(conv.weight).shape().to_vec();
            let k = shape[2];
            store.set(conv.weight, Tensor::from_fn(&shape, |i| if i[2] == k / 2 && i[3] == k / 2 { 1.0 } else { 0.0 })).unwrap();
            store.set(conv.bias.unwrap(), Tensor::zeros(&[8])).unwrap();
        }
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(uniform(&mut stream(4, "x"), &[1, 8, 4, 4], -1.0, 1.0));
        let got = dsu.forward(&p, &x).unwrap();
        assert_eq!(got.shape(), &[1, 8, 8, 8]);
        let want = ops::pixel_shuffle(&dsu.expand.forward(&p, &x).unwrap(), 2).unwrap();
        assert!(got.value().sub(want.value()).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn silenced_attention_leaves_the_residual() {
        let mut store = ParamStore::<f64>::new();
        let m = Msgrn::new(&mut store, &mut stream(5, "init"), "m", 4, 2);
        for id in [m.value.weight, m.value.bias, m.ffn_out.weight, m.ffn_out.bias] {
            let shape = store.value(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let tape = Tape::new();
        let p = store.bind(&tape);
        let pyr = pyramid(&tape, 6, 2, 4, 16);
        let out = m.forward(&p, &pyr, &pyr.levels[3]).unwrap();
        let x4 = m.stage[3].forward(&p, &pyr.levels[3]).unwrap();
        assert!(out.value().bit_eq(x4.value()));
    }

    #[test]
    fn saturated_gate_reduces_to_ffn_of_zero() {
        let mut store = ParamStore::<f64>::new();
        let m = Msgrn::new(&mut store, &mut stream(7, "init"), "m", 4, 2);
        store.set(m.gate.pointwise.bias.unwrap(), Tensor::full(&[4], -30.0)).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let pyr = pyramid(&tape, 8, 1, 4, 16);
        let f4 = &pyr.levels[3];
        let out = m.forward(&p, &pyr, f4).unwrap();
        let x4 = m.stage[3].forward(&p, f4).unwrap();
        let ffn0 = m.ffn(&p, &tape.constant(Tensor::zeros(f4.shape()))).unwrap();
        let resid = out.value().sub(ffn0.value()).unwrap().sub(x4.value()).unwrap();
        assert!(resid.norm() < 1e-5 * x4.value().norm(), "{}", resid.norm());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut store = ParamStore::<f32>::new();
        let dec = Decoder::new(&mut store, &mut stream(9, "init"), "dec", DecoderConfig::new(4, 1)).unwrap();
        let run = || {
            let tape = Tape::new();
            let mut rng = stream(10, "x");
            let pyr = FeaturePyramid::new(std::array::from_fn(|k| tape.constant(uniform(&mut rng, &[1, 4, 8 >> k, 8 >> k], -1.0, 1.0)))).unwrap();
            dec.forward(&store.bind(&tape), &pyr).unwrap().value().clone()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.shape(), &[1, 1, 8, 8]);
        assert!(a.bit_eq(&b));
    }
}
