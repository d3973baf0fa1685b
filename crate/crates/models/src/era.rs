//! Environmental robust adapter: a bottleneck residual module that
//! extracts multi-scale features, reweights channels, gates them with a
//! per-pixel mixture of learned environment embeddings, and projects back
//! through a zero-initialized layer so a fresh adapter is the identity.

use baris_core::layers::{Conv2d, LayerNorm, Linear};
use baris_core::ops;
use baris_core::rng::uniform;
use baris_core::{Binding, ParamId, ParamStore, ParamTag, Result, Scalar, Tensor, TensorError, Var};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct EraConfig {
    pub channels: usize,
    /// Bottleneck ratio; the adapter works at `channels / gamma`.
    pub gamma: usize,
    pub num_envs: usize,
    pub msfe_kernels: Vec<usize>,
    pub ca_reduction: usize,
}

impl EraConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: 2,
            num_envs: 16,
            msfe_kernels: vec![3, 5, 7],
            ca_reduction: 4,
        }
    }

    pub fn with_gamma(mut self, gamma: usize) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_envs(mut self, num_envs: usize) -> Self {
        self.num_envs = num_envs;
        self
    }

    pub fn bottleneck(&self) -> usize {
        self.channels / self.gamma
    }

    pub fn ca_hidden(&self) -> usize {
        (self.bottleneck() / self.ca_reduction).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(TensorError::InvalidArgument { op: "era config", detail });
        if self.gamma == 0 || self.ca_reduction == 0 {
            return bad(format!("gamma and ca_reduction must be positive: {self:?}"));
        }
        if !self.channels.is_multiple_of(self.gamma) || self.bottleneck() == 0 {
            return bad(format!("channels {} not divisible into a bottleneck by gamma {}", self.channels, self.gamma));
        }
        if self.num_envs == 0 {
            return bad("num_envs must be at least 1".into());
        }
        if let Some(k) = self.msfe_kernels.iter().find(|&&k| k % 2 == 0 || k == 0) {
            return bad(format!("msfe kernel sizes must be odd, got {k}"));
        }
        Ok(())
    }
}

/// Max-pool branch plus separable `j x 1 -> 1 x j` depthwise branches,
/// averaged and added back to the input.
#[derive(Clone, Debug)]
pub struct Msfe {
    pub pool_proj: Conv2d,
    pub branches: Vec<(Conv2d, Conv2d)>,
}

impl Msfe {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, c: usize, kernels: &[usize]) -> Self {
        let branches = kernels
            .iter()
            .map(|&j| {
                (
                    Conv2d::depthwise(store, rng, &format!("{name}.dw{j}x1"), c, j, 1),
                    Conv2d::depthwise(store, rng, &format!("{name}.dw1x{j}"), c, 1, j),
                )
            })
            .collect();
        Self {
            pool_proj: Conv2d::same(store, rng, &format!("{name}.pool_proj"), c, c, 1),
            branches,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &Binding<T>, x: &Var<T>) -> Result<Var<T>> {
        let mut outs = vec![self.pool_proj.forward(p, &ops::max_pool2d_window(x, 3, 1, 1)?)?];
        for (col, row) in &self.branches {
            outs.push(row.forward(p, &col.forward(p, x)?)?);
        }
        ops::add(&ops::average(&outs.iter().collect::<Vec<_>>())?, x)
    }
}

/// Squeeze-and-excite style channel reweighting.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub reduce: Conv2d,
    pub expand: Conv2d,
}

impl ChannelAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, c: usize, hidden: usize) -> Self {
        Self {
            reduce: Conv2d::same(store, rng, &format!("{name}.reduce"), c, hidden, 1),
            expand: Conv2d::same(store, rng, &format!("{name}.expand"), hidden, c, 1),
        }
    }

    /// Per-channel weights in (0, 1), shape `[N, C, 1, 1]`.
    pub fn weights<T: Scalar>(&self, p: &Binding<T>, x: &Var<T>) -> Result<Var<T>> {
        let s = self.expand.forward(p, &ops::relu(&self.reduce.forward(p, &ops::global_avg_pool(x)?)?)?)?;
        ops::sigmoid(&s)
    }

    pub fn forward<T: Scalar>(&self, p: &Binding<T>, x: &Var<T>) -> Result<Var<T>> {
        ops::mul_channels(x, &self.weights(p, x)?)
    }
}

/// `N_env` learned embeddings in the bottleneck space and the per-pixel
/// classifier that mixes them.
#[derive(Clone, Debug)]
pub struct EnvEmbeddings {
    pub table: ParamId,
    pub classifier: Linear,
}

impl EnvEmbeddings {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, c: usize, num_envs: usize) -> Self {
        let bound = 1.0 / (c as f64).sqrt();
        let table = store.add(format!("{name}.table"), uniform(rng, &[num_envs, c], -bound, bound), ParamTag::Weight);
        Self {
            table,
            classifier: Linear::new(store, rng, &format!("{name}.classifier"), c, num_envs),
        }
    }

    /// Softmax mixing weights per pixel, channels-last `[..., N_env]`.
    pub fn mixture<T: Scalar>(&self, p: &Binding<T>, x_last: &Var<T>) -> Result<Var<T>> {
        let logits = self.classifier.forward(p, x_last)?;
        let axis = logits.shape().len() - 1;
        ops::softmax(&logits, axis)
    }

    /// Mixed embedding per pixel, channels-last `[..., C']`.
    pub fn adapt<T: Scalar>(&self, p: &Binding<T>, x_last: &Var<T>) -> Result<Var<T>> {
        ops::matmul_last(&self.mixture(p, x_last)?, p.var(self.table))
    }
}

#[derive(Clone, Debug)]
pub struct Era {
    pub cfg: EraConfig,
    pub norm: LayerNorm,
    pub s1: ParamId,
    pub s2: ParamId,
    pub down: Linear,
    pub msfe: Msfe,
    pub ca: ChannelAttention,
    pub env: EnvEmbeddings,
    pub up: Linear,
}

impl Era {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, cfg: EraConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, cp) = (cfg.channels, cfg.bottleneck());
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), c),
            s1: store.add(format!("{name}.s1"), Tensor::ones(&[c]), ParamTag::Weight),
            s2: store.add(format!("{name}.s2"), Tensor::full(&[c], T::from_f64_lossy(1e-6)), ParamTag::Weight),
            down: Linear::new(store, rng, &format!("{name}.down"), c, cp),
            msfe: Msfe::new(store, rng, &format!("{name}.msfe"), cp, &cfg.msfe_kernels),
            ca: ChannelAttention::new(store, rng, &format!("{name}.ca"), cp, cfg.ca_hidden()),
            env: EnvEmbeddings::new(store, rng, &format!("{name}.env"), cp, cfg.num_envs),
            up: Linear::zeros(store, &format!("{name}.up"), cp, c),
            cfg,
        })
    }

    /// Bottleneck input `down(s1 * LN(F) + s2 * F)`, NCHW.
    pub fn project_down<T: Scalar>(&self, p: &Binding<T>, f: &Var<T>) -> Result<Var<T>> {
        let fl = ops::to_channels_last(f)?;
        let mixed = ops::add(
            &ops::mul_last(&self.norm.forward(p, &fl)?, p.var(self.s1))?,
            &ops::mul_last(&fl, p.var(self.s2))?,
        )?;
        ops::to_channels_first(&self.down.forward(p, &mixed)?)
    }

    /// Gated bottleneck features before the up-projection, channels-last.
    pub fn features<T: Scalar>(&self, p: &Binding<T>, f: &Var<T>) -> Result<Var<T>> {
        let fs = self.msfe.forward(p, &self.project_down(p, f)?)?;
        let fc = ops::to_channels_last(&self.ca.forward(p, &fs)?)?;
        let env = self.env.adapt(p, &fc)?;
        ops::gelu(&ops::mul(&fc, &ops::sigmoid(&env)?)?)
    }

    pub fn forward<T: Scalar>(&self, p: &Binding<T>, f: &Var<T>) -> Result<Var<T>> {
        let c = f.value().dims4("era")?[1];
        if c != self.cfg.channels {
            return Err(TensorError::ShapeMismatch {
                op: "era",
                detail: format!("input has {c} channels, adapter built for {}", self.cfg.channels),
            });
        }
        let delta = ops::to_channels_first(&self.up.forward(p, &self.features(p, f)?)?)?;
        ops::add(f, &delta)
    }
}

/// Closed-form parameter count of one adapter.
pub fn era_param_count(cfg: &EraConfig) -> usize {
    let (c, cp, n, h) = (cfg.channels, cfg.bottleneck(), cfg.num_envs, cfg.ca_hidden());
    let norm_and_scales = 4 * c;
    let projections = (c * cp + cp) + (cp * c + c);
    let msfe = (cp * cp + cp) + cfg.msfe_kernels.iter().map(|&j| 2 * (j * cp + cp)).sum::<usize>();
    let ca = (cp * h + h) + (h * cp + cp);
    let env = n * cp + (cp * n + n);
    norm_and_scales + projections + msfe + ca + env
}

#[cfg(test)]
mod tests {
    use super::*;
    use baris_core::rng::stream;
    use baris_core::Tape;

    fn fresh(cfg: EraConfig, seed: u64) -> (ParamStore<f64>, Era) {
        let mut store = ParamStore::new();
        let era = Era::new(&mut store, &mut stream(seed, "init"), "era", cfg).unwrap();
        (store, era)
    }

    fn zero(store: &mut ParamStore<f64>, id: ParamId) {
        let shape = store.value(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape)).unwrap();
    }

    #[test]
    fn up_projection_starts_at_zero() {
        let (store, era) = fresh(EraConfig::new(8), 1);
        for id in [era.up.weight, era.up.bias] {
            assert!(store.value(id).data().iter().all(|v| v.to_bits() == 0));
        }
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let (store, era) = fresh(EraConfig::new(8), 2);
        let tape = Tape::new();
        let x = uniform::<f64>(&mut stream(3, "x"), &[2, 8, 5, 7], -2.0, 2.0);
        let y = era.forward(&store.bind(&tape), &tape.constant(x.clone())).unwrap();
        assert!(y.value().bit_eq(&x));
    }

    #[test]
    fn config_validation() {
        assert!(EraConfig::new(8).with_gamma(3).validate().is_err());
        assert!(EraConfig::new(8).with_gamma(16).validate().is_err());
        assert!(EraConfig::new(8).with_envs(0).validate().is_err());
        assert!(EraConfig::new(8).with_gamma(8).validate().is_ok());
        assert_eq!(EraConfig::new(8).ca_hidden(), 1);
        assert_eq!(EraConfig::new(64).ca_hidden(), 8);
    }

    #[test]
    fn msfe_with_zero_branches_is_residual() {
        let (mut store, era) = fresh(EraConfig::new(16), 4);
        let m = &era.msfe;
        zero(&mut store, m.pool_proj.weight);
        zero(&mut store, m.pool_proj.bias.unwrap());
        for (a, b) in &m.branches {
            for conv in [a, b] {
                zero(&mut store, conv.weight);
                zero(&mut store, conv.bias.unwrap());
            }
        }
        let tape = Tape::new();
        let x = uniform::<f64>(&mut stream(5, "x"), &[1, 8, 5, 7], -1.0, 1.0);
        let y = m.forward(&store.bind(&tape), &tape.constant(x.clone())).unwrap();
        assert!(y.value().bit_eq(&x));
    }

    #[test]
    fn silent_attention_halves() {
        let (mut store, era) = fresh(EraConfig::new(16), 6);
        zero(&mut store, era.ca.expand.weight);
        zero(&mut store, era.ca.expand.bias.unwrap());
        let tape = Tape::new();
        let x = uniform::<f64>(&mut stream(7, "x"), &[2, 8, 3, 3], -1.0, 1.0);
        let y = era.ca.forward(&store.bind(&tape), &tape.constant(x.clone())).unwrap();
        assert!(y.value().bit_eq(&x.scale(0.5)));
    }

    #[test]
    fn attention_by_hand() {
        // Two channels, one hidden unit.
        let mut store = ParamStore::<f64>::new();
        let ca = ChannelAttention::new(&mut store, &mut stream(8, "init"), "ca", 2, 1);
        store.set(ca.reduce.weight, Tensor::from_f64(&[1, 2, 1, 1], &[1.0, -2.0]).unwrap()).unwrap();
        store.set(ca.reduce.bias.unwrap(), Tensor::from_f64(&[1], &[0.5]).unwrap()).unwrap();
        store.set(ca.expand.weight, Tensor::from_f64(&[2, 1, 1, 1], &[2.0, -1.0]).unwrap()).unwrap();
        store.set(ca.expand.bias.unwrap(), Tensor::from_f64(&[2], &[0.0, 1.0]).unwrap()).unwrap();
        // Channel means 2.5 and 0.25.
        let x = Tensor::from_f64(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 0.0, 0.5, 0.5, 0.0]).unwrap();
        let tape = Tape::new();
        let w = ca.weights(&store.bind(&tape), &tape.constant(x)).unwrap();
        // hidden = relu(2.5 - 0.5 + 0.5) = 2.5; s = (5.0, -1.5)
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let want = [sig(5.0), sig(-1.5)];
        for (g, w) in w.value().data().iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn single_environment_is_its_embedding() {
        let (store, era) = fresh(EraConfig::new(8).with_envs(1), 9);
        let tape = Tape::new();
        let x = tape.constant(uniform(&mut stream(10, "x"), &[2, 3, 3, 4], -3.0, 3.0));
        let adapted = era.env.adapt(&store.bind(&tape), &x).unwrap();
        let row = store.value(era.env.table).data().to_vec();
        for px in adapted.value().data().chunks(4) {
            assert_eq!(px, row.as_slice());
        }
    }

    #[test]
    fn zero_classifier_gives_mean_embedding() {
        let (mut store, era) = fresh(EraConfig::new(8).with_envs(5), 11);
        zero(&mut store, era.env.classifier.weight);
        zero(&mut store, era.env.classifier.bias);
        let table = store.value(era.env.table).clone();
        let mean: Vec<f64> = (0..4).map(|j| (0..5).map(|k| table.at(&[k, j])).sum::<f64>() / 5.0).collect();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(uniform(&mut stream(12, "x"), &[1, 2, 2, 4], -1.0, 1.0));
        for w in era.env.mixture(&p, &x).unwrap().value().data() {
            assert!((w - 0.2).abs() < 1e-15);
        }
        for px in era.env.adapt(&p, &x).unwrap().value().data().chunks(4) {
            for (a, b) in px.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn closed_form_count_matches_store() {
        for (c, gamma, envs) in [(8, 2, 16), (32, 4, 16), (64, 8, 3), (12, 3, 1)] {
            let mut store = ParamStore::<f32>::new();
            let cfg = EraConfig::new(c).with_gamma(gamma).with_envs(envs);
            Era::new(&mut store, &mut stream(0, "init"), "era", cfg.clone()).unwrap();
            let total: usize = store.entries().iter().map(|e| e.value.numel()).sum();
            assert_eq!(total, era_param_count(&cfg));
        }
    }
}
