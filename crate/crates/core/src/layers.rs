//! Parameterized building blocks on top of [`crate::ops`]. Layers only hold
//! [`ParamId`]s; values live in a [`ParamStore`] and are bound per tape.

use rand::Rng;

use crate::error::Result;
use crate::ops::{self, Conv2dSpec};
use crate::param::{Binding, ParamId, ParamStore, ParamTag};
use crate::rng::uniform;
use crate::scalar::{lit, Scalar};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Kaiming-uniform with `a = sqrt(5)`, i.e. `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
fn kaiming<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    uniform(rng, shape, -bound, bound)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        spec: Conv2dSpec,
        bias: bool,
    ) -> Self {
        let fan_in = cin / spec.groups * kernel.0 * kernel.1;
        let w = kaiming(rng, &[cout, cin / spec.groups, kernel.0, kernel.1], fan_in);
        let weight = store.add(format!("{name}.weight"), w, ParamTag::Weight);
        let bias = bias.then(|| store.add(format!("{name}.bias"), kaiming(rng, &[cout], fan_in), ParamTag::Bias));
        Self { weight, bias, spec }
    }

    /// Same-padded `k x k` convolution.
    pub fn same<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self::new(store, rng, name, cin, cout, (k, k), Conv2dSpec::same(k, k), true)
    }

    /// Depthwise convolution with a `kh x kw` kernel, shape-preserving.
    pub fn depthwise<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        kh: usize,
        kw: usize,
    ) -> Self {
        Self::new(store, rng, name, channels, channels, (kh, kw), Conv2dSpec::same(kh, kw).with_groups(channels), true)
    }

    pub fn forward<T: Scalar>(&self, p: &Binding<T>, x: &Var<T>) -> Result<Var<T>> {
        ops::conv2d(x, p.var(self.weight), self.bias.map(|b| p.var(b)), self.spec)
    }
}

/// Depthwise `k x k` followed by a pointwise `1 x 1` convolution.
#[derive(Clone, Debug)]
pub struct DsConv {
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
}

impl DsConv {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self {
            depthwise: Conv2d::depthwise(store, rng, &format!("{name}.dw"), cin, k, k),
            pointwise: Conv2d::same(store, rng, &format!("{name}.pw"), cin, cout, 1),
        }
    }

    pub fn forward<T: Scalar>(&self, p: &Binding<T>, x: &Var<T>) -> Result<Var<T>> {
        self.pointwise.forward(p, &self.depthwise.forward(p, x)?)
    }
}

/// Affine map over the trailing axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, cin: usize, cout: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), kaiming(rng, &[cout, cin], cin), ParamTag::Weight);
        let bias = store.add(format!("{name}.bias"), kaiming(rng, &[cout], cin), ParamTag::Bias);
        Self { weight, bias }
    }

    /// All-zero weight and bias.
    pub fn zeros<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[cout, cin]), ParamTag::Weight);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), ParamTag::Bias);
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, p: &Binding<T>, x: &Var<T>) -> Result<Var<T>> {
        ops::linear(x, p.var(self.weight), Some(p.var(self.bias)))
    }
}

/// Layer normalization over channels.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), ParamTag::Norm),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamTag::Norm),
            eps: 1e-5,
        }
    }

    /// Channels-last input `[..., C]`.
    pub fn forward<T: Scalar>(&self, p: &Binding<T>, x: &Var<T>) -> Result<Var<T>> {
        ops::layer_norm(x, p.var(self.gamma), p.var(self.beta), lit(self.eps))
    }

    /// NCHW input, normalized over C at every pixel.
    pub fn forward_nchw<T: Scalar>(&self, p: &Binding<T>, x: &Var<T>) -> Result<Var<T>> {
        ops::to_channels_first(&self.forward(p, &ops::to_channels_last(x)?)?)
    }
}
