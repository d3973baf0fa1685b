//! Finite-difference checks for every differentiable primitive.
//!
//! Each check reduces the op output to a scalar with a fixed random
//! projection `sum(r * (y - y0))` and compares tape gradients with central
//! differences. Inputs that feed kinks (ReLU, max pooling) are drawn away
//! from the kink so the finite-difference stencil never straddles one.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::ops::{self, Conv2dSpec, RoiBox};
use crate::rng::{stream, uniform, StreamRng};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Coordinates whose gradient is nonzero but below this magnitude are
/// ill-conditioned for a relative comparison: with outputs of order one,
/// rounding and curvature put the central difference off by about 1e-10,
/// so a 1e-4 relative match cannot be resolved. Inputs with such a
/// coordinate are redrawn, as inputs near kinks are.
pub const CONDITION_FLOOR: f64 = 1e-6;
/// Draws tried before a check runs on the last input regardless.
pub const MAX_DRAWS: usize = 8;

/// Tolerance for ops that are linear in the checked input.
pub const LINEAR_TOL: f64 = 1e-10;
/// Tolerance for everything else.
pub const NONLINEAR_TOL: f64 = 1e-4;
/// Relative step for nonlinear checks.
pub const EPS: f64 = 1e-5;
/// Relative step for linear checks; central differences are exact for
/// linear maps, so a wide step only reduces cancellation error.
pub const LINEAR_EPS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Gradients at the worst coordinate.
    pub analytic: f64,
    pub numeric: f64,
    /// Inputs drawn before a well-conditioned one was found.
    pub draws: usize,
}

impl SuiteCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// `sum(r * (y - y0))` with `r` and `y0` constants on `y`'s tape.
///
/// Subtracting the unperturbed output keeps the reduced value near zero, so
/// its own rounding does not swamp the central difference.
pub fn project(y: &Var<f64>, r: &Tensor<f64>, y0: &Tensor<f64>) -> Result<Var<f64>> {
    let t = y.tape();
    let centered = ops::sub(y, &t.constant(y0.clone()))?;
    ops::sum(&ops::mul(&centered, &t.constant(r.clone()))?)
}

/// Values at least `margin` away from zero, random sign.
pub fn off_zero(rng: &mut impl Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(margin..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced `gap` apart in random order, so no two entries
/// of a pooling window are within a finite-difference step of each other.
pub fn distinct(rng: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).expect("length matches")
}

fn eval<F>(x: &Tensor<f64>, f: &F) -> Result<Tensor<f64>>
where
    F: Fn(&Var<f64>) -> Result<Var<f64>>,
{
    let tape = crate::tape::Tape::new();
    Ok(f(&tape.constant(x.clone()))?.value().clone())
}

pub struct CheckRunner {
    pub rng: StreamRng,
    pub results: Vec<SuiteCheck>,
}

impl CheckRunner {
    pub fn new(seed: u64, purpose: &str) -> Self {
        Self {
            rng: stream(seed, purpose),
            results: Vec::new(),
        }
    }

    pub fn rand(&mut self, shape: &[usize]) -> Tensor<f64> {
        uniform(&mut self.rng, shape, -1.0, 1.0)
    }

    /// Checks `x -> sum(r * f(x))` for a random projection `r`.
    pub fn check<F>(&mut self, name: &str, x: Tensor<f64>, linear: bool, f: F) -> Result<()>
    where
        F: Fn(&Var<f64>) -> Result<Var<f64>>,
    {
        let y0 = eval(&x, &f)?;
        let r = uniform(&mut self.rng, y0.shape(), 0.5, 1.5);
        self.check_projected(name, x, &r, &y0, linear, 1, f)
    }

    #[allow(clippy::too_many_arguments)]
    fn check_projected<F>(
        &mut self,
        name: &str,
        x: Tensor<f64>,
        r: &Tensor<f64>,
        y0: &Tensor<f64>,
        linear: bool,
        draws: usize,
        f: F,
    ) -> Result<()>
    where
        F: Fn(&Var<f64>) -> Result<Var<f64>>,
    {
        let (eps, tolerance) = if linear { (LINEAR_EPS, LINEAR_TOL) } else { (EPS, NONLINEAR_TOL) };
        let report = grad_check(|v| project(&f(v)?, r, y0), &x, eps)?;
        self.results.push(SuiteCheck {
            name: name.to_string(),
            max_rel_error: report.max_rel_error,
            tolerance,
            analytic: report.analytic,
            numeric: report.numeric,
            draws,
        });
        Ok(())
    }

    /// Like [`Self::check`], but draws the input with `draw(rng, attempt)`
    /// and redraws while some coordinate of the projected gradient is
    /// nonzero yet below [`CONDITION_FLOOR`]. The projection is fixed first
    /// so the screened gradient is the one that gets checked.
    pub fn check_drawn<D, F>(&mut self, name: &str, mut draw: D, f: F) -> Result<()>
    where
        D: FnMut(&mut StreamRng, usize) -> Tensor<f64>,
        F: Fn(&Var<f64>) -> Result<Var<f64>>,
    {
        let mut x = draw(&mut self.rng, 0);
        let shape = eval(&x, &f)?.shape().to_vec();
        let r = uniform(&mut self.rng, &shape, 0.5, 1.5);
        let mut draws = 1;
        loop {
            let tape = crate::tape::Tape::new();
            let v = tape.leaf(x.clone(), true);
            let y = f(&v)?;
            let y0 = y.value().clone();
            project(&y, &r, &y0)?.backward()?;
            let g = v.grad().unwrap_or_else(|| Tensor::zeros(x.shape()));
            let conditioned = g.data().iter().all(|&gi| gi == 0.0 || gi.abs() >= CONDITION_FLOOR);
            if conditioned || draws == MAX_DRAWS {
                return self.check_projected(name, x, &r, &y0, false, draws, f);
            }
            x = draw(&mut self.rng, draws);
            draws += 1;
        }
    }

    /// Checks a function that already returns a scalar.
    pub fn check_scalar<F>(&mut self, name: &str, x: Tensor<f64>, f: F) -> Result<()>
    where
        F: Fn(&Var<f64>) -> Result<Var<f64>>,
    {
        let report = grad_check(f, &x, EPS)?;
        self.results.push(SuiteCheck {
            name: name.to_string(),
            max_rel_error: report.max_rel_error,
            tolerance: NONLINEAR_TOL,
            analytic: report.analytic,
            numeric: report.numeric,
            draws: 1,
        });
        Ok(())
    }
}

/// Gradient checks of the tensor primitives for one seed.
pub fn tensor_suite(seed: u64) -> Result<Vec<SuiteCheck>> {
    let mut c = CheckRunner::new(seed, "gradcheck/tensor");

    // Linear in the checked input.
    let other = c.rand(&[2, 3, 4]);
    let x = c.rand(&[2, 3, 4]);
    c.check("add", x, true, |x| ops::add(x, &x.tape().constant(other.clone())))?;
    let x = c.rand(&[2, 3, 4]);
    c.check("sub", x, true, |x| ops::sub(&x.tape().constant(other.clone()), x))?;
    let x = c.rand(&[5]);
    c.check("scale", x, true, |x| ops::scale(x, -1.75))?;
    let w = c.rand(&[3, 4]);
    let b = c.rand(&[3]);
    let x = c.rand(&[2, 2, 4]);
    c.check("linear/input", x, true, |x| {
        let t = x.tape();
        ops::linear(x, &t.constant(w.clone()), Some(&t.constant(b.clone())))
    })?;
    let xin = c.rand(&[2, 2, 4]);
    c.check("linear/weight", w.clone(), true, |wv| {
        let t = wv.tape();
        ops::linear(&t.constant(xin.clone()), wv, Some(&t.constant(b.clone())))
    })?;
    c.check("linear/bias", b.clone(), true, |bv| {
        let t = bv.tape();
        ops::linear(&t.constant(xin.clone()), &t.constant(w.clone()), Some(bv))
    })?;
    let m = c.rand(&[4, 5]);
    let x = c.rand(&[3, 4]);
    c.check("matmul/left", x, true, |x| ops::matmul_last(x, &x.tape().constant(m.clone())))?;
    let left = c.rand(&[3, 4]);
    c.check("matmul/right", m.clone(), true, |mv| ops::matmul_last(&mv.tape().constant(left.clone()), mv))?;

    let kw = c.rand(&[4, 2, 3, 3]);
    let kb = c.rand(&[4]);
    let spec = Conv2dSpec { stride: 2, padding: (1, 1), groups: 2 };
    let x = c.rand(&[2, 4, 5, 6]);
    c.check("conv2d/input", x, true, |x| {
        let t = x.tape();
        ops::conv2d(x, &t.constant(kw.clone()), Some(&t.constant(kb.clone())), spec)
    })?;
    let cx = c.rand(&[2, 4, 5, 6]);
    c.check("conv2d/weight", kw.clone(), true, |wv| {
        let t = wv.tape();
        ops::conv2d(&t.constant(cx.clone()), wv, Some(&t.constant(kb.clone())), spec)
    })?;
    c.check("conv2d/bias", kb.clone(), true, |bv| {
        let t = bv.tape();
        ops::conv2d(&t.constant(cx.clone()), &t.constant(kw.clone()), Some(bv), spec)
    })?;
    let dw = c.rand(&[3, 1, 1, 5]);
    let x = c.rand(&[1, 3, 4, 6]);
    c.check("conv2d/depthwise-1x5", x, true, |x| {
        ops::conv2d(x, &x.tape().constant(dw.clone()), None, Conv2dSpec::same(1, 5).with_groups(3))
    })?;

    let cat_b = c.rand(&[1, 3, 4, 4]);
    let x = c.rand(&[1, 2, 4, 4]);
    c.check("concat", x, true, |x| {
        ops::concat(&[x, &x.tape().constant(cat_b.clone())], 1)
    })?;
    let avg_b = c.rand(&[2, 3]);
    let x = c.rand(&[2, 3]);
    c.check("average", x, true, |x| {
        let b = x.tape().constant(avg_b.clone());
        ops::average(&[x, &b, x])
    })?;
    let x = c.rand(&[2, 8, 2, 3]);
    c.check("pixel_shuffle", x, true, |x| ops::pixel_shuffle(x, 2))?;
    let x = c.rand(&[1, 2, 3, 3]);
    c.check("nearest_upsample", x, true, |x| ops::nearest_upsample(x, 2))?;
    let x = c.rand(&[1, 2, 4, 4]);
    c.check("avg_pool2d", x, true, |x| ops::avg_pool2d(x, 2))?;
    let x = c.rand(&[2, 3, 3, 4]);
    c.check("global_avg_pool", x, true, ops::global_avg_pool)?;
    let x = c.rand(&[2, 3, 4, 5]);
    c.check("permute", x, true, ops::to_channels_last)?;
    let x = c.rand(&[2, 6]);
    c.check("reshape", x, true, |x| ops::reshape(x, &[3, 4]))?;
    let x = c.rand(&[1, 2, 4, 5]);
    c.check("roi_align/full-2x", x, true, |x| ops::roi_align(x, RoiBox::FULL, 8, 10))?;
    let part = RoiBox { x0: 0.1, y0: 0.2, x1: 0.8, y1: 0.9 };
    let x = c.rand(&[1, 2, 6, 6]);
    c.check("roi_align/partial", x, true, |x| ops::roi_align(x, part, 3, 4))?;

    // Nonlinear.
    let hb = c.rand(&[3, 4]);
    let x = c.rand(&[3, 4]);
    c.check("hadamard", x, false, |x| ops::mul(x, &x.tape().constant(hb.clone())))?;
    let x = c.rand(&[3, 4]);
    c.check("hadamard/self", x, false, |x| ops::mul(x, x))?;
    let relu_x = off_zero(&mut c.rng, &[2, 5], 0.05);
    c.check("relu", relu_x, false, ops::relu)?;
    let x = c.rand(&[2, 5]).scale(3.0);
    c.check("gelu", x, false, ops::gelu)?;
    let x = c.rand(&[2, 5]).scale(4.0);
    c.check("sigmoid", x, false, ops::sigmoid)?;
    let x = c.rand(&[3, 5]).scale(2.0);
    c.check("softmax/last", x, false, |x| ops::softmax(x, 1))?;
    let x = c.rand(&[2, 4, 3]).scale(2.0);
    c.check("softmax/middle", x, false, |x| ops::softmax(x, 1))?;
    let (gamma, beta) = (c.rand(&[6]), c.rand(&[6]));
    let x = c.rand(&[2, 3, 6]);
    c.check("layer_norm/input", x, false, |x| {
        let t = x.tape();
        ops::layer_norm(x, &t.constant(gamma.clone()), &t.constant(beta.clone()), 1e-5)
    })?;
    let ln_x = c.rand(&[2, 3, 6]);
    c.check("layer_norm/gamma", gamma.clone(), true, |g| {
        let t = g.tape();
        ops::layer_norm(&t.constant(ln_x.clone()), g, &t.constant(beta.clone()), 1e-5)
    })?;
    let mp = distinct(&mut c.rng, &[1, 2, 4, 4], 0.05);
    c.check("max_pool2d", mp, false, |x| ops::max_pool2d(x, 2))?;
    let mpw = distinct(&mut c.rng, &[1, 2, 5, 5], 0.05);
    c.check("max_pool2d/3x3-s1-p1", mpw, false, |x| ops::max_pool2d_window(x, 3, 1, 1))?;
    let s = c.rand(&[2, 3, 1, 1]);
    let x = c.rand(&[2, 3, 2, 2]);
    c.check("mul_channels/input", x, false, |x| {
        ops::mul_channels(x, &x.tape().constant(s.clone()))
    })?;
    let mcx = c.rand(&[2, 3, 2, 2]);
    c.check("mul_channels/weights", s.clone(), false, |sv| ops::mul_channels(&sv.tape().constant(mcx.clone()), sv))?;
    let v = c.rand(&[4]);
    let x = c.rand(&[3, 4]);
    c.check("mul_last", x, false, |x| ops::mul_last(x, &x.tape().constant(v.clone())))?;
    let relu_w = c.rand(&[3, 2, 3, 3]);
    let x = c.rand(&[1, 2, 6, 6]);
    c.check("conv2d+relu", x, false, |x| {
        ops::relu(&ops::conv2d(x, &x.tape().constant(relu_w.clone()), None, Conv2dSpec::same(3, 3))?)
    })?;
    let target = Tensor::from_fn(&[2, 3], |i| ((i[0] + i[1]) % 2) as f64);
    let weight = uniform(&mut c.rng, &[2, 3], 0.5, 2.0);
    let x = c.rand(&[2, 3]).scale(3.0);
    c.check_scalar("bce_with_logits", x, |x| {
        ops::bce_with_logits(x, &target, Some(&weight))
    })?;
    let x = c.rand(&[7]);
    c.check_scalar("mean", x, ops::mean)?;

    Ok(c.results)
}
