use crate::error::{shape_err, Result};
use crate::scalar::{lit, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn unary<T: Scalar>(
    op: &'static str,
    x: &Var<T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + 'static,
) -> Result<Var<T>> {
    let out = x.value().map(f);
    let xv = x.value().clone();
    let yv = out.clone();
    Tape::record(
        op,
        out,
        &[x],
        Box::new(move |g, _| {
            let mut gx = Tensor::zeros(g.shape());
            for (((o, &gi), &xi), &yi) in gx
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(xv.data())
                .zip(yv.data())
            {
                *o = gi * df(xi, yi);
            }
            vec![Some(gx)]
        }),
    )
}

pub fn add<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let out = a.value().zip_map(b.value(), "add", |x, y| x + y)?;
    Tape::record("add", out, &[a, b], Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]))
}

pub fn sub<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let out = a.value().zip_map(b.value(), "sub", |x, y| x - y)?;
    Tape::record(
        "sub",
        out,
        &[a, b],
        Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
    )
}

/// Hadamard product of two equally shaped tensors.
pub fn mul<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let out = a.value().zip_map(b.value(), "hadamard", |x, y| x * y)?;
    let av = a.value().clone();
    let bv = b.value().clone();
    Tape::record(
        "hadamard",
        out,
        &[a, b],
        Box::new(move |g, needs| {
            let ga = needs[0].then(|| g.zip_map(&bv, "hadamard", |x, y| x * y).unwrap());
            let gb = needs[1].then(|| g.zip_map(&av, "hadamard", |x, y| x * y).unwrap());
            vec![ga, gb]
        }),
    )
}

pub fn scale<T: Scalar>(x: &Var<T>, s: T) -> Result<Var<T>> {
    let out = x.value().scale(s);
    Tape::record("scale", out, &[x], Box::new(move |g, _| vec![Some(g.scale(s))]))
}

pub fn add_scalar<T: Scalar>(x: &Var<T>, s: T) -> Result<Var<T>> {
    let out = x.value().map(|v| v + s);
    Tape::record("add_scalar", out, &[x], Box::new(|g, _| vec![Some(g.clone())]))
}

pub fn relu<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    unary(
        "relu",
        x,
        |v| if v > T::zero() { v } else { T::zero() },
        |xi, _| if xi > T::zero() { T::one() } else { T::zero() },
    )
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    unary("sigmoid", x, sigmoid_scalar, |_, y| y * (T::one() - y))
}

/// Exact GELU, `x * Phi(x)` with the Gaussian CDF written through erf.
pub fn gelu<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    let half: T = lit(0.5);
    let inv_sqrt2: T = lit(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi: T = lit(0.398_942_280_401_432_7);
    unary(
        "gelu",
        x,
        move |v| half * v * (T::one() + (v * inv_sqrt2).erf()),
        move |v, _| {
            let cdf = half * (T::one() + (v * inv_sqrt2).erf());
            let pdf = inv_sqrt_2pi * (-half * v * v).exp();
            cdf + v * pdf
        },
    )
}

/// Sum of all elements, as a one-element tensor.
pub fn sum<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    let out = Tensor::scalar(x.value().sum());
    let shape = x.shape().to_vec();
    Tape::record(
        "sum",
        out,
        &[x],
        Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
    )
}

pub fn mean<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    let n = T::from_usize(x.value().numel()).expect("count fits");
    let out = Tensor::scalar(x.value().sum() / n);
    let shape = x.shape().to_vec();
    Tape::record(
        "mean",
        out,
        &[x],
        Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item() / n))]),
    )
}

/// Multiplies `[N,C,H,W]` by per-sample channel weights `[N,C,1,1]`.
pub fn mul_channels<T: Scalar>(x: &Var<T>, s: &Var<T>) -> Result<Var<T>> {
    let [n, c, h, w] = x.value().dims4("mul_channels")?;
    if s.shape() != [n, c, 1, 1] {
        return Err(shape_err(
            "mul_channels",
            format!("weights {:?} do not match input {:?}", s.shape(), x.shape()),
        ));
    }
    let hw = h * w;
    let xv = x.value().clone();
    let sv = s.value().clone();
    let mut out = vec![T::zero(); xv.numel()];
    for (plane, (o, xi)) in out.chunks_mut(hw).zip(xv.data().chunks(hw)).enumerate() {
        let k = sv.data()[plane];
        for (oo, &xx) in o.iter_mut().zip(xi) {
            *oo = xx * k;
        }
    }
    let out = Tensor::new(x.shape(), out)?;
    Tape::record(
        "mul_channels",
        out,
        &[x, s],
        Box::new(move |g, needs| {
            let gx = needs[0].then(|| {
                let mut d = vec![T::zero(); g.numel()];
                for (plane, (o, gi)) in d.chunks_mut(hw).zip(g.data().chunks(hw)).enumerate() {
                    let k = sv.data()[plane];
                    for (oo, &gg) in o.iter_mut().zip(gi) {
                        *oo = gg * k;
                    }
                }
                Tensor::from_parts(g.shape().to_vec(), d)
            });
            let gs = needs[1].then(|| {
                let d: Vec<T> = g
                    .data()
                    .chunks(hw)
                    .zip(xv.data().chunks(hw))
                    .map(|(gi, xi)| gi.iter().zip(xi).map(|(&a, &b)| a * b).sum())
                    .collect();
                Tensor::from_parts(vec![n, c, 1, 1], d)
            });
            vec![gx, gs]
        }),
    )
}

/// Multiplies a channels-last tensor `[..., C]` by a vector `[C]`.
pub fn mul_last<T: Scalar>(x: &Var<T>, v: &Var<T>) -> Result<Var<T>> {
    let c = *x.shape().last().expect("rank >= 1");
    if v.shape() != [c] {
        return Err(shape_err(
            "mul_last",
            format!("scale {:?} does not match trailing dim {c}", v.shape()),
        ));
    }
    let xv = x.value().clone();
    let vv = v.value().clone();
    let out: Vec<T> = xv
        .data()
        .chunks(c)
        .flat_map(|row| row.iter().zip(vv.data()).map(|(&a, &b)| a * b))
        .collect();
    let out = Tensor::new(x.shape(), out)?;
    Tape::record(
        "mul_last",
        out,
        &[x, v],
        Box::new(move |g, needs| {
            let gx = needs[0].then(|| {
                let d: Vec<T> = g
                    .data()
                    .chunks(c)
                    .flat_map(|row| row.iter().zip(vv.data()).map(|(&a, &b)| a * b))
                    .collect();
                Tensor::from_parts(g.shape().to_vec(), d)
            });
            let gv = needs[1].then(|| {
                let mut d = vec![T::zero(); c];
                for (gr, xr) in g.data().chunks(c).zip(xv.data().chunks(c)) {
                    for ((o, &a), &b) in d.iter_mut().zip(gr).zip(xr) {
                        *o += a * b;
                    }
                }
                Tensor::from_parts(vec![c], d)
            });
            vec![gx, gv]
        }),
    )
}
