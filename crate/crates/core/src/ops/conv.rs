use crate::error::{arg_err, shape_err, Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Stride, per-axis zero padding and channel groups of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Conv2dSpec {
    /// Stride 1, padding that keeps the spatial size for a `kh x kw` kernel.
    pub fn same(kh: usize, kw: usize) -> Self {
        Self {
            stride: 1,
            padding: (kh / 2, kw / 2),
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: (0, 0),
            groups: 1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    cg: usize,
    og: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    groups: usize,
}

impl Geom {
    fn k(&self) -> usize {
        self.cg * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }
}

fn geometry(x: &[usize], wt: &[usize], bias: Option<&[usize]>, spec: Conv2dSpec) -> Result<Geom> {
    const OP: &str = "conv2d";
    let &[n, c, h, w] = x else {
        return Err(shape_err(OP, format!("input must be NCHW, got {x:?}")));
    };
    let &[o, cg, kh, kw] = wt else {
        return Err(shape_err(OP, format!("weight must be [O, C/groups, kH, kW], got {wt:?}")));
    };
    let groups = spec.groups;
    if groups == 0 || c % groups != 0 {
        return Err(TensorError::NotDivisible { op: OP, dim: "input channels", value: c, divisor: groups });
    }
    if o % groups != 0 {
        return Err(TensorError::NotDivisible { op: OP, dim: "output channels", value: o, divisor: groups });
    }
    if cg != c / groups {
        return Err(shape_err(
            OP,
            format!("weight dim 1 is {cg}, expected C/groups = {}", c / groups),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(arg_err(OP, format!("kernel {kh}x{kw} must have odd sides")));
    }
    if spec.stride == 0 {
        return Err(arg_err(OP, "stride must be >= 1"));
    }
    let (ph, pw) = spec.padding;
    if h + 2 * ph < kh {
        return Err(shape_err(OP, format!("height {h} (+2*{ph} padding) smaller than kernel {kh}")));
    }
    if w + 2 * pw < kw {
        return Err(shape_err(OP, format!("width {w} (+2*{pw} padding) smaller than kernel {kw}")));
    }
    if let Some(b) = bias {
        if b != [o] {
            return Err(shape_err(OP, format!("bias {b:?} must be [{o}]")));
        }
    }
    Ok(Geom {
        n,
        c,
        h,
        w,
        o,
        cg,
        og: o / groups,
        kh,
        kw,
        oh: (h + 2 * ph - kh) / spec.stride + 1,
        ow: (w + 2 * pw - kw) / spec.stride + 1,
        stride: spec.stride,
        ph,
        pw,
        groups,
    })
}

/// Input pixel read by output position `out` at kernel tap `k`, if inside.
#[inline]
fn src(out: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    let i = (out * stride + k).checked_sub(pad)?;
    (i < len).then_some(i)
}

/// `[cg*kh*kw, oh*ow]` patch matrix for one sample and one group.
fn im2col<T: Scalar>(x: &[T], g: &Geom) -> Vec<T> {
    let p = g.p();
    let mut col = vec![T::zero(); g.k() * p];
    for ci in 0..g.cg {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut col[((ci * g.kh + ki) * g.kw + kj) * p..][..p];
                for oy in 0..g.oh {
                    let Some(iy) = src(oy, ki, g.stride, g.ph, g.h) else { continue };
                    for ox in 0..g.ow {
                        if let Some(ix) = src(ox, kj, g.stride, g.pw, g.w) {
                            row[oy * g.ow + ox] = plane[iy * g.w + ix];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Scalar>(col: &[T], g: &Geom, dx: &mut [T]) {
    let p = g.p();
    for ci in 0..g.cg {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &col[((ci * g.kh + ki) * g.kw + kj) * p..][..p];
                for oy in 0..g.oh {
                    let Some(iy) = src(oy, ki, g.stride, g.ph, g.h) else { continue };
                    for ox in 0..g.ow {
                        if let Some(ix) = src(ox, kj, g.stride, g.pw, g.w) {
                            plane[iy * g.w + ix] += row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// out[m x n] += a[m x k] * b[k x n]
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o += aik * bv;
            }
        }
    }
}

/// out[m x k] += a[m x n] * b[k x n]^T
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] += arow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<T>();
        }
    }
}

/// out[k x n] += a[m x k]^T * b[m x n]
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for j in 0..k {
            let aij = a[i * k + j];
            if aij == T::zero() {
                continue;
            }
            for (o, &bv) in out[j * n..(j + 1) * n].iter_mut().zip(brow) {
                *o += aij * bv;
            }
        }
    }
}

fn forward<T: Scalar>(x: &Tensor<T>, wt: &Tensor<T>, bias: Option<&Tensor<T>>, g: &Geom) -> Tensor<T> {
    let (k, p) = (g.k(), g.p());
    let mut out = vec![T::zero(); g.n * g.o * p];
    for ni in 0..g.n {
        for gi in 0..g.groups {
            let xs = &x.data()[(ni * g.c + gi * g.cg) * g.h * g.w..][..g.cg * g.h * g.w];
            let col = im2col(xs, g);
            let wg = &wt.data()[gi * g.og * k..(gi + 1) * g.og * k];
            let og = &mut out[(ni * g.o + gi * g.og) * p..][..g.og * p];
            if let Some(b) = bias {
                for (oi, row) in og.chunks_mut(p).enumerate() {
                    row.fill(b.data()[gi * g.og + oi]);
                }
            }
            gemm_nn(wg, &col, og, g.og, k, p);
        }
    }
    Tensor::from_parts(vec![g.n, g.o, g.oh, g.ow], out)
}

/// Grouped 2-D cross-correlation. `groups == C` with a `[C,1,kH,kW]`
/// weight is a depthwise convolution.
pub fn conv2d<T: Scalar>(
    x: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
    spec: Conv2dSpec,
) -> Result<Var<T>> {
    let g = geometry(x.shape(), weight.shape(), bias.map(|b| b.shape()), spec)?;
    let out = forward(x.value(), weight.value(), bias.map(|b| b.value()), &g);
    let xv = x.value().clone();
    let wv = weight.value().clone();
    let backward = Box::new(move |grad: &Tensor<T>, needs: &[bool]| {
        let (k, p) = (g.k(), g.p());
        let mut dx = needs[0].then(|| vec![T::zero(); xv.numel()]);
        let mut dw = needs[1].then(|| vec![T::zero(); wv.numel()]);
        for ni in 0..g.n {
            for gi in 0..g.groups {
                let gg = &grad.data()[(ni * g.o + gi * g.og) * p..][..g.og * p];
                let wg = &wv.data()[gi * g.og * k..(gi + 1) * g.og * k];
                if let Some(dw) = dw.as_mut() {
                    let xs = &xv.data()[(ni * g.c + gi * g.cg) * g.h * g.w..][..g.cg * g.h * g.w];
                    let col = im2col(xs, &g);
                    gemm_nt(gg, &col, &mut dw[gi * g.og * k..(gi + 1) * g.og * k], g.og, k, p);
                }
                if let Some(dx) = dx.as_mut() {
                    let mut dcol = vec![T::zero(); k * p];
                    gemm_tn(wg, gg, &mut dcol, g.og, k, p);
                    let dxs = &mut dx[(ni * g.c + gi * g.cg) * g.h * g.w..][..g.cg * g.h * g.w];
                    col2im(&dcol, &g, dxs);
                }
            }
        }
        let mut grads = vec![
            dx.map(|d| Tensor::from_parts(xv.shape().to_vec(), d)),
            dw.map(|d| Tensor::from_parts(wv.shape().to_vec(), d)),
        ];
        if needs.len() == 3 {
            grads.push(needs[2].then(|| {
                let mut db = vec![T::zero(); g.o];
                for (i, row) in grad.data().chunks(p).enumerate() {
                    db[i % g.o] += row.iter().copied().sum::<T>();
                }
                Tensor::from_parts(vec![g.o], db)
            }));
        }
        grads
    });
    match bias {
        Some(b) => Tape::record("conv2d", out, &[x, weight, b], backward),
        None => Tape::record("conv2d", out, &[x, weight], backward),
    }
}
