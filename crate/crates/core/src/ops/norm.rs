use crate::error::{arg_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Layer normalization over the trailing (channel) axis followed by a
/// per-channel affine map.
pub fn layer_norm<T: Scalar>(x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: T) -> Result<Var<T>> {
    const OP: &str = "layer_norm";
    let c = *x.shape().last().ok_or_else(|| shape_err(OP, "rank-0 input"))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(
            OP,
            format!("gamma {:?} / beta {:?} must be [{c}]", gamma.shape(), beta.shape()),
        ));
    }
    if eps <= T::zero() {
        return Err(arg_err(OP, "eps must be positive"));
    }
    let cn = T::from_usize(c).expect("fits");
    let xd = x.value().data();
    let rows = xd.len() / c;
    let mut xhat = Vec::with_capacity(xd.len());
    let mut inv_std = Vec::with_capacity(rows);
    for row in xd.chunks(c) {
        let mu = row.iter().copied().sum::<T>() / cn;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / cn;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        xhat.extend(row.iter().map(|&v| (v - mu) * is));
    }
    let gd = gamma.value().data();
    let bd = beta.value().data();
    let out: Vec<T> = xhat
        .chunks(c)
        .flat_map(|row| row.iter().zip(gd).zip(bd).map(|((&v, &g), &b)| v * g + b))
        .collect();
    let gv = gamma.value().clone();
    let shape = x.shape().to_vec();
    Tape::record(
        OP,
        Tensor::new(&shape, out)?,
        &[x, gamma, beta],
        Box::new(move |g, needs| {
            let gd = g.data();
            let dx = needs[0].then(|| {
                let mut dx = Vec::with_capacity(gd.len());
                for ((grow, xrow), &is) in gd.chunks(c).zip(xhat.chunks(c)).zip(&inv_std) {
                    let dxhat: Vec<T> = grow.iter().zip(gv.data()).map(|(&a, &b)| a * b).collect();
                    let m1 = dxhat.iter().copied().sum::<T>() / cn;
                    let m2 = dxhat.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<T>() / cn;
                    dx.extend(dxhat.iter().zip(xrow).map(|(&d, &xh)| is * (d - m1 - xh * m2)));
                }
                Tensor::from_parts(shape.clone(), dx)
            });
            let dgamma = needs[1].then(|| {
                let mut d = vec![T::zero(); c];
                for (grow, xrow) in gd.chunks(c).zip(xhat.chunks(c)) {
                    for ((o, &a), &b) in d.iter_mut().zip(grow).zip(xrow) {
                        *o += a * b;
                    }
                }
                Tensor::from_parts(vec![c], d)
            });
            let dbeta = needs[2].then(|| {
                let mut d = vec![T::zero(); c];
                for grow in gd.chunks(c) {
                    for (o, &a) in d.iter_mut().zip(grow) {
                        *o += a;
                    }
                }
                Tensor::from_parts(vec![c], d)
            });
            vec![dx, dgamma, dbeta]
        }),
    )
}

/// (outer, axis length, inner) decomposition of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Softmax normalized along `axis`.
pub fn softmax<T: Scalar>(x: &Var<T>, axis: usize) -> Result<Var<T>> {
    const OP: &str = "softmax";
    if axis >= x.shape().len() {
        return Err(arg_err(OP, format!("axis {axis} out of range for {:?}", x.shape())));
    }
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let xd = x.value().data();
    let mut out = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let m = (0..len).map(|k| xd[at(k)]).fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for k in 0..len {
                let e = (xd[at(k)] - m).exp();
                out[at(k)] = e;
                s += e;
            }
            for k in 0..len {
                out[at(k)] /= s;
            }
        }
    }
    let y = Tensor::new(x.shape(), out)?;
    let yv = y.clone();
    Tape::record(
        OP,
        y,
        &[x],
        Box::new(move |g, _| {
            let (gd, yd) = (g.data(), yv.data());
            let mut dx = vec![T::zero(); gd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let dot = (0..len).map(|k| gd[at(k)] * yd[at(k)]).sum::<T>();
                    for k in 0..len {
                        dx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(yv.shape().to_vec(), dx))]
        }),
    )
}
