use super::norm::split_axis;
use crate::error::{arg_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub fn reshape<T: Scalar>(x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
    let out = x.value().reshape(shape)?;
    let in_shape = x.shape().to_vec();
    Tape::record(
        "reshape",
        out,
        &[x],
        Box::new(move |g, _| vec![Some(g.reshape(&in_shape).expect("same numel"))]),
    )
}

/// Concatenation along `axis`; all other dimensions must agree.
pub fn concat<T: Scalar>(xs: &[&Var<T>], axis: usize) -> Result<Var<T>> {
    const OP: &str = "concat";
    let first = xs.first().ok_or_else(|| arg_err(OP, "no operands"))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(arg_err(OP, format!("axis {axis} out of range for rank {rank}")));
    }
    for (i, x) in xs.iter().enumerate() {
        let s = x.shape();
        let compatible = s.len() == rank
            && s.iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == axis || a == b);
        if !compatible {
            return Err(shape_err(
                OP,
                format!("operand {i} has shape {s:?}, operand 0 has {:?} (axis {axis})", first.shape()),
            ));
        }
    }
    let lens: Vec<usize> = xs.iter().map(|x| x.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (x, &len) in xs.iter().zip(&lens) {
            out.extend_from_slice(&x.value().data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let shapes: Vec<Vec<usize>> = xs.iter().map(|x| x.shape().to_vec()).collect();
    Tape::record(
        OP,
        Tensor::new(&shape, out)?,
        xs,
        Box::new(move |g, needs| {
            let gd = g.data();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(lens.len());
            for ((&len, s), &need) in lens.iter().zip(&shapes).zip(needs) {
                grads.push(need.then(|| {
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&gd[start..start + len * inner]);
                    }
                    Tensor::from_parts(s.clone(), d)
                }));
                offset += len;
            }
            grads
        }),
    )
}

/// Elementwise mean of equally shaped tensors.
pub fn average<T: Scalar>(xs: &[&Var<T>]) -> Result<Var<T>> {
    const OP: &str = "average";
    let first = xs.first().ok_or_else(|| arg_err(OP, "no operands"))?;
    for (i, x) in xs.iter().enumerate() {
        if x.shape() != first.shape() {
            return Err(shape_err(
                OP,
                format!("operand {i} has shape {:?}, operand 0 has {:?}", x.shape(), first.shape()),
            ));
        }
    }
    let k = T::from_usize(xs.len()).expect("fits");
    let mut acc = first.value().data().to_vec();
    for x in &xs[1..] {
        for (a, &v) in acc.iter_mut().zip(x.value().data()) {
            *a += v;
        }
    }
    for a in acc.iter_mut() {
        *a /= k;
    }
    let n = xs.len();
    Tape::record(
        OP,
        Tensor::new(first.shape(), acc)?,
        xs,
        Box::new(move |g, needs| {
            let share = g.map(|v| v / k);
            (0..n).map(|i| needs[i].then(|| share.clone())).collect()
        }),
    )
}

/// General axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Scalar>(x: &Var<T>, perm: &[usize]) -> Result<Var<T>> {
    const OP: &str = "permute";
    let rank = x.shape().len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(arg_err(OP, format!("{perm:?} is not a permutation of {rank} axes")));
    }
    let out = permute_tensor(x.value(), perm);
    let mut inverse = vec![0; rank];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    Tape::record(
        OP,
        out,
        &[x],
        Box::new(move |g, _| vec![Some(permute_tensor(g, &inverse))]),
    )
}

fn permute_tensor<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_shape = x.shape();
    let rank = in_shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let xd = x.data();
    let mut out = Vec::with_capacity(xd.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..xd.len() {
        out.push(xd[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

/// `[N,C,H,W] -> [N,H,W,C]`
pub fn to_channels_last<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    x.value().dims4("to_channels_last")?;
    permute(x, &[0, 2, 3, 1])
}

/// `[N,H,W,C] -> [N,C,H,W]`
pub fn to_channels_first<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    x.value().dims4("to_channels_first")?;
    permute(x, &[0, 3, 1, 2])
}
