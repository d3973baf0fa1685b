use super::conv::{gemm_nn, gemm_nt, gemm_tn};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("rank >= 1") = last;
    s
}

/// Affine map over the trailing axis: `[..., Cin] -> [..., Cout]`, with
/// `weight: [Cout, Cin]`.
pub fn linear<T: Scalar>(x: &Var<T>, weight: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
    const OP: &str = "linear";
    let &[cout, cin] = weight.shape() else {
        return Err(shape_err(OP, format!("weight must be [Cout, Cin], got {:?}", weight.shape())));
    };
    if x.shape().last() != Some(&cin) {
        return Err(shape_err(
            OP,
            format!("input {:?} trailing dim must be {cin}", x.shape()),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(shape_err(OP, format!("bias {:?} must be [{cout}]", b.shape())));
        }
    }
    let rows = x.value().numel() / cin;
    let mut out = vec![T::zero(); rows * cout];
    if let Some(b) = bias {
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(b.value().data());
        }
    }
    // out[rows x cout] = x[rows x cin] * W^T
    gemm_nt(x.value().data(), weight.value().data(), &mut out, rows, cout, cin);
    let xv = x.value().clone();
    let wv = weight.value().clone();
    let out = Tensor::new(&with_last(x.shape(), cout), out)?;
    let backward = Box::new(move |g: &Tensor<T>, needs: &[bool]| {
        let gd = g.data();
        let mut grads = vec![
            needs[0].then(|| {
                let mut dx = vec![T::zero(); rows * cin];
                gemm_nn(gd, wv.data(), &mut dx, rows, cout, cin);
                Tensor::from_parts(xv.shape().to_vec(), dx)
            }),
            needs[1].then(|| {
                let mut dw = vec![T::zero(); cout * cin];
                gemm_tn(gd, xv.data(), &mut dw, rows, cout, cin);
                Tensor::from_parts(vec![cout, cin], dw)
            }),
        ];
        if needs.len() == 3 {
            grads.push(needs[2].then(|| {
                let mut db = vec![T::zero(); cout];
                for row in gd.chunks(cout) {
                    for (o, &v) in db.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                Tensor::from_parts(vec![cout], db)
            }));
        }
        grads
    });
    match bias {
        Some(b) => Tape::record(OP, out, &[x, weight, b], backward),
        None => Tape::record(OP, out, &[x, weight], backward),
    }
}

/// `[..., K] x [K, M] -> [..., M]`.
pub fn matmul_last<T: Scalar>(x: &Var<T>, m: &Var<T>) -> Result<Var<T>> {
    const OP: &str = "matmul";
    let &[k, n] = m.shape() else {
        return Err(shape_err(OP, format!("right operand must be a matrix, got {:?}", m.shape())));
    };
    if x.shape().last() != Some(&k) {
        return Err(shape_err(OP, format!("left {:?} trailing dim must be {k}", x.shape())));
    }
    let rows = x.value().numel() / k;
    let mut out = vec![T::zero(); rows * n];
    gemm_nn(x.value().data(), m.value().data(), &mut out, rows, k, n);
    let xv = x.value().clone();
    let mv = m.value().clone();
    Tape::record(
        OP,
        Tensor::new(&with_last(x.shape(), n), out)?,
        &[x, m],
        Box::new(move |g, needs| {
            let gd = g.data();
            vec![
                needs[0].then(|| {
                    let mut dx = vec![T::zero(); rows * k];
                    gemm_nt(gd, mv.data(), &mut dx, rows, k, n);
                    Tensor::from_parts(xv.shape().to_vec(), dx)
                }),
                needs[1].then(|| {
                    let mut dm = vec![T::zero(); k * n];
                    gemm_tn(xv.data(), gd, &mut dm, rows, k, n);
                    Tensor::from_parts(vec![k, n], dm)
                }),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_weight_sums_inputs() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap(), true);
        let w = tape.leaf(Tensor::ones(&[2, 3]), true);
        let b = tape.leaf(Tensor::from_f64(&[2], &[0.5, -1.0]).unwrap(), true);
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.value().data(), &[6.5, 5.0]);
    }

    #[test]
    fn identity_weight_is_identity() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 2, 4], |i| (i[0] + i[1] * 3 + i[2] * 5) as f64), true);
        let w = tape.constant(Tensor::from_fn(&[4, 4], |i| (i[0] == i[1]) as u8 as f64));
        let b = tape.constant(Tensor::zeros(&[4]));
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().value(), x.value());
    }

    #[test]
    fn rejects_wrong_trailing_dim() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 5]), true);
        let w = tape.leaf(Tensor::zeros(&[3, 4]), true);
        assert!(linear(&x, &w, None).is_err());
        assert!(matmul_last(&x, &w).is_err());
    }
}
