use super::elementwise::sigmoid_scalar;
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Mean over all elements of `w * (softplus(x) - t * x)`, evaluated as
/// `max(x, 0) - x t + log(1 + exp(-|x|))`. Targets and weights are constants.
pub fn bce_with_logits<T: Scalar>(
    logits: &Var<T>,
    target: &Tensor<T>,
    weight: Option<&Tensor<T>>,
) -> Result<Var<T>> {
    const OP: &str = "bce_with_logits";
    if logits.shape() != target.shape() {
        return Err(shape_err(
            OP,
            format!("logits {:?} vs target {:?}", logits.shape(), target.shape()),
        ));
    }
    if let Some(w) = weight {
        if w.shape() != target.shape() {
            return Err(shape_err(OP, format!("weight {:?} vs target {:?}", w.shape(), target.shape())));
        }
    }
    let n = T::from_usize(target.numel()).expect("fits");
    let wat = |i: usize| weight.map_or(T::one(), |w| w.data()[i]);
    let total: T = logits
        .value()
        .data()
        .iter()
        .zip(target.data())
        .enumerate()
        .map(|(i, (&x, &t))| wat(i) * (x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p()))
        .sum();
    let xv = logits.value().clone();
    let tv = target.clone();
    let wv = weight.cloned();
    Tape::record(
        OP,
        Tensor::scalar(total / n),
        &[logits],
        Box::new(move |g, _| {
            let scale = g.item() / n;
            let d: Vec<T> = xv
                .data()
                .iter()
                .zip(tv.data())
                .enumerate()
                .map(|(i, (&x, &t))| {
                    let w = wv.as_ref().map_or(T::one(), |w| w.data()[i]);
                    scale * w * (sigmoid_scalar(x) - t)
                })
                .collect();
            vec![Some(Tensor::from_parts(xv.shape().to_vec(), d))]
        }),
    )
}
