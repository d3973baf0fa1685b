//! Boundary-aware cross-entropy via a range-null split.
//!
//! `A` is block pooling with kernel = stride = `s` and `A^T` is nearest
//! upsampling, so `A^T A x` keeps the coarse block structure of `x` and
//! `(I - A^T A) x` keeps the within-block detail. The refined prediction
//! takes its coarse part from the ground truth and its detail from the
//! prediction, and is scored with BCE-with-logits against the ground truth.
//!
//! With max pooling `A` is not linear, so only identities that hold for the
//! nonlinear operator are relied upon: exact reconstruction,
//! `A (A^T A x) = A x`, and `refine(gt, gt) = gt`.

use std::str::FromStr;

use baris_core::ops;
use serde::{Deserialize, Serialize};
use baris_core::{Result, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    #[default]
    Max,
    /// Block averaging; makes `A` linear.
    Avg,
}

impl FromStr for Pool {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Pool::Max),
            "avg" => Ok(Pool::Avg),
            other => Err(TensorError::InvalidArgument {
                op: "bace pool",
                detail: format!("unknown pool `{other}` (expected max or avg)"),
            }),
        }
    }
}

impl Pool {
    pub fn name(self) -> &'static str {
        match self {
            Pool::Max => "max",
            Pool::Avg => "avg",
        }
    }

    fn apply<T: Scalar>(self, x: &Var<T>, s: usize) -> Result<Var<T>> {
        match self {
            Pool::Max => ops::max_pool2d(x, s),
            Pool::Avg => ops::avg_pool2d(x, s),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaceConfig<T> {
    pub scale: usize,
    pub lambda: f64,
    pub pool: Pool,
    /// Per-pixel weight for the boundary term, same shape as the masks.
    pub class_weight: Option<Tensor<T>>,
}

impl<T> Default for BaceConfig<T> {
    fn default() -> Self {
        Self {
            scale: 4,
            lambda: 1.0,
            pool: Pool::Max,
            class_weight: None,
        }
    }
}

impl<T> BaceConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 || !(self.lambda >= 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "bace config",
                detail: format!("need scale >= 1 and lambda >= 0, got scale {} lambda {}", self.scale, self.lambda),
            });
        }
        Ok(())
    }
}

/// `A^T A x`.
pub fn range_project<T: Scalar>(x: &Var<T>, s: usize, pool: Pool) -> Result<Var<T>> {
    ops::nearest_upsample(&pool.apply(x, s)?, s)
}

/// `(I - A^T A) x`.
pub fn null_project<T: Scalar>(x: &Var<T>, s: usize, pool: Pool) -> Result<Var<T>> {
    ops::sub(x, &range_project(x, s, pool)?)
}

/// `A^T A gt + (I - A^T A) pred`. Depends on `pred` only through the null
/// branch.
pub fn refine_gamma<T: Scalar>(pred: &Var<T>, gt: &Tensor<T>, s: usize, pool: Pool) -> Result<Var<T>> {
    pred.value().expect_same_shape(gt, "refine_gamma")?;
    let coarse = range_project(&Tape::new().constant(gt.clone()), s, pool)?;
    let coarse = pred.tape().constant(coarse.value().clone());
    ops::add(&coarse, &null_project(pred, s, pool)?)
}

fn check_batch<T: Scalar>(pred: &Var<T>, gt: &Tensor<T>) -> Result<()> {
    pred.value().expect_same_shape(gt, "bace")?;
    let [_, c, _, _] = gt.dims4("bace")?;
    if c != 1 {
        return Err(TensorError::ShapeMismatch {
            op: "bace",
            detail: format!("masks must be [N_inst, 1, H, W], got {:?}", gt.shape()),
        });
    }
    if let Some(v) = gt.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(TensorError::InvalidArgument {
            op: "bace",
            detail: format!("ground truth must be binary, found {}", v.to_f64_lossy()),
        });
    }
    Ok(())
}

/// Mean over instances of the per-instance BCE between the refined
/// prediction (used as logits) and the ground truth. All instances share
/// one size, so this is the mean over every element.
pub fn bace_loss<T: Scalar>(pred: &Var<T>, gt: &Tensor<T>, cfg: &BaceConfig<T>) -> Result<Var<T>> {
    cfg.validate()?;
    check_batch(pred, gt)?;
    let gamma = refine_gamma(pred, gt, cfg.scale, cfg.pool)?;
    ops::bce_with_logits(&gamma, gt, cfg.class_weight.as_ref())
}

/// `BCE(pred, gt) + lambda * BACE(pred, gt)`.
pub fn total_loss<T: Scalar>(pred: &Var<T>, gt: &Tensor<T>, cfg: &BaceConfig<T>) -> Result<Var<T>> {
    let ce = ops::bce_with_logits(pred, gt, None)?;
    let boundary = bace_loss(pred, gt, cfg)?;
    ops::add(&ce, &ops::scale(&boundary, T::from_f64_lossy(cfg.lambda))?)
}
