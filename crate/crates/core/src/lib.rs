//! Dense tensors, a tape-based reverse-mode autodiff engine and the neural
//! primitives (convolutions, pooling, pixel shuffle, ROI align, layer norm,
//! losses) used by the decoder, adapter and loss crates.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`). Training runs in
//! `f32`; gradient verification runs in `f64`. The aliases below name the
//! two concrete instantiations.

pub mod error;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod param;
pub mod rng;
pub mod scalar;
pub mod suite;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use param::{Binding, ParamEntry, ParamId, ParamStore, ParamTag};
pub use scalar::{DType, Scalar};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Var32 = Var<f32>;
pub type Var64 = Var<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
