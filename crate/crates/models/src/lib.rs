//! The three model components: the refinement decoder, the environmental
//! robust adapter and the boundary-aware loss, plus parameter accounting and
//! finite-difference suites for all of them.

pub mod audit;
pub mod bace;
pub mod decoder;
pub mod era;
pub mod suites;

pub use audit::{count_params, Budget, ParamDesc, Scheme};
pub use bace::{bace_loss, null_project, range_project, refine_gamma, total_loss, BaceConfig, Pool};
pub use decoder::{Decoder, DecoderConfig, Dsu, FeaturePyramid, Msgrn};
pub use era::{era_param_count, Era, EraConfig};
pub use suites::{run_suite, SuiteModule};

pub type BaceConfig32 = BaceConfig<f32>;
pub type BaceConfig64 = BaceConfig<f64>;
pub type FeaturePyramid32 = FeaturePyramid<f32>;
pub type FeaturePyramid64 = FeaturePyramid<f64>;
