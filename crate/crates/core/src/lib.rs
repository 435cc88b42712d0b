//! NNCLR: contrastive learning with nearest-neighbor positives drawn from a
//! support-set queue, plus SimCLR and NNSiam baselines.

// `!(x > 0)` style checks reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod scalar;
pub mod support_set;
pub mod train;

pub use error::{Error, Result};
pub use numerics::Matrix;
pub use scalar::Scalar;

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type SupportSet32 = support_set::SupportSet<f32>;
pub type SupportSet64 = support_set::SupportSet<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Dataset64 = data::Dataset<f64>;
