//! Desk-scale training engine for a dual-stream embedding classifier with
//! paraphrase feature augmentation and a curriculum-gated training schedule.
//!
//! The crate is generic over the scalar type: training runs usually use
//! [`f32`], numerical verification uses [`f64`]. On-disk formats always
//! store `f32`.

pub mod curriculum;
pub mod dataset;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod training;

pub use scalar::Scalar;
pub use tape::{grad_check, Tape, VarId};
pub use tensor::{NumError, Tensor};

/// Concrete aliases for the two supported precisions.
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;


