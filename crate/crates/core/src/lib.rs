//! Framework-independent numerical core of a two-stage cascade detector.
//!
//! Every piece here is a pure function over plain data: box geometry and
//! regression targets, stage losses, hard and soft suppression, cascade label
//! assignment and refinement, pyramid bookkeeping, deformable sampling
//! kernels with analytic gradients, context and attention blocks, box-aware
//! augmentation, dataset samplers, learning-rate schedules and a COCO-style
//! mAP@50:95 evaluator.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod blocks;
pub mod cascade;
pub mod coco;
pub mod deform;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod pyramid;
pub mod sampling;
pub mod schedule;
pub mod suppression;
pub mod tensor;

pub use error::{Error, Result};
pub use geometry::{BBox, Delta};
pub use suppression::Detection;
pub use tensor::Tensor;
