//! Open-set object detection alignment: semantic clustering, class
//! decorrelation and object focus losses with analytic gradients,
//! centerness targets, entropy thresholding, the open-set metric suite, and a
//! synthetic harness that trains a toy detector end to end.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod embeddings;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod metrics;
