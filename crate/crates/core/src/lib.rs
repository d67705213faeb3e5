//! Semi-supervised one-stage object detection at desk scale.
//!
//! A framework-free teacher-student training stack: a small dense
//! grid detector with exact reverse-mode gradients, flip-consistency
//! pseudo-label refinement with global-view filtering, task-specific
//! pseudo-label thresholds over decoupled prediction heads, and a
//! COCO-style evaluation toolkit. Everything is 64-bit float and
//! seed-deterministic end to end.

pub mod augment;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod objective;
pub mod pseudolabel;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
