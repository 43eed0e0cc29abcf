//! Expression-conditioned deformable neural radiance field.
//!
//! The library models a portrait-style scene as a canonical radiance field
//! warped by a per-frame deformation network and conditioned on a
//! low-dimensional expression vector. A silhouette rasterized from a proxy
//! mesh gates the expression input per ray so that pixels outside the head
//! region are provably independent of expression. Everything runs on the CPU
//! with a small hand-rolled reverse-mode core; an analytic synthetic scene
//! supplies ground truth for training and evaluation.

// index loops over parallel arrays and explicit `x = x * y` read better in
// the numerical kernels than iterator adapters or compound assignment on a
// generic scalar type
#![allow(clippy::needless_range_loop, clippy::assign_op_pattern)]

pub mod camera;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod field;
pub mod nn;
pub mod prior;
pub mod real;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use real::Real;

/// Dimension of the expression vector.
pub const BETA_DIM: usize = 50;
/// Dimension of the per-frame deformation code.
pub const DEFORM_CODE_DIM: usize = 128;
/// Dimension of the per-frame appearance code.
pub const APPEARANCE_CODE_DIM: usize = 8;
