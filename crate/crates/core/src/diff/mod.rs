//! Minimal reverse-mode differentiation over dense C×H×W tensors.
//!
//! A [`Tape`] records every operation with the data its backward rule needs.
//! Values are generic over [`Real`] so the same operator code runs in `f32`
//! for fitting and in `f64` for finite-difference checks.

mod conv;
mod gradcheck;
mod image_ops;
mod ops;
mod tape;
mod tensor;

pub use conv::{ConvSpec, Padding};
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport, ScalarFn};
pub use image_ops::{NORMALIZE_MIN_NORM, SOBEL_EPS};
pub use ops::sigmoid;
pub use tape::{Ctx, Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("tensors must have rank 1..=4, got {0}")]
    Rank(usize),
}

#[cfg(test)]
mod tests;
