//! Desk-scale study of generative data augmentation: trains DDPM and
//! progressive-GAN generators on a procedural two-class image corpus,
//! scores the synthetic output (FID, expert agreement), and measures how
//! mixing it into small or imbalanced training sets changes classifier
//! accuracy and stability.
//!
//! Core math is generic over the scalar type ([`scalar::Scalar`]);
//! training uses `f32`, gradient verification uses `f64`.

pub mod classify;
pub mod corpus;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod pggan;
pub mod pipeline;
pub mod scalar;
pub mod selection;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training scalar used throughout the pipeline.
pub type Real = f32;
/// Tensor in the training precision.
pub type Tensor32 = numerics::Tensor<f32>;
/// Tensor in the gradient-check precision.
pub type Tensor64 = numerics::Tensor<f64>;
