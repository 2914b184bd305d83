//! Adapter guidance distillation on a toy conditional diffusion model.
//!
//! A frozen class-conditional ε-prediction network is trained on 2-D
//! Gaussian mixtures. Classifier-free guided sampling trajectories are cached
//! to disk, and small residual adapters conditioned on the guidance scale are
//! trained to reproduce the guided prediction in a single forward pass.

pub mod adapters;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod eval;
pub mod hash;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod trajectory;

pub use error::{Error, Result};
