//! facedit: a desk-scale, dependency-light engine for identity-conditioned
//! video diffusion transformers, exercised end to end on a procedurally
//! generated synthetic face world where identity, pose and landmarks are
//! known analytically.
//!
//! The crate is organized around seven subsystems:
//!
//! - [`tensor`] / [`rng`] / [`ops`]: deterministic numeric kernels, counter-based
//!   randomness, and the finite-difference gradient oracle.
//! - [`embedder`]: dual-branch facial feature extraction (identity tokens and
//!   structural tokens) plus masked fusion into the text sequence.
//! - [`dit`]: the multimodal transformer stack with per-modality adaptive
//!   normalization, identity-conditioned modulation residuals, and decoupled
//!   attention over face tokens.
//! - [`diffusion`]: noise schedule, combined training objective with face-area
//!   masking, the two-stage training loop, and ancestral sampling.
//! - [`dataforge`]: the synthetic identity world with ground-truth landmarks,
//!   pair synthesis, and cosine-threshold filtering.
//! - [`metrics`]: identity-similarity and facial-motion evaluation.
//! - [`config`] / [`checkpoint`] / [`commands`]: configuration, persistence
//!   and batch entry points behind the `facedit` binary.
//!
//! Start with the runnable examples (`cargo run --example <name>`):
//! each major capability has one.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataforge;
pub mod diffusion;
pub mod dit;
pub mod embedder;
pub mod error;
pub mod metrics;
pub mod ops;
pub mod params;
pub mod rng;
pub mod tensor;

mod autodiff;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::Tensor;
