//! Desk-scale laboratory for studying how knowledge distillation moves
//! debiasing capability between models of different scales.
//!
//! The crate is organized around seven subsystems:
//!
//! - [`tensor`] / [`graph`] / [`adam`]: a minimal dense-array numerical core
//!   with reverse-mode differentiation and an Adam optimizer. Generic over
//!   the scalar type; everything above it runs on [`Real`] (`f64`).
//! - [`data`]: synthetic grouped datasets with controllable spurious
//!   correlations, in two flavors (vector features and token sequences).
//! - [`models`]: the five-point scale ladder (T/S/M/B/L) in two families,
//!   an MLP classifier and a tiny attention classifier, with activation
//!   tracing.
//! - [`debias`]: six debiasing trainers behind one interface (ERM, two PoE
//!   variants, sigma-damp, deep feature reweighting, per-sample-gradient
//!   resampling).
//! - [`distill`]: logit-based knowledge distillation plus the IKD and Init
//!   remedies.
//! - [`analysis`]: evaluation metrics, agreement/venn/density diagnostics,
//!   linear CKA layer maps, and EAP edge attribution.
//! - [`harness`]: the experiment matrix, result store, and report emission.
//!
//! All randomness flows through seeded ChaCha8 streams (see [`rng`]), and all
//! arithmetic is `f64`, so every run is bitwise reproducible.

pub mod adam;
pub mod analysis;
pub mod data;
pub mod debias;
pub mod distill;
pub mod funcs;
pub mod graph;
pub mod harness;
pub mod models;
pub mod rng;
pub mod scalar;
pub mod tensor;

/// Scalar type used by everything above the numerical core.
pub type Real = f64;

/// Dense array over [`Real`].
pub type Tensor = tensor::Tensor<Real>;

/// Computation tape over [`Real`].
pub type Tape = graph::Tape<Real>;

/// Adam optimizer state over [`Real`].
pub type AdamState = adam::AdamState<Real>;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
