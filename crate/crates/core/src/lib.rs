//! Feed-forward networks with learnable pooling operators.
//!
//! Two pooling units are provided, each with hand-derived backward passes:
//!
//! * **Lp-norm pooling** with a learnable order `p = max(1, ρ)` per pool,
//! * **Gaussian-kernel pooling**, a kernel-weighted average of `η·tanh(a)`
//!   with a learnable centre `μ` and precision `β` per pool.
//!
//! Pooled models can be adapted to a shifted data distribution by
//! re-estimating only the pooling parameters (optionally with LHUC
//! amplitudes), see [`adaptation`].

pub mod adaptation;
pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod numeric;
pub mod pooling;
pub mod training;

pub use error::{Error, Result};
pub use numeric::{ActivationKind, Matrix, Rng};
