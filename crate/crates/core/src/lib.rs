//! Fingerprint localization under environmental change.
//!
//! [`radiosim`] generates labeled source and unlabeled target CSI datasets
//! with controllable global and per-location shift. [`daan`] trains a
//! convolutional location classifier whose features are aligned across
//! domains by a global discriminator and one discriminator per reference
//! point, mixed by a factor μ that is re-estimated every epoch. [`eval`]
//! turns predictions into error statistics and runs the ablation matrix.
//!
//! Models are generic over the scalar type; the aliases below fix the
//! precision.

pub mod daan;
pub mod error;
pub mod eval;
pub mod radiosim;
pub mod seed;

pub use error::{Error, Result};

pub type DaanModel64 = daan::DaanModel<f64>;
pub type DaanModel32 = daan::DaanModel<f32>;
