//! Mutual-to-separate open-set domain adaptation on synthetic domain shifts.
//!
//! Two coupled networks are trained by alternating optimization: a sample
//! separation network that scores how similar each unlabeled target sample
//! is to the known source classes, and a distribution matching network that
//! adversarially aligns the domains while routing dissimilar samples to an
//! explicit unknown class. The two networks exchange information through
//! similarity weights and a mutual consistency loss.
//!
//! Everything runs on a small f64 reverse-mode autodiff engine; training is
//! bitwise deterministic for a fixed seed.

pub mod autograd;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod matrix;
pub mod nn;
pub mod trainer;

pub use error::{MtsError, Result};
pub use matrix::Matrix;
