//! Spectral robustness lab.
//!
//! Dense tensors with a reverse-mode autodiff tape, centered-patch FFT
//! filters, L-infinity PGD, adversarial training with spectral alignment of
//! model outputs (optionally against a weight-averaged branch), and the
//! frequency-domain diagnostics used to study where attacks put their energy.

pub mod analysis;
pub mod attacks;
pub mod audit;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod models;
pub mod objectives;
pub mod rng;
pub mod scalar;
pub mod spectral;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
