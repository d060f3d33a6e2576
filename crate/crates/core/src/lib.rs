//! Bergman kernels, Toeplitz spectra and multiplier ideals for Reinhardt weights on polydiscs.

pub mod bergman;
pub mod error;
pub mod generation;
pub mod jacobi;
pub mod quadrature;
pub mod regularize;
pub mod toeplitz;
pub mod volume;
pub mod weights;

pub use error::{Error, Result};
