//! Generalized block term decomposition (GBTD) of convolution kernels.
//!
//! The crate covers four layers:
//!
//! * [`tensor`]: dense tensors, unfoldings and (generalized) mode products;
//! * [`decomp`]: Tucker / block term decompositions fit by alternating least squares;
//! * [`convmap`]: realizing a factored 4th-order kernel as
//!   pointwise conv, grouped spatial conv, pointwise conv;
//! * [`cru`]: collective factorization of several kernels with shared factors;
//! * [`archspec`]: residual-network descriptors with parameter and FLOP accounting.
//!
//! Modes and indices are 0-based throughout the Rust API.

pub mod archspec;
pub mod convmap;
pub mod cru;
pub mod decomp;
mod error;
pub mod io;
mod linalg;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{relative_error, Activation, DenseTensor, FactorMatrix};
