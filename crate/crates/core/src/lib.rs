//! Slow-fast controlled stochastic systems on Galerkin-truncated Hilbert
//! spaces and their singular limit: ergodic drivers, regularized and limit
//! BSDEs, Legendre duality and the reduced control problem.

pub mod bsde;
pub mod dynamics;
pub mod ergodic;
pub mod error;
pub mod hamiltonian;
pub mod legendre;
pub mod model;
pub mod presets;
pub mod reduced;
pub mod regression;
pub mod spectral;
pub mod stats;

#[cfg(test)]
mod testing;

pub use error::{Error, Result};
pub use model::{Coefficients, Constants, ModelParts, ModelSpec};
pub use spectral::ModeVector;
