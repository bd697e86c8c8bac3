//! Numerical laboratory for the Calderon problem of a perturbed biharmonic
//! operator: forward Navier solves and DN maps, gauge identities, complex
//! geometric optics solutions built from transport equations with CGO
//! amplitudes, Carleman-scaling verification, and Fourier reconstruction of
//! coefficient differences from moment data.

pub mod analytic;
pub mod error;
pub mod field_core;
pub mod forward_solver;
pub mod gauge;
pub mod linalg;
pub mod tol;
pub mod transport2d;

pub use error::{BiharmError, Result};
