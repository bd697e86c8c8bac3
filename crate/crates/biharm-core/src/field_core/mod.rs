//! Grids, fields, stencils, FFT multipliers, norms, and masks.

pub mod deriv;
pub mod fft;
pub mod field;
pub mod grid;
pub mod io;
pub mod mask;

pub use deriv::{bilaplacian, diff1, diff2, directional_derivative, divergence, dop, gradient, laplacian};
pub use fft::FftCtx;
pub use field::{C64, ScalarField, SymMatrixField, VectorField, sym_index, sym_len};
pub use grid::Grid;
pub use mask::DomainMask;
