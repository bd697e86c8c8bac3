//! Centralized numerical tolerances.
//!
//! Every hard-coded threshold used by tests, consistency flags, and solver
//! stopping rules lives here, with the reason it has the value it has.

/// Identities that hold to round-off: null contractions, symbol-level
/// projection identities, trace invariance of boundary-flat gauges.
/// 1e-12 leaves two digits of slack over f64 epsilon accumulation on
/// desk-scale grids (up to ~3e5 nodes).
pub const ROUND_OFF: f64 = 1e-12;

/// Eikonal residuals for linear phases are exact; 1e-14 tolerates only
/// the floating-point evaluation of the dot products themselves.
pub const EIKONAL: f64 = 1e-14;

/// FFT-diagonalized solves verified by reapplying the forward operator.
/// Multiplier inversion is exact per mode, so only transform round-off
/// (~1e-13 per pass) accumulates.
pub const SPECTRAL_RESIDUAL: f64 = 1e-10;

/// Iterative transport solves (Neumann iteration or least squares) stop
/// at this relative residual; loose enough to converge with bounded
/// potentials, tight enough that downstream amplitude errors stay below
/// quadrature error.
pub const TRANSPORT_RESIDUAL: f64 = 1e-6;

/// Krylov solves of conjugated operators; residual is measured against
/// the right-hand side norm.
pub const KRYLOV_RESIDUAL: f64 = 1e-10;

/// Mean of the potential, relative to its peak, below which the periodic
/// transport solve stops balancing the zero mode through that mean. The
/// balance divides by the mean, so a mean this far under the peak would
/// amplify round-off in the balanced iterate by six orders or more. Below
/// the gate the source is projected mean-free on the embedding instead
/// (the symbol annihilates constants, so that mode is a periodization
/// artifact) and the residual certifies the projected system.
pub const ZERO_MODE_COUPLING: f64 = 1e-6;

/// Relative defect allowed for the tensor decomposition round trip and
/// the divergence of the solenoidal part.
pub const DECOMPOSITION: f64 = 1e-8;

/// Agreement between the Fourier-domain decomposition and the dense
/// least-squares oracle on a small grid; the dense solve itself carries
/// conditioning error above round-off.
pub const DENSE_ORACLE: f64 = 1e-6;

/// Quadrature agreement between trapezoid moments and FFT oracles for
/// compactly supported smooth integrands.
pub const MOMENT_QUADRATURE: f64 = 1e-8;

/// Fraction of the domain extent excluded from each face when measuring
/// operator defects. Composed one-sided edge stencils are consistent for
/// solves but not uniformly second-order as pointwise residuals, so defect
/// norms compare a fixed interior subdomain across refinements.
pub const INTERIOR_MARGIN: f64 = 0.1;

/// Agreement between the pointwise gauge transform and the frozen
/// computer-algebra evaluation of the same coefficients; allows for the
/// different association order of the two polynomial evaluations.
pub const GAUGE_ORACLE: f64 = 1e-10;

/// Convergence-order acceptance window for second-order discretizations.
pub const ORDER_LO: f64 = 1.7;
pub const ORDER_HI: f64 = 2.3;

/// Log-log slope window for the first-order amplitude decay.
pub const SLOPE_LO: f64 = 0.8;
pub const SLOPE_HI: f64 = 1.2;

/// Spread allowed in sigma_min(tau) / tau across a decade of tau for the
/// conjugated operator on compactly supported fields. A constant ratio is
/// the discrete Carleman lower bound; a factor 3 absorbs the transition
/// out of the small-tau regime at the top of the sweep.
pub const CARLEMAN_RATIO: f64 = 3.0;

/// Fraction of the bare Carleman constant that must survive adding a
/// bounded potential. The perturbation enters as tau^2 c against a bound
/// linear in tau, so for desk-scale potentials half is generous.
pub const CARLEMAN_DEGRADATION: f64 = 0.5;
