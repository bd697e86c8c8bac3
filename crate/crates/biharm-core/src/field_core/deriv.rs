//! Second-order finite-difference stencils.
//!
//! Periodic grids wrap; boxed grids close the stencil with one-sided
//! second-order forms at the two edge layers, so every operation returns a
//! full-grid field. PDE solves and residual checks that require uniform
//! accuracy restrict themselves to interior nodes.
//!
//! The composed bilaplacian is defined as laplacian of laplacian, which is
//! what the forward solver assembles; keeping the identity exact at the
//! discrete level is what makes manufactured-solution and expansion checks
//! close to round-off instead of to an extra O(dx^2).

use crate::field_core::field::{C64, ScalarField, VectorField};
#[cfg(test)]
use ndarray::Dimension;
use ndarray::Axis;

fn lane_stencil(f: &ScalarField, axis: usize, rule: impl Fn(&[C64], usize, usize) -> C64) -> ScalarField {
    let n = f.grid.shape[axis];
    let mut out = ScalarField::zeros(&f.grid);
    let mut buf = vec![C64::new(0.0, 0.0); n];
    for (src, mut dst) in f
        .data
        .lanes(Axis(axis))
        .into_iter()
        .zip(out.data.lanes_mut(Axis(axis)))
    {
        for (b, v) in buf.iter_mut().zip(src.iter()) {
            *b = *v;
        }
        for j in 0..n {
            dst[j] = rule(&buf, j, n);
        }
    }
    out
}

/// Centered first derivative along `axis`; one-sided 3-point forms at boxed
/// edges (exact through quadratics).
pub fn diff1(f: &ScalarField, axis: usize) -> ScalarField {
    let inv2dx = C64::new(1.0 / (2.0 * f.grid.dx[axis]), 0.0);
    if f.grid.periodic {
        lane_stencil(f, axis, |b, j, n| (b[(j + 1) % n] - b[(j + n - 1) % n]) * inv2dx)
    } else {
        lane_stencil(f, axis, |b, j, n| {
            if j == 0 {
                (b[0] * -3.0 + b[1] * 4.0 - b[2]) * inv2dx
            } else if j == n - 1 {
                (b[n - 1] * 3.0 - b[n - 2] * 4.0 + b[n - 3]) * inv2dx
            } else {
                (b[j + 1] - b[j - 1]) * inv2dx
            }
        })
    }
}

/// Centered second derivative along `axis`; one-sided 4-point forms at boxed
/// edges (exact through cubics).
pub fn diff2(f: &ScalarField, axis: usize) -> ScalarField {
    let invdx2 = C64::new(1.0 / (f.grid.dx[axis] * f.grid.dx[axis]), 0.0);
    if f.grid.periodic {
        lane_stencil(f, axis, |b, j, n| {
            (b[(j + 1) % n] - b[j] * 2.0 + b[(j + n - 1) % n]) * invdx2
        })
    } else {
        lane_stencil(f, axis, |b, j, n| {
            if j == 0 {
                (b[0] * 2.0 - b[1] * 5.0 + b[2] * 4.0 - b[3]) * invdx2
            } else if j == n - 1 {
                (b[n - 1] * 2.0 - b[n - 2] * 5.0 + b[n - 3] * 4.0 - b[n - 4]) * invdx2
            } else {
                (b[j + 1] - b[j] * 2.0 + b[j - 1]) * invdx2
            }
        })
    }
}

/// Transport-style directional derivative `(mu . grad) f` with a constant
/// complex direction.
pub fn directional_derivative(f: &ScalarField, mu: &[C64]) -> ScalarField {
    let mut out = ScalarField::zeros(&f.grid);
    for (axis, &m) in mu.iter().enumerate() {
        if m != C64::new(0.0, 0.0) {
            out.axpy(m, &diff1(f, axis)).expect("same grid");
        }
    }
    out
}

/// The self-adjoint derivative `D_j = (1/i) d_j` used throughout the
/// operator's lower-order terms.
pub fn dop(f: &ScalarField, axis: usize) -> ScalarField {
    diff1(f, axis).scale(C64::new(0.0, -1.0))
}

pub fn gradient(f: &ScalarField) -> VectorField {
    VectorField {
        grid: f.grid.clone(),
        comps: (0..f.grid.dim()).map(|a| diff1(f, a)).collect(),
    }
}

pub fn laplacian(f: &ScalarField) -> ScalarField {
    let mut out = diff2(f, 0);
    for axis in 1..f.grid.dim() {
        out.axpy(C64::new(1.0, 0.0), &diff2(f, axis)).expect("same grid");
    }
    out
}

/// Discrete bilaplacian, by definition the composition of the discrete
/// laplacian with itself.
pub fn bilaplacian(f: &ScalarField) -> ScalarField {
    laplacian(&laplacian(f))
}

/// Divergence of a vector field.
pub fn divergence(v: &VectorField) -> ScalarField {
    let mut out = ScalarField::zeros(&v.grid);
    for (axis, comp) in v.comps.iter().enumerate() {
        out.axpy(C64::new(1.0, 0.0), &diff1(comp, axis)).expect("same grid");
    }
    out
}
