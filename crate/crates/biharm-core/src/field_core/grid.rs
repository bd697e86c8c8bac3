//! Uniform tensor grids, periodic or boxed.
//!
//! A periodic grid covers `[lo, lo + n*dx)` per axis with the right endpoint
//! identified with the left; a boxed grid includes both endpoints. Fourier
//! operations require the periodic flavor. A boxed grid with an even interval
//! count embeds node-exactly into a periodic cell of twice its extent, which
//! is how compactly supported coefficients travel between boundary-value
//! solves and FFT pipelines.

use crate::error::{BiharmError, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    /// Nodes per axis.
    pub shape: Vec<usize>,
    /// Coordinate of node 0 per axis.
    pub lo: Vec<f64>,
    /// Node spacing per axis.
    pub dx: Vec<f64>,
    /// Periodic identification of the right edge.
    pub periodic: bool,
}

impl Grid {
    /// Periodic cell centered at `center` with `n` nodes and physical length
    /// `length` per axis; node `n` would coincide with node 0.
    pub fn periodic(dim: usize, n: usize, length: f64, center: f64) -> Result<Self> {
        if !(2..=3).contains(&dim) {
            return Err(BiharmError::Parameter(format!("dim must be 2 or 3, got {dim}")));
        }
        if n < 8 {
            return Err(BiharmError::GridTooSmall(format!("{n} nodes per axis, need >= 8")));
        }
        let dx = length / n as f64;
        Ok(Grid {
            shape: vec![n; dim],
            lo: vec![center - length / 2.0; dim],
            dx: vec![dx; dim],
            periodic: true,
        })
    }

    /// Boxed grid spanning `[center - extent/2, center + extent/2]` inclusive,
    /// split into `intervals` cells per axis.
    pub fn boxed(dim: usize, intervals: usize, extent: f64, center: f64) -> Result<Self> {
        if !(2..=3).contains(&dim) {
            return Err(BiharmError::Parameter(format!("dim must be 2 or 3, got {dim}")));
        }
        if intervals < 7 {
            return Err(BiharmError::GridTooSmall(format!(
                "{intervals} intervals per axis, need >= 7"
            )));
        }
        let dx = extent / intervals as f64;
        Ok(Grid {
            shape: vec![intervals + 1; dim],
            lo: vec![center - extent / 2.0; dim],
            dx: vec![dx; dim],
            periodic: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    /// Total node count.
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Volume of one grid cell, the quadrature weight of every node.
    pub fn cell_volume(&self) -> f64 {
        self.dx.iter().product()
    }

    /// Coordinate of the node with multi-index `idx`.
    pub fn node(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter()
            .enumerate()
            .map(|(a, &j)| self.lo[a] + j as f64 * self.dx[a])
            .collect()
    }

    /// All node coordinates along one axis.
    pub fn coords(&self, axis: usize) -> Vec<f64> {
        (0..self.shape[axis])
            .map(|j| self.lo[axis] + j as f64 * self.dx[axis])
            .collect()
    }

    /// Physical length per axis. For a periodic grid this is the cell length
    /// `n*dx`; for a boxed grid the node span `(n-1)*dx`.
    pub fn length(&self, axis: usize) -> f64 {
        if self.periodic {
            self.shape[axis] as f64 * self.dx[axis]
        } else {
            (self.shape[axis] - 1) as f64 * self.dx[axis]
        }
    }

    /// Continuum angular wavenumbers along `axis` in FFT storage order.
    /// Frequencies are the signed integers `0, 1, .., -1` scaled by `2*pi/L`;
    /// for even n the Nyquist slot carries the negative sign.
    pub fn wavenumbers(&self, axis: usize) -> Result<Vec<f64>> {
        if !self.periodic {
            return Err(BiharmError::NotPeriodic);
        }
        let n = self.shape[axis] as i64;
        let scale = 2.0 * PI / self.length(axis);
        Ok((0..n)
            .map(|j| {
                let s = if 2 * j < n { j } else { j - n };
                s as f64 * scale
            })
            .collect())
    }

    /// Periodic cell of twice the extent whose lattice contains this boxed
    /// grid's nodes exactly. Requires an even interval count so the box
    /// corner lands on a lattice node. Returns the grid and the multi-index
    /// offset of this box's node 0 inside it.
    pub fn periodic_embedding(&self) -> Result<(Grid, Vec<usize>)> {
        if self.periodic {
            return Err(BiharmError::Parameter("grid is already periodic".into()));
        }
        let dim = self.dim();
        let intervals = self.shape[0] - 1;
        if self.shape.iter().any(|&s| s - 1 != intervals) || intervals % 2 != 0 {
            return Err(BiharmError::Parameter(
                "periodic embedding needs equal, even interval counts".into(),
            ));
        }
        let extent = self.length(0);
        let center = self.lo[0] + extent / 2.0;
        let big = Grid::periodic(dim, 2 * intervals, 2.0 * extent, center)?;
        let offset = vec![intervals / 2; dim];
        Ok((big, offset))
    }

    pub fn same_shape(&self, other: &Grid) -> Result<()> {
        if self.shape != other.shape {
            return Err(BiharmError::ShapeMismatch {
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn periodic_wavenumbers_signed_order() {
        let g = Grid::periodic(2, 8, 2.0, 0.0).unwrap();
        let k = g.wavenumbers(0).unwrap();
        let unit = PI; // 2*pi/L with L = 2
        let expect = [0.0, 1.0, 2.0, 3.0, -4.0, -3.0, -2.0, -1.0];
        for (kj, e) in k.iter().zip(expect.iter()) {
            assert!((kj - e * unit).abs() < 1e-14);
        }
    }

    #[test]
    fn box_embeds_node_exactly() {
        let b = Grid::boxed(2, 32, 0.9, 0.0).unwrap();
        let (p, off) = b.periodic_embedding().unwrap();
        assert_eq!(p.shape, vec![64, 64]);
        assert!((p.dx[0] - b.dx[0]).abs() < 1e-15);
        // node 0 of the box must be a lattice node of the embedding
        let corner = p.node(&off);
        assert!((corner[0] - b.lo[0]).abs() < 1e-14);
        assert!((corner[1] - b.lo[1]).abs() < 1e-14);
    }

    #[test]
    fn rejects_tiny_grids() {
        assert!(Grid::periodic(2, 4, 1.0, 0.0).is_err());
        assert!(Grid::boxed(3, 4, 1.0, 0.0).is_err());
    }
}
