//! Complex fields over a grid: scalars, vectors, symmetric matrices.
//!
//! All values are complex; coefficients of the operator may be complex and
//! every Fourier pipeline produces complex data anyway. Symmetric matrix
//! fields store the upper triangle in lexicographic order, so for dimension
//! three the component order is (00, 01, 02, 11, 12, 22).

use crate::error::Result;
use crate::field_core::grid::Grid;
use ndarray::{ArrayD, Dimension, IxDyn};
use num_complex::Complex64;

pub type C64 = Complex64;

#[derive(Debug, Clone)]
pub struct ScalarField {
    pub grid: Grid,
    pub data: ArrayD<C64>,
}

impl ScalarField {
    pub fn zeros(grid: &Grid) -> Self {
        ScalarField {
            grid: grid.clone(),
            data: ArrayD::zeros(IxDyn(&grid.shape)),
        }
    }

    /// Build a field by evaluating `f` at every node coordinate.
    pub fn from_fn(grid: &Grid, f: impl Fn(&[f64]) -> C64) -> Self {
        let mut data = ArrayD::zeros(IxDyn(&grid.shape));
        for (idx, v) in data.indexed_iter_mut() {
            let x = grid.node(idx.slice());
            *v = f(&x);
        }
        ScalarField { grid: grid.clone(), data }
    }

    pub fn constant(grid: &Grid, c: C64) -> Self {
        ScalarField {
            grid: grid.clone(),
            data: ArrayD::from_elem(IxDyn(&grid.shape), c),
        }
    }

    pub fn map(&self, f: impl Fn(C64) -> C64) -> Self {
        ScalarField {
            grid: self.grid.clone(),
            data: self.data.mapv(f),
        }
    }

    pub fn conj(&self) -> Self {
        self.map(|v| v.conj())
    }

    pub fn scale(&self, c: C64) -> Self {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &ScalarField) -> Result<Self> {
        self.grid.same_shape(&other.grid)?;
        Ok(ScalarField {
            grid: self.grid.clone(),
            data: &self.data + &other.data,
        })
    }

    pub fn sub(&self, other: &ScalarField) -> Result<Self> {
        self.grid.same_shape(&other.grid)?;
        Ok(ScalarField {
            grid: self.grid.clone(),
            data: &self.data - &other.data,
        })
    }

    /// Pointwise product.
    pub fn hadamard(&self, other: &ScalarField) -> Result<Self> {
        self.grid.same_shape(&other.grid)?;
        Ok(ScalarField {
            grid: self.grid.clone(),
            data: &self.data * &other.data,
        })
    }

    /// Accumulate `c * other` in place.
    pub fn axpy(&mut self, c: C64, other: &ScalarField) -> Result<()> {
        self.grid.same_shape(&other.grid)?;
        self.data.zip_mut_with(&other.data, |a, b| *a += c * b);
        Ok(())
    }

    /// Discrete L2 norm with the cell-volume quadrature weight.
    pub fn norm_l2(&self) -> f64 {
        let w = self.grid.cell_volume();
        (self.data.iter().map(|v| v.norm_sqr()).sum::<f64>() * w).sqrt()
    }

    pub fn norm_max(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// L2 pairing `integral of f * conj(g)` with quadrature weight.
    pub fn inner(&self, other: &ScalarField) -> Result<C64> {
        self.grid.same_shape(&other.grid)?;
        let w = self.grid.cell_volume();
        let mut acc = C64::new(0.0, 0.0);
        for (a, b) in self.data.iter().zip(other.data.iter()) {
            acc += a * b.conj();
        }
        Ok(acc * w)
    }

    /// Plain trapezoid integral of the field over its grid. On a periodic
    /// grid all weights are equal; on a boxed grid edge nodes get the usual
    /// halved trapezoid weights.
    pub fn integral(&self) -> C64 {
        let w = self.grid.cell_volume();
        if self.grid.periodic {
            return self.data.iter().sum::<C64>() * w;
        }
        let mut acc = C64::new(0.0, 0.0);
        for (idx, v) in self.data.indexed_iter() {
            let mut weight = 1.0;
            for (a, &j) in idx.slice().iter().enumerate() {
                if j == 0 || j == self.grid.shape[a] - 1 {
                    weight *= 0.5;
                }
            }
            acc += v * weight;
        }
        acc * w
    }
}

#[derive(Debug, Clone)]
pub struct VectorField {
    pub grid: Grid,
    pub comps: Vec<ScalarField>,
}

impl VectorField {
    pub fn zeros(grid: &Grid) -> Self {
        VectorField {
            grid: grid.clone(),
            comps: (0..grid.dim()).map(|_| ScalarField::zeros(grid)).collect(),
        }
    }

    pub fn from_fns(grid: &Grid, f: impl Fn(usize, &[f64]) -> C64) -> Self {
        let comps = (0..grid.dim())
            .map(|c| ScalarField::from_fn(grid, |x| f(c, x)))
            .collect();
        VectorField { grid: grid.clone(), comps }
    }

    pub fn dim(&self) -> usize {
        self.comps.len()
    }

    pub fn norm_l2(&self) -> f64 {
        self.comps.iter().map(|c| c.norm_l2().powi(2)).sum::<f64>().sqrt()
    }

    pub fn conj(&self) -> Self {
        VectorField {
            grid: self.grid.clone(),
            comps: self.comps.iter().map(|c| c.conj()).collect(),
        }
    }

    /// Pointwise contraction with a constant complex vector: `sum_j v_j f_j`.
    pub fn contract(&self, v: &[C64]) -> ScalarField {
        let mut out = ScalarField::zeros(&self.grid);
        for (c, field) in v.iter().zip(self.comps.iter()) {
            out.axpy(*c, field).expect("component grids agree");
        }
        out
    }
}

/// Position of the (j, k) entry, j <= k, inside the packed upper triangle.
pub fn sym_index(dim: usize, j: usize, k: usize) -> usize {
    let (j, k) = if j <= k { (j, k) } else { (k, j) };
    j * dim - j * (j + 1) / 2 + k
}

/// Number of packed components of a symmetric dim x dim matrix.
pub fn sym_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

#[derive(Debug, Clone)]
pub struct SymMatrixField {
    pub grid: Grid,
    /// Packed upper triangle, lexicographic in (j, k) with j <= k.
    pub comps: Vec<ScalarField>,
}

impl SymMatrixField {
    pub fn zeros(grid: &Grid) -> Self {
        SymMatrixField {
            grid: grid.clone(),
            comps: (0..sym_len(grid.dim())).map(|_| ScalarField::zeros(grid)).collect(),
        }
    }

    pub fn from_fns(grid: &Grid, f: impl Fn(usize, usize, &[f64]) -> C64) -> Self {
        let dim = grid.dim();
        let mut comps = Vec::with_capacity(sym_len(dim));
        for j in 0..dim {
            for k in j..dim {
                comps.push(ScalarField::from_fn(grid, |x| f(j, k, x)));
            }
        }
        SymMatrixField { grid: grid.clone(), comps }
    }

    /// Isotropic matrix `d(x) * I`.
    pub fn isotropic(d: &ScalarField) -> Self {
        let dim = d.grid.dim();
        let zero = ScalarField::zeros(&d.grid);
        let mut comps = Vec::with_capacity(sym_len(dim));
        for j in 0..dim {
            for k in j..dim {
                comps.push(if j == k { d.clone() } else { zero.clone() });
            }
        }
        SymMatrixField { grid: d.grid.clone(), comps }
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn at(&self, j: usize, k: usize) -> &ScalarField {
        &self.comps[sym_index(self.dim(), j, k)]
    }

    pub fn at_mut(&mut self, j: usize, k: usize) -> &mut ScalarField {
        let idx = sym_index(self.dim(), j, k);
        &mut self.comps[idx]
    }

    pub fn norm_l2(&self) -> f64 {
        // off-diagonal components appear twice in the Frobenius sum
        let dim = self.dim();
        let mut acc = 0.0;
        for j in 0..dim {
            for k in 0..dim {
                acc += self.at(j, k).norm_l2().powi(2);
            }
        }
        acc.sqrt()
    }

    pub fn conj(&self) -> Self {
        SymMatrixField {
            grid: self.grid.clone(),
            comps: self.comps.iter().map(|c| c.conj()).collect(),
        }
    }

    /// Pointwise bilinear contraction `sum_{jk} M_jk a_j b_k` with constant
    /// complex vectors (no conjugation; the transport brackets are bilinear).
    pub fn contract2(&self, a: &[C64], b: &[C64]) -> ScalarField {
        let dim = self.dim();
        let mut out = ScalarField::zeros(&self.grid);
        for j in 0..dim {
            for k in 0..dim {
                out.axpy(a[j] * b[k], self.at(j, k)).expect("component grids agree");
            }
        }
        out
    }

    /// Matrix-vector contraction with a constant vector: `(M a)_k`.
    pub fn contract1(&self, a: &[C64]) -> VectorField {
        let dim = self.dim();
        let comps = (0..dim)
            .map(|k| {
                let mut out = ScalarField::zeros(&self.grid);
                for j in 0..dim {
                    out.axpy(a[j], self.at(j, k)).expect("component grids agree");
                }
                out
            })
            .collect();
        VectorField { grid: self.grid.clone(), comps }
    }
}
