//! FFT plumbing: n-dimensional transforms, Fourier multipliers, and the
//! discrete semiclassical Sobolev norm.
//!
//! Transforms are composed from one-dimensional passes along each axis.
//! The forward transform is unnormalized; the inverse carries the 1/N
//! factor, so `inverse(forward(f)) = f` to round-off.

use crate::error::{BiharmError, Result};
use crate::field_core::field::{C64, ScalarField};
use crate::field_core::grid::Grid;
use ndarray::{ArrayD, Axis, Dimension};
use rustfft::FftPlanner;
use std::cell::RefCell;

pub struct FftCtx {
    planner: RefCell<FftPlanner<f64>>,
}

impl Default for FftCtx {
    fn default() -> Self {
        Self::new()
    }
}

impl FftCtx {
    pub fn new() -> Self {
        FftCtx { planner: RefCell::new(FftPlanner::new()) }
    }

    fn pass(&self, data: &mut ArrayD<C64>, axis: usize, forward: bool) {
        let n = data.shape()[axis];
        let fft = if forward {
            self.planner.borrow_mut().plan_fft_forward(n)
        } else {
            self.planner.borrow_mut().plan_fft_inverse(n)
        };
        let mut buf = vec![C64::new(0.0, 0.0); n];
        for mut lane in data.lanes_mut(Axis(axis)) {
            for (b, v) in buf.iter_mut().zip(lane.iter()) {
                *b = *v;
            }
            fft.process(&mut buf);
            for (v, b) in lane.iter_mut().zip(buf.iter()) {
                *v = *b;
            }
        }
    }

    /// Unnormalized forward transform of the field values.
    pub fn forward(&self, f: &ScalarField) -> Result<ArrayD<C64>> {
        if !f.grid.periodic {
            return Err(BiharmError::NotPeriodic);
        }
        let mut spec = f.data.clone();
        for axis in 0..f.grid.dim() {
            self.pass(&mut spec, axis, true);
        }
        Ok(spec)
    }

    /// Inverse transform with 1/N normalization, reattached to `grid`.
    pub fn inverse(&self, mut spec: ArrayD<C64>, grid: &Grid) -> ScalarField {
        for axis in 0..grid.dim() {
            self.pass(&mut spec, axis, false);
        }
        let scale = 1.0 / grid.len() as f64;
        spec.mapv_inplace(|v| v * scale);
        ScalarField { grid: grid.clone(), data: spec }
    }

    /// Multiply the spectrum of `f` by `m(k)` where `k` is the continuum
    /// angular wavenumber vector of each mode. The zero mode takes the
    /// explicitly supplied value; a non-finite `m(k)` elsewhere is an error.
    pub fn fourier_multiplier(
        &self,
        f: &ScalarField,
        m: impl Fn(&[f64]) -> C64,
        zero_mode: C64,
    ) -> Result<ScalarField> {
        let mut spec = self.forward(f)?;
        let ks: Vec<Vec<f64>> = (0..f.grid.dim())
            .map(|a| f.grid.wavenumbers(a))
            .collect::<Result<_>>()?;
        let mut kbuf = vec![0.0; f.grid.dim()];
        for (idx, v) in spec.indexed_iter_mut() {
            let mut zero = true;
            for (a, &j) in idx.slice().iter().enumerate() {
                kbuf[a] = ks[a][j];
                zero &= j == 0;
            }
            let mv = if zero { zero_mode } else { m(&kbuf) };
            if !mv.re.is_finite() || !mv.im.is_finite() {
                return Err(BiharmError::SingularSymbol(format!("at k = {kbuf:?}")));
            }
            *v *= mv;
        }
        Ok(self.inverse(spec, &f.grid))
    }

    /// Spectral derivative `(d/dx_axis)^order f`, used as a test oracle for
    /// the finite-difference stencils.
    pub fn spectral_derivative(&self, f: &ScalarField, axis: usize, order: u32) -> Result<ScalarField> {
        self.fourier_multiplier(
            f,
            |k| C64::new(0.0, k[axis]).powu(order),
            if order == 0 { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) },
        )
    }

    /// Discrete semiclassical Sobolev norm: the L2 norm of `<h D>^s f`
    /// evaluated spectrally, `<h k> = sqrt(1 + h^2 |k|^2)`.
    pub fn scl_norm(&self, f: &ScalarField, s: f64, h: f64) -> Result<f64> {
        if h <= 0.0 {
            return Err(BiharmError::Parameter(format!("h must be positive, got {h}")));
        }
        let spec = self.forward(f)?;
        let ks: Vec<Vec<f64>> = (0..f.grid.dim())
            .map(|a| f.grid.wavenumbers(a))
            .collect::<Result<_>>()?;
        let mut acc = 0.0;
        for (idx, v) in spec.indexed_iter() {
            let mut k2 = 0.0;
            for (a, &j) in idx.slice().iter().enumerate() {
                k2 += ks[a][j] * ks[a][j];
            }
            acc += (1.0 + h * h * k2).powf(s) * v.norm_sqr();
        }
        // Parseval: sum_x |f|^2 V_cell = (V_cell / N) sum_k |fhat|^2
        Ok((acc * f.grid.cell_volume() / f.grid.len() as f64).sqrt())
    }
}
