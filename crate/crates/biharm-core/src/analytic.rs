//! Closed-form field families with exact derivatives.
//!
//! Two representations cover every analytic need of the laboratory:
//!
//! * [`Separable`]: products over axes of `p(u) * exp(-beta u^2)` factors
//!   with an optional hard support radius, `u = x - center`. The class is
//!   closed under partial differentiation, so bump coefficients, gauge
//!   functions, and their derivatives up to any order are exact to
//!   round-off. A quartic window `(R^2 - u^2)^4` gives compact support with
//!   three continuous derivatives, enough for the regularity the operator
//!   assumes.
//! * [`TrigPoly`]: complex trigonometric polynomials with a seeded random
//!   constructor, also closed under differentiation; used for manufactured
//!   solutions and random smooth test fields.

use crate::field_core::field::{C64, ScalarField, SymMatrixField, VectorField};
use crate::field_core::grid::Grid;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;

/// One axis factor `p(u) exp(-beta u^2)`, zero for `|u| >= support` if a
/// support radius is set. Differentiation stays in the class:
/// `(p e)' = (p' - 2 beta u p) e`.
#[derive(Debug, Clone)]
pub struct Axis1d {
    /// Polynomial coefficients in `u`, low order first.
    pub poly: Vec<f64>,
    pub beta: f64,
    pub support: Option<f64>,
}

impl Axis1d {
    pub fn eval(&self, u: f64) -> f64 {
        if let Some(r) = self.support {
            if u.abs() >= r {
                return 0.0;
            }
        }
        let mut p = 0.0;
        for &c in self.poly.iter().rev() {
            p = p * u + c;
        }
        p * (-self.beta * u * u).exp()
    }

    pub fn derivative(&self) -> Axis1d {
        let n = self.poly.len();
        // p' part
        let mut dp = vec![0.0; n.max(2)];
        for (k, &c) in self.poly.iter().enumerate().skip(1) {
            dp[k - 1] += k as f64 * c;
        }
        // -2 beta u p part
        let mut out = vec![0.0; n + 1];
        for (k, v) in dp.iter().enumerate().take(n.max(2)) {
            out[k] += v;
        }
        for (k, &c) in self.poly.iter().enumerate() {
            out[k + 1] -= 2.0 * self.beta * c;
        }
        while out.len() > 1 && out.last() == Some(&0.0) {
            out.pop();
        }
        Axis1d { poly: out, beta: self.beta, support: self.support }
    }
}

/// Coefficients of the window polynomial `(r^2 - u^2)^power` in `u`.
fn window_poly(r: f64, power: u32) -> Vec<f64> {
    let mut poly = vec![1.0];
    let factor = [r * r, 0.0, -1.0];
    for _ in 0..power {
        let mut next = vec![0.0; poly.len() + 2];
        for (i, &a) in poly.iter().enumerate() {
            for (j, &b) in factor.iter().enumerate() {
                next[i + j] += a * b;
            }
        }
        poly = next;
    }
    poly
}

/// `amp * prod_a f_a(x_a - center_a)` with exact partial derivatives.
#[derive(Debug, Clone)]
pub struct Separable {
    pub amp: C64,
    pub center: Vec<f64>,
    pub axes: Vec<Axis1d>,
}

impl Separable {
    /// Windowed Gaussian bump, normalized so the value at `center` is `amp`.
    /// Support is the centered box of half-width `radius`.
    pub fn bump(dim: usize, amp: C64, center: &[f64], sigma: f64, radius: f64) -> Separable {
        assert_eq!(center.len(), dim);
        let beta = 1.0 / (2.0 * sigma * sigma);
        let axis = Axis1d {
            poly: window_poly(radius, 4),
            beta,
            support: Some(radius),
        };
        let peak = axis.eval(0.0).powi(dim as i32);
        Separable {
            amp: amp / peak,
            center: center.to_vec(),
            axes: vec![axis; dim],
        }
    }

    /// `amp * prod_a (radius^2 - u_a^2)^4 u_a^{powers[a]} / radius^8` with
    /// `u = x - center`; each axis window is normalized to peak one. The
    /// window vanishes to fourth order at `|u_a| = radius`, so the product
    /// and its derivatives through order three vanish on the support box.
    pub fn windowed_monomial(
        dim: usize,
        amp: C64,
        center: &[f64],
        radius: f64,
        powers: &[u32],
    ) -> Separable {
        assert_eq!(center.len(), dim);
        assert_eq!(powers.len(), dim);
        let base = window_poly(radius, 4);
        let peak = radius.powi(8);
        let axes = powers
            .iter()
            .map(|&p| {
                let mut poly = vec![0.0; p as usize];
                poly.extend(base.iter().map(|c| c / peak));
                Axis1d { poly, beta: 0.0, support: Some(radius) }
            })
            .collect();
        Separable { amp, center: center.to_vec(), axes }
    }

    pub fn eval(&self, x: &[f64]) -> C64 {
        let mut v = 1.0;
        for (a, f) in self.axes.iter().enumerate() {
            v *= f.eval(x[a] - self.center[a]);
            if v == 0.0 {
                return C64::new(0.0, 0.0);
            }
        }
        self.amp * v
    }

    /// Exact mixed partial derivative of the given multi-order.
    pub fn partial(&self, order: &[u32]) -> Separable {
        let mut axes = self.axes.clone();
        for (a, &k) in order.iter().enumerate() {
            for _ in 0..k {
                axes[a] = axes[a].derivative();
            }
        }
        Separable { amp: self.amp, center: self.center.clone(), axes }
    }

    pub fn sample(&self, grid: &Grid) -> ScalarField {
        ScalarField::from_fn(grid, |x| self.eval(x))
    }

    pub fn zero(dim: usize) -> Separable {
        Separable {
            amp: C64::new(0.0, 0.0),
            center: vec![0.0; dim],
            axes: vec![Axis1d { poly: vec![0.0], beta: 0.0, support: None }; dim],
        }
    }
}

/// Complex trigonometric polynomial on a periodic cell of length `length`,
/// closed under differentiation. Frequencies are integer; the field is
/// periodic, which also makes it a fine smooth test function on any box.
#[derive(Debug, Clone)]
pub struct TrigPoly {
    pub length: f64,
    pub modes: Vec<(Vec<i32>, C64)>,
}

impl TrigPoly {
    /// Seeded random field with frequencies up to `kmax` per axis and unit
    /// amplitude scale; higher modes are damped so derivatives stay tame.
    pub fn random(dim: usize, length: f64, kmax: i32, seed: u64) -> TrigPoly {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut modes = Vec::new();
        let mut rec = |freqs: Vec<i32>, rng: &mut ChaCha8Rng| {
            let k2: f64 = freqs.iter().map(|&f| (f * f) as f64).sum();
            let damp = 1.0 / (1.0 + k2);
            let re: f64 = rng.gen_range(-1.0..1.0);
            let im: f64 = rng.gen_range(-1.0..1.0);
            modes.push((freqs, C64::new(re, im) * damp));
        };
        let mut stack = vec![Vec::<i32>::new()];
        while let Some(partial) = stack.pop() {
            if partial.len() == dim {
                rec(partial, &mut rng);
                continue;
            }
            for f in -kmax..=kmax {
                let mut next = partial.clone();
                next.push(f);
                stack.push(next);
            }
        }
        // deterministic order regardless of stack exploration
        modes.sort_by(|a, b| a.0.cmp(&b.0));
        TrigPoly { length, modes }
    }

    /// Real-valued random field: pairs conjugate modes.
    pub fn random_real(dim: usize, length: f64, kmax: i32, seed: u64) -> TrigPoly {
        let t = Self::random(dim, length, kmax, seed);
        let mut modes = Vec::new();
        for (f, c) in &t.modes {
            modes.push((f.clone(), *c * 0.5));
            let neg: Vec<i32> = f.iter().map(|v| -v).collect();
            modes.push((neg, c.conj() * 0.5));
        }
        let mut out = TrigPoly { length: t.length, modes };
        out.combine();
        out
    }

    fn combine(&mut self) {
        self.modes.sort_by(|a, b| a.0.cmp(&b.0));
        let mut merged: Vec<(Vec<i32>, C64)> = Vec::new();
        for (f, c) in self.modes.drain(..) {
            if let Some(last) = merged.last_mut() {
                if last.0 == f {
                    last.1 += c;
                    continue;
                }
            }
            merged.push((f, c));
        }
        self.modes = merged;
    }

    pub fn eval(&self, x: &[f64]) -> C64 {
        let scale = TAU / self.length;
        let mut acc = C64::new(0.0, 0.0);
        for (f, c) in &self.modes {
            let phase: f64 = f.iter().zip(x).map(|(&k, &xi)| k as f64 * scale * xi).sum();
            acc += c * C64::new(0.0, phase).exp();
        }
        acc
    }

    /// Exact partial derivative: each mode picks up `(i k)^order`.
    pub fn partial(&self, order: &[u32]) -> TrigPoly {
        let scale = TAU / self.length;
        let modes = self
            .modes
            .iter()
            .map(|(f, c)| {
                let mut factor = C64::new(1.0, 0.0);
                for (a, &k) in order.iter().enumerate() {
                    factor *= C64::new(0.0, f[a] as f64 * scale).powu(k);
                }
                (f.clone(), c * factor)
            })
            .collect();
        TrigPoly { length: self.length, modes }
    }

    pub fn sample(&self, grid: &Grid) -> ScalarField {
        ScalarField::from_fn(grid, |x| self.eval(x))
    }
}

/// Compactly supported random smooth field: a trig polynomial times a
/// windowed bump. Pointwise evaluation only; use the factors for exact
/// derivatives via the product rule if needed.
#[derive(Debug, Clone)]
pub struct Windowed {
    pub window: Separable,
    pub inner: TrigPoly,
}

impl Windowed {
    pub fn random(dim: usize, amp: f64, sigma: f64, radius: f64, kmax: i32, seed: u64) -> Windowed {
        Windowed {
            window: Separable::bump(dim, C64::new(amp, 0.0), &vec![0.0; dim], sigma, radius),
            inner: TrigPoly::random_real(dim, 4.0 * radius, kmax, seed),
        }
    }

    pub fn eval(&self, x: &[f64]) -> C64 {
        let w = self.window.eval(x);
        if w == C64::new(0.0, 0.0) {
            return w;
        }
        w * self.inner.eval(x)
    }

    pub fn sample(&self, grid: &Grid) -> ScalarField {
        ScalarField::from_fn(grid, |x| self.eval(x))
    }
}

/// Named coefficient families shared by tests and the CLI.
pub struct Families;

impl Families {
    /// Scalar windowed-Gaussian bump.
    pub fn gaussian_bump(dim: usize, amp: f64, sigma: f64, radius: f64) -> Separable {
        Separable::bump(dim, C64::new(amp, 0.0), &vec![0.0; dim], sigma, radius)
    }

    /// Symmetric matrix field: a constant anisotropy pattern times a bump.
    /// The pattern is diagonally dominant so the perturbation stays tame.
    pub fn anisotropic_bump(grid: &Grid, amp: f64, sigma: f64, radius: f64) -> SymMatrixField {
        let dim = grid.dim();
        let bump = Self::gaussian_bump(dim, amp, sigma, radius);
        SymMatrixField::from_fns(grid, |j, k, x| {
            let pattern = if j == k { 1.0 + 0.5 * j as f64 } else { 0.3 };
            bump.eval(x) * pattern
        })
    }

    /// Hessian family: `A_jk = d_j d_k p0` for a scalar bump `p0`.
    pub fn hessian(grid: &Grid, p0: &Separable) -> SymMatrixField {
        let dim = grid.dim();
        SymMatrixField::from_fns(grid, |j, k, x| {
            let mut order = vec![0u32; dim];
            order[j] += 1;
            order[k] += 1;
            p0.partial(&order).eval(x)
        })
    }

    /// Gradient family: `B = grad(phi0)` for a scalar bump `phi0`.
    pub fn gradient_field(grid: &Grid, phi0: &Separable) -> VectorField {
        let dim = grid.dim();
        VectorField::from_fns(grid, |c, x| {
            let mut order = vec![0u32; dim];
            order[c] = 1;
            phi0.partial(&order).eval(x)
        })
    }
}
