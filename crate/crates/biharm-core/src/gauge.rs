//! Gauge transformations of the third-order-perturbed bilaplacian.
//!
//! The ledger tracks the coefficients of
//!
//! ```text
//! M = lap^2 + sum_jkl C_jkl d_j d_k d_l + sum_jk A_jk d_j d_k + sum_j B_j d_j + q
//! ```
//!
//! written with plain derivatives `d_j`. The forward solver's operator uses
//! the self-adjoint convention `D_j = (1/i) d_j`; the two ledgers are mapped
//! by `A -> -A`, `B -> -iB`, `q -> q`, which leaves the discrete stencil
//! action unchanged.
//!
//! Conjugation by `e^Phi`, with `Phi` and its derivatives through order three
//! vanishing on the boundary, yields another operator of the same shape:
//! `M'(u e^Phi) = e^Phi M(u)`. [`gauge_transform`] evaluates the transformed
//! coefficients, with `g = grad Phi`, `H = hess Phi`:
//!
//! ```text
//! C'_jkl = C_jkl - (4/3) (g_j d_kl + g_k d_jl + g_l d_jk)
//! A'_jk  = A_jk + 4 g_j g_k - 4 H_jk + (2|g|^2 - 2 lap Phi) d_jk
//!          - 3 sum_l C_jkl g_l
//! B'_k   = B_k + 4 (lap Phi) g_k - 4 (grad lap Phi)_k + 8 sum_j g_j H_jk
//!          - 4 |g|^2 g_k - 2 sum_j g_j A_jk
//!          - 3 sum_ij C_ijk H_ij + 3 sum_ij C_ijk g_i g_j
//! q'     = q + (lap Phi)^2 - 2 |g|^2 lap Phi + 4 g . grad lap Phi
//!          - lap^2 Phi + 2 H:H - 4 gHg + |g|^4
//!          - <C, grad^3 Phi> + 3 <C, H (x) g> - <C, g (x) g (x) g>
//!          - A:H + (Ag).g - B.g
//! ```
//!
//! All contractions run over the full displayed index ranges; the full
//! symmetry of `C` makes the candidate index placements agree, which is
//! asserted as a test rather than assumed. The ledger was obtained by
//! matching `e^Phi M e^{-Phi}` term by term with computer algebra and is an
//! exact polynomial identity in any dimension; the frozen-oracle test below
//! pins twenty nodes of an independent symbolic evaluation.
//!
//! No derivative of the input coefficients appears in the transformation, so
//! the formulas are pointwise in the nodal coefficient values and the
//! derivatives of `Phi` through order four, which [`GaugeFunction`] carries
//! in closed form. `M` itself is only ever applied to manufactured fields
//! for verification; no boundary-value theory for it is claimed or used.

use crate::analytic::{Separable, TrigPoly, Windowed};
use crate::error::{BiharmError, Result};
use crate::field_core::deriv;
use crate::field_core::field::{sym_index, C64, ScalarField, SymMatrixField, VectorField};
use crate::field_core::grid::Grid;
use crate::field_core::mask::DomainMask;
use crate::tol;
use ndarray::{ArrayD, Dimension, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Sorted index triples `j <= k <= l` in lexicographic order; the packed
/// component layout of [`ThirdOrderCoefficient`].
pub fn sym3_triples(dim: usize) -> Vec<[usize; 3]> {
    let mut t = Vec::new();
    for j in 0..dim {
        for k in j..dim {
            for l in k..dim {
                t.push([j, k, l]);
            }
        }
    }
    t
}

pub fn sym3_len(dim: usize) -> usize {
    dim * (dim + 1) * (dim + 2) / 6
}

/// Packed position of the component `(j, k, l)` in any index order.
pub fn sym3_index(dim: usize, j: usize, k: usize, l: usize) -> usize {
    let mut s = [j, k, l];
    s.sort_unstable();
    sym3_triples(dim)
        .iter()
        .position(|t| *t == s)
        .expect("indices in range")
}

/// Number of distinct permutations of a sorted triple; the weight of each
/// packed component in a full ordered-index sum.
pub fn sym3_multiplicity(t: [usize; 3]) -> f64 {
    if t[0] == t[2] {
        1.0
    } else if t[0] == t[1] || t[1] == t[2] {
        3.0
    } else {
        6.0
    }
}

/// Fully symmetric third-order coefficient field, packed over sorted index
/// triples. Symmetry holds by construction: every index order reads the
/// same stored component.
#[derive(Debug, Clone)]
pub struct ThirdOrderCoefficient {
    pub grid: Grid,
    pub comps: Vec<ScalarField>,
}

impl ThirdOrderCoefficient {
    pub fn zeros(grid: &Grid) -> Self {
        ThirdOrderCoefficient {
            grid: grid.clone(),
            comps: vec![ScalarField::zeros(grid); sym3_len(grid.dim())],
        }
    }

    /// Build from a closure over sorted triples.
    pub fn from_fns(grid: &Grid, f: impl Fn(usize, usize, usize, &[f64]) -> C64) -> Self {
        let comps = sym3_triples(grid.dim())
            .into_iter()
            .map(|[j, k, l]| ScalarField::from_fn(grid, |x| f(j, k, l, x)))
            .collect();
        ThirdOrderCoefficient { grid: grid.clone(), comps }
    }

    /// Seeded random smooth components, compactly supported in the centered
    /// box of half-width `radius`.
    pub fn windowed_random(grid: &Grid, amp: f64, radius: f64, seed: u64) -> Self {
        let dim = grid.dim();
        let comps = (0..sym3_len(dim))
            .map(|t| {
                Windowed::random(dim, amp / (1.0 + t as f64), 0.6 * radius, radius, 2, seed + t as u64)
                    .sample(grid)
            })
            .collect();
        ThirdOrderCoefficient { grid: grid.clone(), comps }
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn at(&self, j: usize, k: usize, l: usize) -> &ScalarField {
        &self.comps[sym3_index(self.dim(), j, k, l)]
    }

    pub fn norm_max(&self) -> f64 {
        self.comps.iter().map(|f| f.norm_max()).fold(0.0, f64::max)
    }
}

/// Multi-indices of exact total order `m` with their multinomial weights
/// `m! / prod_a alpha_a!`; the expansion of a directional derivative
/// `(nu . grad)^m` over partial derivatives.
fn multi_indices(dim: usize, m: u32) -> Vec<(Vec<u32>, f64)> {
    fn fact(n: u32) -> f64 {
        (1..=n).map(|v| v as f64).product()
    }
    let mut out = Vec::new();
    let mut stack = vec![(Vec::new(), m)];
    while let Some((prefix, left)) = stack.pop() {
        if prefix.len() == dim - 1 {
            let mut alpha = prefix.clone();
            alpha.push(left);
            let weight = fact(m) / alpha.iter().map(|&a| fact(a)).product::<f64>();
            out.push((alpha, weight));
        } else {
            for a in 0..=left {
                let mut p = prefix.clone();
                p.push(a);
                stack.push((p, left - a));
            }
        }
    }
    out.sort_by(|x, y| x.0.cmp(&y.0));
    out
}

/// Boundary-flat gauge generator `Phi`, a real sum of windowed monomials
/// `prod_a (R^2 - u_a^2)^4 u_a^{p_a} / R^8` centered at the origin. The
/// quartic window vanishes to fourth order at `|u_a| = R`, so `Phi` and its
/// derivatives through order three vanish on the support box and outside it;
/// derivatives through order four stay in closed form.
#[derive(Debug, Clone)]
pub struct GaugeFunction {
    pub dim: usize,
    pub radius: f64,
    pub terms: Vec<Separable>,
}

impl GaugeFunction {
    /// Zero gauge.
    pub fn zero(dim: usize, radius: f64) -> Self {
        GaugeFunction { dim, radius, terms: Vec::new() }
    }

    /// Windowed polynomial with the given real monomial coefficients.
    pub fn windowed_poly(dim: usize, radius: f64, terms: &[(f64, Vec<u32>)]) -> Self {
        let origin = vec![0.0; dim];
        let terms = terms
            .iter()
            .map(|(amp, powers)| {
                Separable::windowed_monomial(dim, C64::new(*amp, 0.0), &origin, radius, powers)
            })
            .collect();
        GaugeFunction { dim, radius, terms }
    }

    /// Seeded random gauge: all monomials of total degree at most two, with
    /// amplitudes shrinking in the degree.
    pub fn random(dim: usize, radius: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut terms = Vec::new();
        for total in 0..=2u32 {
            for (powers, _) in multi_indices(dim, total) {
                let amp = rng.gen_range(-0.5..0.5) / (1.0 + total as f64);
                terms.push((amp, powers));
            }
        }
        Self::windowed_poly(dim, radius, &terms)
    }

    /// The same gauge with all amplitudes multiplied by a real factor.
    pub fn scaled(&self, factor: f64) -> GaugeFunction {
        let terms = self
            .terms
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.amp *= factor;
                t
            })
            .collect();
        GaugeFunction { dim: self.dim, radius: self.radius, terms }
    }

    /// Sum of two gauges on the same support.
    pub fn plus(&self, other: &GaugeFunction) -> GaugeFunction {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        GaugeFunction { dim: self.dim, radius: self.radius.max(other.radius), terms }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.eval(x).re).sum()
    }

    /// Exact mixed partial of the given multi-order at a point.
    pub fn partial_at(&self, order: &[u32], x: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.partial(order).eval(x).re).sum()
    }

    /// Exact mixed partial sampled on a grid.
    pub fn partial_field(&self, grid: &Grid, order: &[u32]) -> ScalarField {
        let parts: Vec<Separable> = self.terms.iter().map(|t| t.partial(order)).collect();
        ScalarField::from_fn(grid, |x| parts.iter().map(|p| p.eval(x)).sum())
    }

    pub fn sample(&self, grid: &Grid) -> ScalarField {
        ScalarField::from_fn(grid, |x| C64::new(self.eval(x), 0.0))
    }

    /// Largest trace of `Phi`, `grad Phi`, `lap Phi`, `grad lap Phi` over the
    /// nodes not strictly inside the mask, relative to the interior scale.
    pub fn flatness_defect(&self, mask: &DomainMask) -> f64 {
        let grid = &mask.grid;
        let d = grid.dim();
        let mut orders: Vec<Vec<u32>> = vec![vec![0; d]];
        for a in 0..d {
            let mut e = vec![0; d];
            e[a] = 1;
            orders.push(e);
        }
        // lap Phi and its gradient, assembled from pure partials
        let mut lap_orders = Vec::new();
        for b in 0..d {
            let mut e = vec![0; d];
            e[b] = 2;
            lap_orders.push(e);
        }
        let mut glap_orders = Vec::new();
        for a in 0..d {
            for b in 0..d {
                let mut e = vec![0; d];
                e[b] += 2;
                e[a] += 1;
                glap_orders.push(e);
            }
        }
        let mut peak: f64 = 0.0;
        let mut defect: f64 = 0.0;
        let shape = grid.shape.clone();
        for (idx, _) in ArrayD::<bool>::from_elem(IxDyn(&shape), false).indexed_iter() {
            let idx = idx.slice().to_vec();
            let x = grid.node(&idx);
            let v = self.eval(&x).abs();
            peak = peak.max(v);
            if mask.inside[IxDyn(&idx)] {
                continue;
            }
            let mut worst = v;
            for o in &orders[1..] {
                worst = worst.max(self.partial_at(o, &x).abs());
            }
            let lap: f64 = lap_orders.iter().map(|o| self.partial_at(o, &x)).sum();
            worst = worst.max(lap.abs());
            for a in 0..d {
                let ga: f64 = glap_orders[a * d..(a + 1) * d]
                    .iter()
                    .map(|o| self.partial_at(o, &x))
                    .sum();
                worst = worst.max(ga.abs());
            }
            defect = defect.max(worst);
        }
        defect / (1.0 + peak)
    }

    /// Error unless the gauge is boundary-flat on the mask.
    pub fn validate(&self, mask: &DomainMask) -> Result<()> {
        let defect = self.flatness_defect(mask);
        if defect > tol::ROUND_OFF {
            return Err(BiharmError::Parameter(format!(
                "gauge function is not boundary-flat: trace defect {defect:.3e}"
            )));
        }
        Ok(())
    }
}

fn check_same_grid(grid: &Grid, other: &Grid) -> Result<()> {
    if grid.shape != other.shape {
        return Err(BiharmError::ShapeMismatch {
            expected: grid.shape.clone(),
            got: other.shape.clone(),
        });
    }
    Ok(())
}

/// Transformed coefficients of the conjugated operator `e^Phi M e^{-Phi}`,
/// evaluated pointwise from the closed-form derivatives of `Phi`.
pub fn gauge_transform(
    c: &ThirdOrderCoefficient,
    a: &SymMatrixField,
    b: &VectorField,
    q: &ScalarField,
    phi: &GaugeFunction,
) -> Result<(ThirdOrderCoefficient, SymMatrixField, VectorField, ScalarField)> {
    let grid = &q.grid;
    let d = grid.dim();
    check_same_grid(grid, &c.grid)?;
    check_same_grid(grid, &a.grid)?;
    check_same_grid(grid, &b.grid)?;
    if phi.dim != d {
        return Err(BiharmError::Parameter(format!(
            "gauge dimension {} does not match grid dimension {d}",
            phi.dim
        )));
    }

    let real_samples = |order: &[u32]| -> Vec<f64> {
        phi.partial_field(grid, order)
            .data
            .iter()
            .map(|v| v.re)
            .collect()
    };
    let unit = |a: usize, p: u32| -> Vec<u32> {
        let mut e = vec![0; d];
        e[a] = p;
        e
    };
    let pair = |j: usize, k: usize| -> Vec<u32> {
        let mut e = vec![0; d];
        e[j] += 1;
        e[k] += 1;
        e
    };

    // derivative tables of Phi: gradient, Hessian, laplacian and its
    // gradient, bilaplacian, third partials
    let gt: Vec<Vec<f64>> = (0..d).map(|a| real_samples(&unit(a, 1))).collect();
    let ht: Vec<Vec<f64>> = (0..d)
        .flat_map(|j| (j..d).map(move |k| (j, k)))
        .map(|(j, k)| real_samples(&pair(j, k)))
        .collect();
    let n = gt[0].len();
    let mut lapt = vec![0.0; n];
    for a in 0..d {
        let haa = &ht[sym_index(d, a, a)];
        for s in 0..n {
            lapt[s] += haa[s];
        }
    }
    let glapt: Vec<Vec<f64>> = (0..d)
        .map(|a| {
            let mut acc = vec![0.0; n];
            for b in 0..d {
                let mut e = unit(b, 2);
                e[a] += 1;
                let part = real_samples(&e);
                for s in 0..n {
                    acc[s] += part[s];
                }
            }
            acc
        })
        .collect();
    let mut lap2t = vec![0.0; n];
    for aa in 0..d {
        for bb in 0..d {
            let mut e = unit(aa, 2);
            e[bb] += 2;
            let part = real_samples(&e);
            for s in 0..n {
                lap2t[s] += part[s];
            }
        }
    }
    let triples = sym3_triples(d);
    let t3t: Vec<Vec<f64>> = triples
        .iter()
        .map(|&[j, k, l]| {
            let mut e = vec![0; d];
            e[j] += 1;
            e[k] += 1;
            e[l] += 1;
            real_samples(&e)
        })
        .collect();

    let cs: Vec<&[C64]> = c.comps.iter().map(|f| f.data.as_slice().expect("layout")).collect();
    let as_: Vec<&[C64]> = a.comps.iter().map(|f| f.data.as_slice().expect("layout")).collect();
    let bs: Vec<&[C64]> = b.comps.iter().map(|f| f.data.as_slice().expect("layout")).collect();
    let qs: &[C64] = q.data.as_slice().expect("layout");

    let zero = C64::new(0.0, 0.0);
    let mut cp = vec![vec![zero; n]; sym3_len(d)];
    let mut ap = vec![vec![zero; n]; as_.len()];
    let mut bp = vec![vec![zero; n]; d];
    let mut qp = vec![zero; n];

    for s in 0..n {
        let gv: Vec<f64> = (0..d).map(|a| gt[a][s]).collect();
        let g2: f64 = gv.iter().map(|g| g * g).sum();
        let lap = lapt[s];
        let hv = |j: usize, k: usize| ht[sym_index(d, j, k)][s];
        let c3 = |j: usize, k: usize, l: usize| cs[sym3_index(d, j, k, l)][s];
        let av = |j: usize, k: usize| as_[sym_index(d, j, k)][s];
        let t3 = |j: usize, k: usize, l: usize| t3t[sym3_index(d, j, k, l)][s];
        let kd = |j: usize, k: usize| if j == k { 1.0 } else { 0.0 };

        for (ti, &[j, k, l]) in triples.iter().enumerate() {
            let s3 = gv[j] * kd(k, l) + gv[k] * kd(j, l) + gv[l] * kd(j, k);
            cp[ti][s] = c3(j, k, l) - (4.0 / 3.0) * s3;
        }

        for j in 0..d {
            for k in j..d {
                let cg: C64 = (0..d).map(|l| c3(j, k, l) * gv[l]).sum();
                let mut v = av(j, k) + 4.0 * gv[j] * gv[k] - 4.0 * hv(j, k) - cg * 3.0;
                if j == k {
                    v += 2.0 * g2 - 2.0 * lap;
                }
                ap[sym_index(d, j, k)][s] = v;
            }
        }

        for k in 0..d {
            let gh: f64 = (0..d).map(|j| gv[j] * hv(j, k)).sum();
            let ga: C64 = (0..d).map(|j| av(j, k) * gv[j]).sum();
            let mut ch = zero;
            let mut cgg = zero;
            for i in 0..d {
                for j in 0..d {
                    ch += c3(i, j, k) * hv(i, j);
                    cgg += c3(i, j, k) * (gv[i] * gv[j]);
                }
            }
            bp[k][s] = bs[k][s] + 4.0 * lap * gv[k] - 4.0 * glapt[k][s] + 8.0 * gh
                - 4.0 * g2 * gv[k]
                - ga * 2.0
                - ch * 3.0
                + cgg * 3.0;
        }

        let mut hh = 0.0;
        let mut ghg = 0.0;
        let mut ah = zero;
        let mut agg = zero;
        for j in 0..d {
            for k in 0..d {
                let h = hv(j, k);
                hh += h * h;
                ghg += gv[j] * h * gv[k];
                ah += av(j, k) * h;
                agg += av(j, k) * (gv[j] * gv[k]);
            }
        }
        let ggl: f64 = (0..d).map(|a| gv[a] * glapt[a][s]).sum();
        let mut ct = zero;
        let mut chg = zero;
        let mut cggg = zero;
        for j in 0..d {
            for k in 0..d {
                for l in 0..d {
                    let cv = c3(j, k, l);
                    ct += cv * t3(j, k, l);
                    chg += cv * (hv(j, k) * gv[l]);
                    cggg += cv * (gv[j] * gv[k] * gv[l]);
                }
            }
        }
        let bg: C64 = (0..d).map(|k| bs[k][s] * gv[k]).sum();
        qp[s] = qs[s] + lap * lap - 2.0 * g2 * lap + 4.0 * ggl - lap2t[s] + 2.0 * hh
            - 4.0 * ghg
            + g2 * g2
            - ct
            + chg * 3.0
            - cggg
            - ah
            + agg
            - bg;
    }

    let shape = grid.shape.clone();
    let rebuild = |v: Vec<C64>| -> ScalarField {
        ScalarField {
            grid: grid.clone(),
            data: ArrayD::from_shape_vec(IxDyn(&shape), v).expect("shape"),
        }
    };
    Ok((
        ThirdOrderCoefficient {
            grid: grid.clone(),
            comps: cp.into_iter().map(rebuild).collect(),
        },
        SymMatrixField {
            grid: grid.clone(),
            comps: ap.into_iter().map(rebuild).collect(),
        },
        VectorField {
            grid: grid.clone(),
            comps: bp.into_iter().map(rebuild).collect(),
        },
        rebuild(qp),
    ))
}

/// Third partial stencil for a sorted index triple, composed from the
/// second-order building blocks: the compact second difference on repeated
/// axes and centered first differences elsewhere.
fn third_derivative(u: &ScalarField, j: usize, k: usize, l: usize) -> ScalarField {
    if j == k && k == l {
        deriv::diff1(&deriv::diff2(u, j), j)
    } else if j == k {
        deriv::diff1(&deriv::diff2(u, j), l)
    } else if k == l {
        deriv::diff1(&deriv::diff2(u, k), j)
    } else {
        deriv::diff1(&deriv::diff1(&deriv::diff1(u, j), k), l)
    }
}

/// Apply the plain-derivative operator `M` with second-order stencils.
/// Packed components enter with their permutation multiplicities, matching
/// the full ordered-index sums of the operator.
pub fn apply_third_order(
    c: &ThirdOrderCoefficient,
    a: &SymMatrixField,
    b: &VectorField,
    q: &ScalarField,
    u: &ScalarField,
) -> Result<ScalarField> {
    let grid = &u.grid;
    check_same_grid(grid, &q.grid)?;
    let d = grid.dim();
    let mut out = deriv::bilaplacian(u);
    for &[j, k, l] in sym3_triples(d).iter() {
        let comp = c.at(j, k, l);
        if comp.norm_max() == 0.0 {
            continue;
        }
        let mult = C64::new(sym3_multiplicity([j, k, l]), 0.0);
        out.axpy(mult, &comp.hadamard(&third_derivative(u, j, k, l))?)?;
    }
    for j in 0..d {
        for k in j..d {
            let comp = a.at(j, k);
            if comp.norm_max() == 0.0 {
                continue;
            }
            let der = if j == k {
                deriv::diff2(u, j)
            } else {
                deriv::diff1(&deriv::diff1(u, j), k)
            };
            let mult = C64::new(if j == k { 1.0 } else { 2.0 }, 0.0);
            out.axpy(mult, &comp.hadamard(&der)?)?;
        }
    }
    for (k, comp) in b.comps.iter().enumerate() {
        if comp.norm_max() == 0.0 {
            continue;
        }
        out.axpy(C64::new(1.0, 0.0), &comp.hadamard(&deriv::diff1(u, k))?)?;
    }
    out.axpy(C64::new(1.0, 0.0), &q.hadamard(u)?)?;
    Ok(out)
}

/// L2 norm over the uniform-accuracy interior: nodes at physical distance
/// at least [`tol::INTERIOR_MARGIN`] times the smallest extent from every
/// face. The excluded layers are the ones where composed one-sided stencils,
/// while consistent for solves, are not uniformly second-order as pointwise
/// residuals; a margin fixed in physical units keeps defect norms comparable
/// across refinements.
fn l2_margin(f: &ScalarField) -> f64 {
    let grid = &f.grid;
    let extent: Vec<f64> = grid
        .shape
        .iter()
        .zip(&grid.dx)
        .map(|(&nn, &dx)| (nn - 1) as f64 * dx)
        .collect();
    let margin = tol::INTERIOR_MARGIN * extent.iter().cloned().fold(f64::INFINITY, f64::min);
    let dv: f64 = grid.dx.iter().product();
    let mut acc = 0.0;
    for (idx, v) in f.data.indexed_iter() {
        let x = grid.node(idx.slice());
        let dist = x
            .iter()
            .enumerate()
            .map(|(a, &xa)| (xa - grid.lo[a]).min(grid.lo[a] + extent[a] - xa))
            .fold(f64::INFINITY, f64::min);
        if dist >= margin {
            acc += v.norm_sqr();
        }
    }
    (acc * dv).sqrt()
}

/// Relative interior defect of the conjugation identity:
/// `|| M'(u e^Phi) - e^Phi M(u) || / || u e^Phi ||` in the margin-restricted
/// interior L2 norm of [`l2_margin`].
/// For `u` with `M(u) = 0` this is the residual of the transformed operator
/// on the gauged field; second-order stencils make it `O(dx^2)`.
pub fn verify_conjugation_identity(
    u: &ScalarField,
    c: &ThirdOrderCoefficient,
    a: &SymMatrixField,
    b: &VectorField,
    q: &ScalarField,
    phi: &GaugeFunction,
    mask: &DomainMask,
) -> Result<f64> {
    phi.validate(mask)?;
    let grid = &u.grid;
    check_same_grid(grid, &mask.grid)?;
    let ephi = ScalarField::from_fn(grid, |x| C64::new(phi.eval(x).exp(), 0.0));
    let v = u.hadamard(&ephi)?;
    let (cp, ap, bp, qp) = gauge_transform(c, a, b, q, phi)?;
    let lhs = apply_third_order(&cp, &ap, &bp, &qp, &v)?;
    let rhs = ephi.hadamard(&apply_third_order(c, a, b, q, u)?)?;
    let den = l2_margin(&v);
    if den == 0.0 {
        return Err(BiharmError::Parameter("zero field has no relative defect".into()));
    }
    Ok(l2_margin(&lhs.sub(&rhs)?) / den)
}

/// Constructive check that a gauge invisible to the operator is trivial:
/// with `C = 0` the transformed third-order part is `-(4/3) sym(grad Phi x I)`,
/// so invisibility forces `grad Phi = 0`, and boundary-flatness then forces
/// `Phi = 0`. Returns true iff `||grad Phi|| <= tol` implies
/// `||Phi|| <= tol * diam` discretely, rebuilding `Phi` by trapezoid
/// integration of its gradient along axis-0 grid lines from the boundary.
/// A field that is not boundary-flat returns false outright.
pub fn verify_no_gauge_when_c_zero(
    phi: &ScalarField,
    mask: &DomainMask,
    tol: f64,
) -> Result<bool> {
    let grid = &phi.grid;
    check_same_grid(grid, &mask.grid)?;
    let scale = 1.0 + phi.norm_max();
    for (idx, _) in &mask.normals {
        if phi.data[IxDyn(idx)].norm() > tol::ROUND_OFF * scale {
            return Ok(false);
        }
    }
    let grads: Vec<ScalarField> = (0..grid.dim()).map(|a| deriv::diff1(phi, a)).collect();
    let gmax = grads.iter().map(|g| g.norm_max()).fold(0.0, f64::max);
    let diam: f64 = grid
        .shape
        .iter()
        .zip(&grid.dx)
        .map(|(&nn, &dx)| ((nn - 1) as f64 * dx).powi(2))
        .sum::<f64>()
        .sqrt();
    if gmax > tol {
        // a visible gauge motion: the implication holds with this witness
        return Ok(true);
    }
    // integrate d_0 Phi along axis-0 lines from the low face
    let mut rebuilt = ArrayD::from_elem(IxDyn(&grid.shape), C64::new(0.0, 0.0));
    let g0 = &grads[0].data;
    let n0 = grid.shape[0];
    let dx0 = grid.dx[0];
    let shape = grid.shape.clone();
    for (idx, _) in ArrayD::<bool>::from_elem(IxDyn(&shape), false).indexed_iter() {
        let idx = idx.slice().to_vec();
        if idx[0] != 0 {
            continue;
        }
        let mut lower = phi.data[IxDyn(&idx)];
        rebuilt[IxDyn(&idx)] = lower;
        let mut here = idx.clone();
        for i in 1..n0 {
            let mut prev = here.clone();
            prev[0] = i - 1;
            here[0] = i;
            lower += (g0[IxDyn(&prev)] + g0[IxDyn(&here)]) * (0.5 * dx0);
            rebuilt[IxDyn(&here)] = lower;
        }
    }
    let slack = tol::ROUND_OFF * scale * (1.0 + diam);
    let built_max = rebuilt.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let mismatch = phi
        .data
        .iter()
        .zip(rebuilt.iter())
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    Ok(built_max <= tol * diam + slack && mismatch <= tol * diam + slack)
}

/// Largest relative defect, over boundary nodes and derivative orders zero
/// through three, between the normal traces of `u e^Phi` and those of `u`.
/// Both sides are evaluated analytically by the product rule, so for a
/// boundary-flat gauge the defect is round-off; this is the discrete content
/// of "conjugation preserves the Cauchy data".
pub fn trace_invariance_defect(
    u: &TrigPoly,
    phi: &GaugeFunction,
    mask: &DomainMask,
) -> Result<f64> {
    let grid = &mask.grid;
    let d = grid.dim();
    if phi.dim != d {
        return Err(BiharmError::Parameter("gauge dimension mismatch".into()));
    }
    // precompute partials of u and Phi for all orders up to three
    let mut u_parts: Vec<Vec<(Vec<u32>, f64, TrigPoly)>> = Vec::new();
    let mut phi_parts: Vec<Vec<(Vec<u32>, f64, Vec<Separable>)>> = Vec::new();
    for m in 0..=3u32 {
        let mut up = Vec::new();
        let mut pp = Vec::new();
        for (alpha, w) in multi_indices(d, m) {
            up.push((alpha.clone(), w, u.partial(&alpha)));
            pp.push((
                alpha.clone(),
                w,
                phi.terms.iter().map(|t| t.partial(&alpha)).collect(),
            ));
        }
        u_parts.push(up);
        phi_parts.push(pp);
    }
    let mut defect: f64 = 0.0;
    for (idx, nu) in &mask.normals {
        let x = grid.node(idx);
        let nu_pow = |alpha: &[u32]| -> f64 {
            alpha
                .iter()
                .enumerate()
                .map(|(a, &p)| nu[a].powi(p as i32))
                .product()
        };
        let mut un = [C64::new(0.0, 0.0); 4];
        let mut pn = [0.0f64; 4];
        for m in 0..=3usize {
            for (alpha, w, part) in &u_parts[m] {
                un[m] += part.eval(&x) * (*w * nu_pow(alpha));
            }
            for (alpha, w, parts) in &phi_parts[m] {
                let v: f64 = parts.iter().map(|p| p.eval(&x).re).sum();
                pn[m] += v * *w * nu_pow(alpha);
            }
        }
        // directional derivatives of e^Phi via the chain rule
        let e0 = pn[0].exp();
        let e = [
            e0,
            pn[1] * e0,
            (pn[2] + pn[1] * pn[1]) * e0,
            (pn[3] + 3.0 * pn[2] * pn[1] + pn[1].powi(3)) * e0,
        ];
        let binom = [[1.0; 4], [1.0, 1.0, 0.0, 0.0], [1.0, 2.0, 1.0, 0.0], [1.0, 3.0, 3.0, 1.0]];
        for m in 0..=3usize {
            let mut vm = C64::new(0.0, 0.0);
            for i in 0..=m {
                vm += un[i] * (binom[m][m - i] * e[m - i]);
            }
            let rel = (vm - un[m]).norm() / (1.0 + un[m].norm());
            defect = defect.max(rel);
        }
    }
    Ok(defect)
}
