//! Forward Navier problem for the perturbed biharmonic operator and its
//! boundary data maps.
//!
//! The fourth-order problem L u = rhs with Navier data (u, -Lap u) on the
//! boundary is split into a coupled pair of second-order equations in
//! (u, w = -Lap u), so boundary conditions are Dirichlet-type on each block
//! and no wide one-sided fourth-order stencils appear:
//!
//! ```text
//!   -Lap_h u - w                  = 0        (interior)
//!   -Lap_h w + pert(u)            = rhs      (interior)
//!    u = f0,  w = f1              (boundary)
//! ```
//!
//! with `pert(u) = sum A_jk D_j D_k u + sum B_j D_j u + q u`, `D_j` the
//! self-adjoint derivative `(1/i) d_j`. One sparse LU factorization per
//! coefficient set serves every boundary datum; DN-map columns reuse it.
//!
//! DN rows are (face, node) pairs: a node on an edge of the box contributes
//! once per adjacent face with that face's outward normal and trapezoid
//! weight. This keeps the discrete surface quadrature second-order accurate,
//! which the Green-pairing identity needs.

use crate::analytic::Windowed;
use crate::error::{BiharmError, Result};
use crate::field_core::deriv;
use crate::field_core::field::{C64, ScalarField, SymMatrixField, VectorField, sym_index};
use crate::field_core::grid::Grid;
use crate::field_core::mask::DomainMask;
use crate::linalg::SparseLu;
use ndarray::{ArrayD, Dimension, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

/// Second-, first-, and zeroth-order perturbation coefficients with their
/// common support region. Invariant: A, B, q vanish identically outside the
/// inside region of `support` (compact support), A symmetric node-wise.
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    pub a: SymMatrixField,
    pub b: VectorField,
    pub q: ScalarField,
    pub support: DomainMask,
}

impl CoefficientSet {
    pub fn new(
        a: SymMatrixField,
        b: VectorField,
        q: ScalarField,
        support: DomainMask,
    ) -> Result<Self> {
        let set = CoefficientSet { a, b, q, support };
        set.validate()?;
        Ok(set)
    }

    pub fn zero(grid: &Grid) -> Result<Self> {
        Ok(CoefficientSet {
            a: SymMatrixField::zeros(grid),
            b: VectorField::zeros(grid),
            q: ScalarField::zeros(grid),
            support: DomainMask::boxed(grid)?,
        })
    }

    /// Compactly supported random smooth coefficients, seeded.
    pub fn windowed_random(grid: &Grid, amp: f64, radius: f64, seed: u64) -> Result<Self> {
        let dim = grid.dim();
        let sigma = 0.6 * radius;
        let mk = |s: u64| Windowed::random(dim, amp, sigma, radius, 2, s);
        let a = {
            let gens: Vec<Windowed> = (0..crate::field_core::field::sym_len(dim))
                .map(|i| mk(seed.wrapping_add(i as u64)))
                .collect();
            SymMatrixField::from_fns(grid, |j, k, x| gens[sym_index(dim, j, k)].eval(x))
        };
        let b = {
            let gens: Vec<Windowed> = (0..dim).map(|i| mk(seed.wrapping_add(100 + i as u64))).collect();
            VectorField::from_fns(grid, |c, x| gens[c].eval(x))
        };
        let q = mk(seed.wrapping_add(200)).sample(grid);
        CoefficientSet::new(a, b, q, DomainMask::boxed(grid)?)
    }

    /// Checks the compact-support invariant: no coefficient value outside
    /// the inside region exceeds round-off relative to the overall scale.
    pub fn validate(&self) -> Result<()> {
        let scale = self.a.norm_l2() + self.b.norm_l2() + self.q.norm_l2();
        if scale == 0.0 {
            return Ok(());
        }
        let mut worst: f64 = 0.0;
        let mut check = |f: &ScalarField| {
            for (idx, v) in f.data.indexed_iter() {
                if !self.support.inside[idx.slice()] {
                    worst = worst.max(v.norm());
                }
            }
        };
        for j in 0..self.a.dim() {
            for k in j..self.a.dim() {
                check(self.a.at(j, k));
            }
        }
        for c in &self.b.comps {
            check(c);
        }
        check(&self.q);
        if worst > 1e-12 * scale {
            return Err(BiharmError::Inconsistent(format!(
                "coefficients leak outside the support region: max outside value {worst:.3e}"
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> &Grid {
        &self.q.grid
    }
}

/// Navier traces (u, -Lap u) on the boundary, aligned with the boundary-node
/// order of the domain mask.
#[derive(Debug, Clone)]
pub struct NavierBoundaryData {
    pub f0: Vec<C64>,
    pub f1: Vec<C64>,
}

impl NavierBoundaryData {
    pub fn zero(mask: &DomainMask) -> Self {
        let n = mask.boundary_count();
        NavierBoundaryData { f0: vec![C64::new(0.0, 0.0); n], f1: vec![C64::new(0.0, 0.0); n] }
    }

    /// Traces sampled from closures of the node position.
    pub fn from_fns(
        mask: &DomainMask,
        f0: impl Fn(&[f64]) -> C64,
        f1: impl Fn(&[f64]) -> C64,
    ) -> Self {
        let mut d = Self::zero(mask);
        for (slot, (idx, _)) in mask.normals.iter().enumerate() {
            let x = mask.grid.node(idx);
            d.f0[slot] = f0(&x);
            d.f1[slot] = f1(&x);
        }
        d
    }

    pub fn scale(&self, c: C64) -> Self {
        NavierBoundaryData {
            f0: self.f0.iter().map(|v| v * c).collect(),
            f1: self.f1.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        NavierBoundaryData {
            f0: self.f0.iter().zip(&other.f0).map(|(a, b)| a + b).collect(),
            f1: self.f1.iter().zip(&other.f1).map(|(a, b)| a + b).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Trace {
    F0,
    F1,
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Interior(usize),
    Boundary(usize),
    Outside,
}

/// Discrete coupled operator with boundary-lifting bookkeeping.
pub struct AssembledOperator {
    pub grid: Grid,
    pub mask: DomainMask,
    pub n_interior: usize,
    pub interior_nodes: Vec<Vec<usize>>,
    interior_index: ArrayD<i64>,
    boundary_index: ArrayD<i64>,
    triplets: Vec<(usize, usize, C64)>,
    lifts: Vec<(usize, usize, C64, Trace)>,
}

impl AssembledOperator {
    fn classify(&self, idx: &[usize]) -> Slot {
        let i = self.interior_index[IxDyn(idx)];
        if i >= 0 {
            return Slot::Interior(i as usize);
        }
        let b = self.boundary_index[IxDyn(idx)];
        if b >= 0 {
            return Slot::Boundary(b as usize);
        }
        Slot::Outside
    }

    fn boundary_slot(&self, idx: &[usize]) -> Option<usize> {
        let b = self.boundary_index[IxDyn(idx)];
        (b >= 0).then_some(b as usize)
    }
}

fn offset(idx: &[usize], shape: &[usize], axis: usize, delta: isize) -> Option<Vec<usize>> {
    let v = idx[axis] as isize + delta;
    if v < 0 || v as usize >= shape[axis] {
        return None;
    }
    let mut out = idx.to_vec();
    out[axis] = v as usize;
    Some(out)
}

/// Builds the coupled sparse system for the given coefficients on their
/// support mask. Unknown layout: interior u values first, then interior w.
pub fn assemble_operator(coeffs: &CoefficientSet) -> Result<AssembledOperator> {
    let grid = coeffs.grid().clone();
    if grid.periodic {
        return Err(BiharmError::Inconsistent(
            "Navier assembly needs a bounded grid, not a periodic cell".into(),
        ));
    }
    let mask = coeffs.support.clone();
    let dim = grid.dim();
    let shape = grid.shape.clone();
    for (a, &n) in shape.iter().enumerate() {
        if n < 6 {
            return Err(BiharmError::GridTooSmall(format!(
                "axis {a} has {n} nodes; the coupled stencil needs at least 6"
            )));
        }
    }

    let mut interior_index = ArrayD::from_elem(IxDyn(&shape), -1i64);
    let mut interior_nodes = Vec::new();
    for (idx, &ins) in mask.inside.indexed_iter() {
        if ins {
            interior_index[&idx] = interior_nodes.len() as i64;
            interior_nodes.push(idx.slice().to_vec());
        }
    }
    let mut boundary_index = ArrayD::from_elem(IxDyn(&shape), -1i64);
    for (slot, (idx, _)) in mask.normals.iter().enumerate() {
        boundary_index[IxDyn(idx)] = slot as i64;
    }
    let n = interior_nodes.len();

    let mut op = AssembledOperator {
        grid: grid.clone(),
        mask,
        n_interior: n,
        interior_nodes,
        interior_index,
        boundary_index,
        triplets: Vec::new(),
        lifts: Vec::new(),
    };

    // couple row to the u (block 0) or w (block 1) value at a node
    let mut couple = |op: &mut AssembledOperator,
                      row: usize,
                      idx: &[usize],
                      block: usize,
                      coeff: C64|
     -> Result<()> {
        if coeff == C64::new(0.0, 0.0) {
            return Ok(());
        }
        match op.classify(idx) {
            Slot::Interior(s) => op.triplets.push((row, block * n + s, coeff)),
            Slot::Boundary(b) => {
                let trace = if block == 0 { Trace::F0 } else { Trace::F1 };
                op.lifts.push((row, b, coeff, trace));
            }
            Slot::Outside => {
                return Err(BiharmError::Inconsistent(format!(
                    "stencil at {idx:?} leaves the domain"
                )));
            }
        }
        Ok(())
    };

    for s in 0..n {
        let idx = op.interior_nodes[s].clone();
        let row_u = s; // -Lap u - w = 0
        let row_w = n + s; // -Lap w + pert(u) = rhs

        let mut diag = C64::new(0.0, 0.0);
        for a in 0..dim {
            let inv = 1.0 / (grid.dx[a] * grid.dx[a]);
            diag += C64::new(2.0 * inv, 0.0);
            for d in [-1isize, 1] {
                let nb = offset(&idx, &shape, a, d).ok_or_else(|| {
                    BiharmError::Inconsistent("interior node at grid edge".into())
                })?;
                couple(&mut op, row_u, &nb, 0, C64::new(-inv, 0.0))?;
                couple(&mut op, row_w, &nb, 1, C64::new(-inv, 0.0))?;
            }
        }
        couple(&mut op, row_u, &idx, 0, diag)?;
        couple(&mut op, row_u, &idx, 1, C64::new(-1.0, 0.0))?;
        couple(&mut op, row_w, &idx, 1, diag)?;

        // pert(u): A_jk D_j D_k with D_j D_k = -d_j d_k, B_j D_j = -i B_j d_j, q
        let mut diag_u = coeffs.q.data[IxDyn(&idx)];
        for j in 0..dim {
            for k in j..dim {
                let a_jk = coeffs.a.at(j, k).data[IxDyn(&idx)];
                if a_jk == C64::new(0.0, 0.0) {
                    continue;
                }
                let mult = if j == k { 1.0 } else { 2.0 };
                if j == k {
                    let inv = 1.0 / (grid.dx[j] * grid.dx[j]);
                    diag_u += a_jk * 2.0 * inv;
                    for d in [-1isize, 1] {
                        let nb = offset(&idx, &shape, j, d).unwrap();
                        couple(&mut op, row_w, &nb, 0, -a_jk * inv)?;
                    }
                } else {
                    let inv = mult / (4.0 * grid.dx[j] * grid.dx[k]);
                    for (dj, dk, sign) in
                        [(1, 1, -1.0), (1, -1, 1.0), (-1, 1, 1.0), (-1, -1, -1.0)]
                    {
                        let nb = offset(&idx, &shape, j, dj)
                            .and_then(|m| offset(&m, &shape, k, dk))
                            .ok_or_else(|| {
                                BiharmError::Inconsistent(
                                    "cross stencil leaves the grid inside the support".into(),
                                )
                            })?;
                        couple(&mut op, row_w, &nb, 0, a_jk * C64::new(sign * inv, 0.0))?;
                    }
                }
            }
        }
        for j in 0..dim {
            let b_j = coeffs.b.comps[j].data[IxDyn(&idx)];
            if b_j == C64::new(0.0, 0.0) {
                continue;
            }
            let inv = 1.0 / (2.0 * grid.dx[j]);
            for d in [-1isize, 1] {
                let nb = offset(&idx, &shape, j, d).unwrap();
                // (1/i) d_j = -i d_j
                let c = b_j * C64::new(0.0, -(d as f64) * inv);
                couple(&mut op, row_w, &nb, 0, c)?;
            }
        }
        couple(&mut op, row_w, &idx, 0, diag_u)?;
    }
    Ok(op)
}

/// Factorized forward solver; reuse across boundary data.
pub struct NavierSolver {
    pub op: AssembledOperator,
    lu: SparseLu,
}

/// Full state of one forward solve: u and its negative Laplacian.
pub struct NavierSolution {
    pub u: ScalarField,
    pub w: ScalarField,
}

impl NavierSolver {
    pub fn new(coeffs: &CoefficientSet) -> Result<Self> {
        coeffs.validate()?;
        let op = assemble_operator(coeffs)?;
        let lu = SparseLu::new(2 * op.n_interior, &op.triplets)?;
        // backward-stable LU hides exact eigenvalue hits behind small
        // residuals; a condition probe catches them
        let kappa = lu.condition_probe();
        if kappa > 1e12 {
            return Err(BiharmError::SingularOperator(format!(
                "zero is a discrete eigenvalue (condition estimate {kappa:.2e})"
            )));
        }
        Ok(NavierSolver { op, lu })
    }

    pub fn solve_full(&self, bc: &NavierBoundaryData, rhs: &ScalarField) -> Result<NavierSolution> {
        let n = self.op.n_interior;
        let nb = self.op.mask.boundary_count();
        if bc.f0.len() != nb || bc.f1.len() != nb {
            return Err(BiharmError::ShapeMismatch {
                expected: vec![nb],
                got: vec![bc.f0.len(), bc.f1.len()],
            });
        }
        self.op.grid.same_shape(&rhs.grid)?;
        let mut b = vec![C64::new(0.0, 0.0); 2 * n];
        for (s, idx) in self.op.interior_nodes.iter().enumerate() {
            b[n + s] = rhs.data[IxDyn(idx)];
        }
        for &(row, bslot, coeff, trace) in &self.op.lifts {
            let v = match trace {
                Trace::F0 => bc.f0[bslot],
                Trace::F1 => bc.f1[bslot],
            };
            b[row] -= coeff * v;
        }
        let sol = self.lu.solve(&b)?;
        let mut u = ScalarField::zeros(&self.op.grid);
        let mut w = ScalarField::zeros(&self.op.grid);
        for (s, idx) in self.op.interior_nodes.iter().enumerate() {
            u.data[IxDyn(idx)] = sol[s];
            w.data[IxDyn(idx)] = sol[n + s];
        }
        for (slot, (idx, _)) in self.op.mask.normals.iter().enumerate() {
            u.data[IxDyn(idx)] = bc.f0[slot];
            w.data[IxDyn(idx)] = bc.f1[slot];
        }
        Ok(NavierSolution { u, w })
    }
}

/// One-shot forward solve.
pub fn solve_navier(
    coeffs: &CoefficientSet,
    bc: &NavierBoundaryData,
    rhs: &ScalarField,
) -> Result<ScalarField> {
    Ok(NavierSolver::new(coeffs)?.solve_full(bc, rhs)?.u)
}

/// Nodal action of L on a full-grid field by stencil composition; periodic
/// grids wrap, bounded grids use one-sided edge rules. This is the operator
/// used for residual checks and cross-module identities, independent of the
/// interior matrix assembly.
pub fn apply_full(coeffs: &CoefficientSet, u: &ScalarField) -> Result<ScalarField> {
    let dim = u.grid.dim();
    let mut out = deriv::bilaplacian(u);
    for j in 0..dim {
        let dj = deriv::dop(u, j);
        out.axpy(C64::new(1.0, 0.0), &coeffs.b.comps[j].hadamard(&dj)?)?;
        for k in j..dim {
            // D_j D_j by the compact second difference, matching the matrix
            // assembly; cross terms by composed first differences
            let djk = if j == k {
                deriv::diff2(u, j).scale(C64::new(-1.0, 0.0))
            } else {
                deriv::dop(&dj, k)
            };
            let mult = if j == k { 1.0 } else { 2.0 };
            out.axpy(C64::new(mult, 0.0), &coeffs.a.at(j, k).hadamard(&djk)?)?;
        }
    }
    out.axpy(C64::new(1.0, 0.0), &coeffs.q.hadamard(u)?)?;
    Ok(out)
}

/// Residual of the assembled interior system against a closed-form pair
/// (u*, L u*): max over interior rows of |row action - rhs|, with traces
/// taken from u*. Exercises the matrix and the lifting together.
pub fn interior_residual(
    op: &AssembledOperator,
    u_star: &ScalarField,
    w_star: &ScalarField,
    lu_star: &ScalarField,
) -> Result<f64> {
    let n = op.n_interior;
    let mut xs = vec![C64::new(0.0, 0.0); 2 * n];
    for (s, idx) in op.interior_nodes.iter().enumerate() {
        xs[s] = u_star.data[IxDyn(idx)];
        xs[n + s] = w_star.data[IxDyn(idx)];
    }
    let mut action = vec![C64::new(0.0, 0.0); 2 * n];
    for &(r, c, v) in &op.triplets {
        action[r] += v * xs[c];
    }
    for &(row, bslot, coeff, trace) in &op.lifts {
        let idx = &op.mask.normals[bslot].0;
        let v = match trace {
            Trace::F0 => u_star.data[IxDyn(idx)],
            Trace::F1 => w_star.data[IxDyn(idx)],
        };
        action[row] += coeff * v;
    }
    let mut worst: f64 = 0.0;
    for (s, idx) in op.interior_nodes.iter().enumerate() {
        worst = worst.max((action[s]).norm()); // eq1 rhs is 0
        worst = worst.max((action[n + s] - lu_star.data[IxDyn(idx)]).norm());
    }
    Ok(worst)
}

/// One face-node row of a DN matrix: outward normal axis and sign, the node,
/// its boundary slot, and its trapezoid quadrature weight on that face.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DnRow {
    pub axis: usize,
    pub side: i8,
    pub node: Vec<usize>,
    pub bslot: usize,
    pub weight: f64,
}

/// Discrete DN map over a basis of Navier data: column k holds the outward
/// normal derivatives of u_k (du) and of -Lap u_k (dw) at each face node.
pub struct DNMatrix {
    pub grid: Grid,
    pub rows: Vec<DnRow>,
    pub du: Vec<Vec<C64>>,
    pub dw: Vec<Vec<C64>>,
}

/// Enumerates (face, node) rows of a boxed mask with trapezoid weights.
pub fn face_rows(mask: &DomainMask) -> Result<Vec<DnRow>> {
    let grid = &mask.grid;
    let dim = grid.dim();
    let mut bindex = ArrayD::from_elem(IxDyn(&grid.shape), -1i64);
    for (slot, (idx, _)) in mask.normals.iter().enumerate() {
        bindex[IxDyn(idx)] = slot as i64;
    }
    let mut rows = Vec::new();
    for axis in 0..dim {
        for side in [-1i8, 1] {
            let fixed = if side < 0 { 0 } else { grid.shape[axis] - 1 };
            for (idx, _) in mask.boundary.indexed_iter().filter(|(_, &b)| b) {
                let idx = idx.slice().to_vec();
                if idx[axis] != fixed {
                    continue;
                }
                let mut weight = 1.0;
                for t in 0..dim {
                    if t == axis {
                        continue;
                    }
                    weight *= grid.dx[t];
                    if idx[t] == 0 || idx[t] == grid.shape[t] - 1 {
                        weight *= 0.5;
                    }
                }
                let bslot = bindex[IxDyn(&idx)];
                if bslot < 0 {
                    return Err(BiharmError::Inconsistent(
                        "face node missing from the boundary list".into(),
                    ));
                }
                rows.push(DnRow { axis, side, node: idx, bslot: bslot as usize, weight });
            }
        }
    }
    Ok(rows)
}

/// Second-order one-sided outward normal derivative at a face node.
fn normal_derivative(f: &ScalarField, row: &DnRow) -> C64 {
    let shape = &f.grid.shape;
    let inward = -(row.side as isize);
    let i0 = &row.node;
    let i1 = offset(i0, shape, row.axis, inward).expect("face node has an interior neighbor");
    let i2 = offset(&i1, shape, row.axis, inward).expect("face node has two interior neighbors");
    let dx = f.grid.dx[row.axis];
    (3.0 * f.data[IxDyn(i0)] - 4.0 * f.data[IxDyn(&i1)] + f.data[IxDyn(&i2)]) / (2.0 * dx)
}

/// Computes the DN matrix for the given coefficient set over a basis of
/// Navier boundary data. One factorization serves all columns.
pub fn dn_map(coeffs: &CoefficientSet, basis: &[NavierBoundaryData]) -> Result<DNMatrix> {
    let solver = NavierSolver::new(coeffs)?;
    dn_map_with(&solver, basis)
}

/// DN matrix reusing an existing factorization.
pub fn dn_map_with(solver: &NavierSolver, basis: &[NavierBoundaryData]) -> Result<DNMatrix> {
    let rows = face_rows(&solver.op.mask)?;
    let zero_rhs = ScalarField::zeros(&solver.op.grid);
    let mut du = Vec::with_capacity(basis.len());
    let mut dw = Vec::with_capacity(basis.len());
    for bc in basis {
        let sol = solver.solve_full(bc, &zero_rhs)?;
        du.push(rows.iter().map(|r| normal_derivative(&sol.u, r)).collect());
        dw.push(rows.iter().map(|r| normal_derivative(&sol.w, r)).collect());
    }
    Ok(DNMatrix { grid: solver.op.grid.clone(), rows, du, dw })
}

impl DNMatrix {
    /// Green pairing of column j against boundary datum g: the surface
    /// integral of dn_u(u_j) g1 + dn_nu(-Lap u_j) g0 over the box faces.
    pub fn pairing(&self, col: usize, g: &NavierBoundaryData) -> C64 {
        let mut acc = C64::new(0.0, 0.0);
        for (r, row) in self.rows.iter().enumerate() {
            acc += row.weight
                * (self.du[col][r] * g.f1[row.bslot] + self.dw[col][r] * g.f0[row.bslot]);
        }
        acc
    }

    /// Max Green-pairing asymmetry |<N f_i, f_j> - <f_i, N f_j>| over all
    /// basis pairs, normalized by the largest pairing magnitude.
    pub fn green_defect(&self, basis: &[NavierBoundaryData]) -> f64 {
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..basis.len() {
            for j in 0..basis.len() {
                let pij = self.pairing(i, &basis[j]);
                let pji = self.pairing(j, &basis[i]);
                worst = worst.max((pij - pji).norm());
                scale = scale.max(pij.norm());
            }
        }
        if scale == 0.0 { 0.0 } else { worst / scale }
    }

    /// CSV of du rows then dw rows (one line per column entry pair grid) with
    /// a JSON sidecar mapping row index to face and node.
    pub fn save(&self, csv_path: &Path, sidecar_path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Sidecar<'a> {
            grid: &'a Grid,
            layout: &'static str,
            rows: &'a [DnRow],
            cols: usize,
        }
        let sidecar = Sidecar {
            grid: &self.grid,
            layout: "first all du rows, then all dw rows; one CSV line per row, columns are basis elements, cells are re,im",
            rows: &self.rows,
            cols: self.du.len(),
        };
        let json = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| BiharmError::Serde(e.to_string()))?;
        std::fs::write(sidecar_path, json)?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(csv_path)?);
        for block in [&self.du, &self.dw] {
            for r in 0..self.rows.len() {
                let line: Vec<String> = block
                    .iter()
                    .map(|col| format!("{:.17e},{:.17e}", col[r].re, col[r].im))
                    .collect();
                writeln!(out, "{}", line.join(","))?;
            }
        }
        Ok(())
    }
}

/// Formal L2 adjoint coefficients, derivatives by stencils:
/// A' = conj(A), B'_k = conj(B_k) + 2 sum_j D_j conj(A_jk),
/// q' = conj(q) + sum_jk D_j D_k conj(A_jk) + sum_j D_j conj(B_j).
///
/// The factor 2 in B' is what makes the operation an involution; applying it
/// twice returns the original coefficients exactly because axis stencils
/// commute.
pub fn adjoint_coefficients(coeffs: &CoefficientSet) -> Result<CoefficientSet> {
    let dim = coeffs.grid().dim();
    let a_adj = coeffs.a.conj();
    let mut b_adj = coeffs.b.conj();
    for k in 0..dim {
        for j in 0..dim {
            let da = deriv::dop(a_adj.at(j, k), j);
            b_adj.comps[k].axpy(C64::new(2.0, 0.0), &da)?;
        }
    }
    let mut q_adj = coeffs.q.conj();
    for j in 0..dim {
        for k in 0..dim {
            let d2a = deriv::dop(&deriv::dop(a_adj.at(j, k), k), j);
            q_adj.axpy(C64::new(1.0, 0.0), &d2a)?;
        }
        let db = deriv::dop(&coeffs.b.comps[j].conj(), j);
        q_adj.axpy(C64::new(1.0, 0.0), &db)?;
    }
    Ok(CoefficientSet { a: a_adj, b: b_adj, q: q_adj, support: coeffs.support.clone() })
}

/// Zero-extension of the coefficients to a larger grid with the same spacing
/// and node-aligned overlap.
pub fn extend_coefficients(coeffs: &CoefficientSet, bigger: &Grid) -> Result<CoefficientSet> {
    let small = coeffs.grid();
    let dim = small.dim();
    if bigger.dim() != dim {
        return Err(BiharmError::ShapeMismatch {
            expected: small.shape.clone(),
            got: bigger.shape.clone(),
        });
    }
    let mut shift = vec![0usize; dim];
    for a in 0..dim {
        if (bigger.dx[a] - small.dx[a]).abs() > 1e-12 * small.dx[a] {
            return Err(BiharmError::Inconsistent(
                "extension grid must keep the node spacing".into(),
            ));
        }
        let s = (small.lo[a] - bigger.lo[a]) / small.dx[a];
        if s < -1e-9 || (s - s.round()).abs() > 1e-9 {
            return Err(BiharmError::Inconsistent(
                "extension grid nodes do not align with the original".into(),
            ));
        }
        shift[a] = s.round() as usize;
        if shift[a] + small.shape[a] > bigger.shape[a] {
            return Err(BiharmError::Inconsistent(
                "extension grid does not contain the original box".into(),
            ));
        }
    }
    let support = DomainMask::boxed(bigger)?;
    // support strictly contained: every nonzero node must land inside
    let embed = |f: &ScalarField| -> Result<ScalarField> {
        let mut out = ScalarField::zeros(bigger);
        for (idx, &v) in f.data.indexed_iter() {
            if v == C64::new(0.0, 0.0) {
                continue;
            }
            let tgt: Vec<usize> = idx.slice().iter().zip(&shift).map(|(i, s)| i + s).collect();
            if !support.inside[IxDyn(&tgt)] {
                return Err(BiharmError::Inconsistent(
                    "support is not strictly contained in the extension grid".into(),
                ));
            }
            out.data[IxDyn(&tgt)] = v;
        }
        Ok(out)
    };
    let mut a = SymMatrixField::zeros(bigger);
    for j in 0..dim {
        for k in j..dim {
            *a.at_mut(j, k) = embed(coeffs.a.at(j, k))?;
        }
    }
    let mut b = VectorField::zeros(bigger);
    for c in 0..dim {
        b.comps[c] = embed(&coeffs.b.comps[c])?;
    }
    let q = embed(&coeffs.q)?;
    CoefficientSet::new(a, b, q, support)
}

/// Restriction of an extended set back to a contained grid (inverse of
/// extension on the overlap).
pub fn restrict_coefficients(coeffs: &CoefficientSet, smaller: &Grid) -> Result<CoefficientSet> {
    let big = coeffs.grid();
    let dim = big.dim();
    let mut shift = vec![0usize; dim];
    for a in 0..dim {
        let s = (smaller.lo[a] - big.lo[a]) / big.dx[a];
        if s < -1e-9 || (s - s.round()).abs() > 1e-9 {
            return Err(BiharmError::Inconsistent("grids do not align".into()));
        }
        shift[a] = s.round() as usize;
    }
    let take = |f: &ScalarField| -> ScalarField {
        ScalarField {
            grid: smaller.clone(),
            data: ArrayD::from_shape_fn(IxDyn(&smaller.shape), |idx| {
                let src: Vec<usize> =
                    idx.slice().iter().zip(&shift).map(|(i, s)| i + s).collect();
                f.data[IxDyn(&src)]
            }),
        }
    };
    let mut a = SymMatrixField::zeros(smaller);
    for j in 0..dim {
        for k in j..dim {
            *a.at_mut(j, k) = take(coeffs.a.at(j, k));
        }
    }
    let mut b = VectorField::zeros(smaller);
    for c in 0..dim {
        b.comps[c] = take(&coeffs.b.comps[c]);
    }
    CoefficientSet::new(a, b, take(&coeffs.q), DomainMask::boxed(smaller)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{Families, Separable, TrigPoly};
    use crate::tol;

    fn grid2(intervals: usize) -> Grid {
        // full side length 0.9: the box [-0.45, 0.45]^2
        Grid::boxed(2, intervals, 0.9, 0.0).unwrap()
    }

    /// Closed-form L u* for pointwise coefficient closures.
    fn apply_closed(
        u: &TrigPoly,
        dim: usize,
        a: &dyn Fn(usize, usize, &[f64]) -> C64,
        b: &dyn Fn(usize, &[f64]) -> C64,
        q: &dyn Fn(&[f64]) -> C64,
        x: &[f64],
    ) -> C64 {
        let mut val = C64::new(0.0, 0.0);
        // Lap^2 = sum_ab d_a^2 d_b^2
        for p in 0..dim {
            for r in 0..dim {
                let mut ord = vec![0u32; dim];
                ord[p] += 2;
                ord[r] += 2;
                val += u.partial(&ord).eval(x);
            }
        }
        for j in 0..dim {
            for k in 0..dim {
                let mut ord = vec![0u32; dim];
                ord[j] += 1;
                ord[k] += 1;
                val -= a(j, k, x) * u.partial(&ord).eval(x);
            }
            let mut ord = vec![0u32; dim];
            ord[j] = 1;
            val += b(j, x) * u.partial(&ord).eval(x) * C64::new(0.0, -1.0);
        }
        val + q(x) * u.eval(x)
    }

    #[test]
    fn zero_coefficients_apply_full_is_bilaplacian() {
        let g = grid2(16);
        let coeffs = CoefficientSet::zero(&g).unwrap();
        let u = TrigPoly::random(2, 1.3, 2, 11).sample(&g);
        let lhs = apply_full(&coeffs, &u).unwrap();
        let rhs = deriv::bilaplacian(&u);
        assert_eq!(lhs.sub(&rhs).unwrap().norm_max(), 0.0);
    }

    #[test]
    fn plane_wave_matches_discrete_symbol() {
        // periodic harness: constant A = a I, B = 0, q = 0
        let g = Grid::periodic(2, 32, 2.0, 0.0).unwrap();
        let a_val = 0.7;
        let coeffs = CoefficientSet {
            a: SymMatrixField::from_fns(&g, |j, k, _| {
                if j == k { C64::new(a_val, 0.0) } else { C64::new(0.0, 0.0) }
            }),
            b: VectorField::zeros(&g),
            q: ScalarField::zeros(&g),
            support: DomainMask::boxed(&Grid::boxed(2, 8, 1.0, 0.0).unwrap()).unwrap(),
        };
        let k = [3, -5];
        let u = ScalarField::from_fn(&g, |x| {
            let phase: f64 = k
                .iter()
                .zip(x)
                .map(|(&m, &xi)| m as f64 * std::f64::consts::TAU / 2.0 * xi)
                .sum();
            C64::new(0.0, phase).exp()
        });
        let got = apply_full(&coeffs, &u).unwrap();
        // discrete Laplacian symbol sum_a 2(1-cos(k dx))/dx^2
        let mut sig = 0.0;
        for (a, &m) in k.iter().enumerate() {
            let kk = m as f64 * std::f64::consts::TAU / 2.0;
            sig += 2.0 * (1.0 - (kk * g.dx[a]).cos()) / (g.dx[a] * g.dx[a]);
        }
        let expect = u.scale(C64::new(sig * sig + a_val * sig, 0.0));
        let rel = got.sub(&expect).unwrap().norm_l2() / expect.norm_l2();
        assert!(rel < tol::ROUND_OFF, "symbol mismatch {rel}");
    }

    #[test]
    fn assembled_interior_rows_converge_to_second_order() {
        let u_star = TrigPoly::random(2, 1.1, 2, 5);
        let coeffs_for = |g: &Grid| CoefficientSet::windowed_random(g, 0.8, 0.25, 42).unwrap();
        let mut errs = Vec::new();
        for n in [16usize, 32] {
            let g = grid2(n);
            let coeffs = coeffs_for(&g);
            let op = assemble_operator(&coeffs).unwrap();
            let u = u_star.sample(&g);
            let mut w = ScalarField::zeros(&g);
            for p in 0..2 {
                let mut ord = vec![0u32; 2];
                ord[p] = 2;
                w.axpy(C64::new(-1.0, 0.0), &u_star.partial(&ord).sample(&g)).unwrap();
            }
            // pointwise coefficient closures reproduce the sampled fields
            let ac = coeffs.a.clone();
            let bc = coeffs.b.clone();
            let qc = coeffs.q.clone();
            let lu = ScalarField::from_fn(&g, |x| {
                // nearest-node lookup for coefficients (they were sampled on g)
                let idx: Vec<usize> = x
                    .iter()
                    .enumerate()
                    .map(|(a, &xi)| ((xi - g.lo[a]) / g.dx[a]).round() as usize)
                    .collect();
                apply_closed(
                    &u_star,
                    2,
                    &|j, k, _| ac.at(j, k).data[IxDyn(&idx)],
                    &|j, _| bc.comps[j].data[IxDyn(&idx)],
                    &|_| qc.data[IxDyn(&idx)],
                    x,
                )
            });
            errs.push(interior_residual(&op, &u, &w, &lu).unwrap());
        }
        let order = (errs[0] / errs[1]).log2();
        assert!(
            order > tol::ORDER_LO && order < tol::ORDER_HI,
            "operator order {order}, errors {errs:?}"
        );
    }

    #[test]
    fn harmonic_cubic_is_reproduced_exactly() {
        let g = grid2(12);
        let coeffs = CoefficientSet::zero(&g).unwrap();
        let mask = coeffs.support.clone();
        let u_star = |x: &[f64]| C64::new(x[0].powi(3) * x[1] - x[0] * x[1].powi(3), 0.0);
        let bc = NavierBoundaryData::from_fns(&mask, u_star, |_| C64::new(0.0, 0.0));
        let u = solve_navier(&coeffs, &bc, &ScalarField::zeros(&g)).unwrap();
        let exact = ScalarField::from_fn(&g, u_star);
        let rel = u.sub(&exact).unwrap().norm_max() / exact.norm_max();
        assert!(rel < 1e-10, "cubic not exact: {rel}");
    }

    #[test]
    fn manufactured_solution_order_with_general_coefficients() {
        let u_star = TrigPoly::random(2, 1.7, 2, 9);
        let mut errs = Vec::new();
        for n in [16usize, 32] {
            let g = grid2(n);
            let coeffs = CoefficientSet::windowed_random(&g, 0.6, 0.25, 7).unwrap();
            let mask = coeffs.support.clone();
            let minus_lap = |x: &[f64]| {
                let mut acc = C64::new(0.0, 0.0);
                for p in 0..2 {
                    let mut ord = vec![0u32; 2];
                    ord[p] = 2;
                    acc -= u_star.partial(&ord).eval(x);
                }
                acc
            };
            let bc = NavierBoundaryData::from_fns(&mask, |x| u_star.eval(x), minus_lap);
            let ac = coeffs.a.clone();
            let bcc = coeffs.b.clone();
            let qc = coeffs.q.clone();
            let rhs = ScalarField::from_fn(&g, |x| {
                let idx: Vec<usize> = x
                    .iter()
                    .enumerate()
                    .map(|(a, &xi)| ((xi - g.lo[a]) / g.dx[a]).round() as usize)
                    .collect();
                apply_closed(
                    &u_star,
                    2,
                    &|j, k, _| ac.at(j, k).data[IxDyn(&idx)],
                    &|j, _| bcc.comps[j].data[IxDyn(&idx)],
                    &|_| qc.data[IxDyn(&idx)],
                    x,
                )
            });
            let u = solve_navier(&coeffs, &bc, &rhs).unwrap();
            let exact = u_star.sample(&g);
            errs.push(u.sub(&exact).unwrap().norm_l2() / exact.norm_l2());
        }
        let order = (errs[0] / errs[1]).log2();
        assert!(
            order > tol::ORDER_LO && order < tol::ORDER_HI,
            "solve order {order}, errors {errs:?}"
        );
    }

    #[test]
    fn solve_is_linear_in_the_data() {
        let g = grid2(12);
        let coeffs = CoefficientSet::windowed_random(&g, 0.5, 0.25, 3).unwrap();
        let solver = NavierSolver::new(&coeffs).unwrap();
        let mask = &solver.op.mask;
        let f = NavierBoundaryData::from_fns(mask, |x| C64::new(x[0], x[1]), |x| C64::new(x[1], 0.2 * x[0]));
        let gdat = NavierBoundaryData::from_fns(mask, |x| C64::new(x[0] * x[1], -x[0]), |x| C64::new(0.3, x[0] + x[1]));
        let zero = ScalarField::zeros(&g);
        let alpha = C64::new(1.3, -0.4);
        let beta = C64::new(-0.2, 0.9);
        let lhs = solver
            .solve_full(&f.scale(alpha).add(&gdat.scale(beta)), &zero)
            .unwrap()
            .u;
        let ua = solver.solve_full(&f, &zero).unwrap().u;
        let ub = solver.solve_full(&gdat, &zero).unwrap().u;
        let rhs = ua.scale(alpha).add(&ub.scale(beta)).unwrap();
        let rel = lhs.sub(&rhs).unwrap().norm_l2() / rhs.norm_l2();
        assert!(rel < tol::ROUND_OFF, "linearity broken at {rel}");
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let g = grid2(10);
        let coeffs = CoefficientSet::windowed_random(&g, 0.5, 0.25, 5).unwrap();
        let mask = coeffs.support.clone();
        let u = solve_navier(&coeffs, &NavierBoundaryData::zero(&mask), &ScalarField::zeros(&g)).unwrap();
        assert!(u.norm_max() < tol::ROUND_OFF);
    }

    #[test]
    fn discrete_eigenvalue_is_reported_singular() {
        // q = -sigma^2 with sigma the exact discrete Dirichlet eigenvalue of
        // -Lap_h for the lowest sine mode makes the coupled system singular
        let g = grid2(10);
        let mut sig = 0.0;
        for a in 0..2 {
            let k = std::f64::consts::PI / g.length(a);
            sig += 2.0 * (1.0 - (k * g.dx[a]).cos()) / (g.dx[a] * g.dx[a]);
        }
        let mask = DomainMask::boxed(&g).unwrap();
        let mut q = ScalarField::zeros(&g);
        for (idx, &ins) in mask.inside.indexed_iter() {
            if ins {
                q.data[&idx] = C64::new(-sig * sig, 0.0);
            }
        }
        let coeffs = CoefficientSet {
            a: SymMatrixField::zeros(&g),
            b: VectorField::zeros(&g),
            q,
            support: mask.clone(),
        };
        let r = solve_navier(&coeffs, &NavierBoundaryData::zero(&mask), &ScalarField::constant(&g, C64::new(1.0, 0.0)));
        match r {
            Err(BiharmError::SingularOperator(_)) => {}
            other => panic!("expected singular-operator error, got {:?}", other.map(|f| f.norm_l2())),
        }
    }

    #[test]
    fn adjoint_of_constant_real_coefficients_is_identity() {
        let g = grid2(10);
        let coeffs = CoefficientSet {
            a: SymMatrixField::from_fns(&g, |j, k, _| {
                C64::new(if j == k { 1.0 + j as f64 } else { 0.2 }, 0.0)
            }),
            b: VectorField::zeros(&g),
            q: ScalarField::constant(&g, C64::new(0.4, 0.0)),
            support: DomainMask::boxed(&g).unwrap(),
        };
        let adj = adjoint_coefficients(&coeffs).unwrap();
        assert!(adj.a.at(0, 1).sub(coeffs.a.at(0, 1)).unwrap().norm_max() == 0.0);
        // first derivatives of constants vanish in the interior; edges use
        // one-sided rules that are also exact on constants
        assert!(adj.b.norm_l2() < tol::ROUND_OFF);
        assert!(adj.q.sub(&coeffs.q).unwrap().norm_max() < tol::ROUND_OFF);
    }

    #[test]
    fn adjoint_zeroth_order_matches_divergence_oracle() {
        let phi = Families::gaussian_bump(2, 0.9, 0.14, 0.3);
        let mut errs = Vec::new();
        for n in [48usize, 96] {
            let g = grid2(n);
            let b = Families::gradient_field(&g, &phi);
            let coeffs = CoefficientSet {
                a: SymMatrixField::zeros(&g),
                b,
                q: ScalarField::zeros(&g),
                support: DomainMask::boxed(&g).unwrap(),
            };
            let adj = adjoint_coefficients(&coeffs).unwrap();
            // q' = q + (1/i) div B = -i Lap(phi), closed form
            let exact = ScalarField::from_fn(&g, |x| {
                let lap = phi.partial(&[2, 0]).eval(x) + phi.partial(&[0, 2]).eval(x);
                C64::new(0.0, -1.0) * lap
            });
            errs.push(adj.q.sub(&exact).unwrap().norm_l2() / exact.norm_l2());
        }
        let order = (errs[0] / errs[1]).log2();
        assert!(errs[1] < 8e-3, "divergence oracle mismatch {}", errs[1]);
        assert!(
            order > tol::ORDER_LO && order < tol::ORDER_HI,
            "divergence stencil order {order}"
        );
    }

    #[test]
    fn adjoint_is_an_involution() {
        let g = grid2(14);
        let coeffs = CoefficientSet::windowed_random(&g, 0.7, 0.25, 13).unwrap();
        let back = adjoint_coefficients(&adjoint_coefficients(&coeffs).unwrap()).unwrap();
        let scale = coeffs.q.norm_l2() + coeffs.b.norm_l2() + coeffs.a.norm_l2();
        let da = back.a.at(0, 1).sub(coeffs.a.at(0, 1)).unwrap().norm_l2();
        let db: f64 = (0..2)
            .map(|c| back.b.comps[c].sub(&coeffs.b.comps[c]).unwrap().norm_l2())
            .sum();
        let dq = back.q.sub(&coeffs.q).unwrap().norm_l2();
        assert!(
            (da + db + dq) / scale < 1e-11,
            "double adjoint drift {}",
            (da + db + dq) / scale
        );
    }

    #[test]
    fn extension_preserves_values_and_round_trips() {
        let g = grid2(16);
        let coeffs = CoefficientSet::windowed_random(&g, 0.5, 0.2, 21).unwrap();
        // bigger box: same spacing, 8 extra intervals per side
        let big = Grid::boxed(2, 32, 1.8, 0.0).unwrap();
        let ext = extend_coefficients(&coeffs, &big).unwrap();
        let back = restrict_coefficients(&ext, &g).unwrap();
        assert!(back.q.sub(&coeffs.q).unwrap().norm_max() == 0.0);
        assert!(back.a.at(1, 1).sub(coeffs.a.at(1, 1)).unwrap().norm_max() == 0.0);
        // a target that does not contain the original box errors out
        let tight = Grid::boxed(2, 8, 0.45, 0.0).unwrap();
        assert!(extend_coefficients(&coeffs, &tight).is_err());
    }

    #[test]
    fn dn_map_deterministic_and_green_symmetric_for_self_adjoint_coeffs() {
        let g = grid2(16);
        // self-adjoint: A = 0, B = 0, q real bump
        let q = Families::gaussian_bump(2, 1.5, 0.15, 0.3).sample(&g);
        let coeffs = CoefficientSet::new(
            SymMatrixField::zeros(&g),
            VectorField::zeros(&g),
            q,
            DomainMask::boxed(&g).unwrap(),
        )
        .unwrap();
        let mask = coeffs.support.clone();
        // corner-compatible data: biharmonic f0 with harmonic f1 = -Lap f0,
        // so the box-corner compatibility conditions hold and no artificial
        // corner singularities pollute the normal derivatives
        let basis: Vec<NavierBoundaryData> = vec![
            NavierBoundaryData::from_fns(&mask, |x| C64::new(x[0], 0.0), |_| C64::new(0.0, 0.0)),
            NavierBoundaryData::from_fns(
                &mask,
                |x| C64::new(x[0].powi(3), 0.0),
                |x| C64::new(-6.0 * x[0], 0.0),
            ),
            NavierBoundaryData::from_fns(
                &mask,
                |x| C64::new(x[0].powi(2) * x[1], 0.0),
                |x| C64::new(-2.0 * x[1], 0.0),
            ),
        ];
        let dn1 = dn_map(&coeffs, &basis).unwrap();
        let dn2 = dn_map(&coeffs, &basis).unwrap();
        for c in 0..basis.len() {
            for r in 0..dn1.rows.len() {
                assert_eq!(dn1.du[c][r], dn2.du[c][r]);
                assert_eq!(dn1.dw[c][r], dn2.dw[c][r]);
            }
        }
        let defect = dn1.green_defect(&basis);
        assert!(defect < 1e-5, "green defect {defect}");
    }

    #[test]
    fn dn_pairing_functional_converges_under_refinement() {
        // fixed smooth data; the pairing scalar settles as the grid refines
        let q_bump = Families::gaussian_bump(2, 1.0, 0.15, 0.3);
        let f0 = |x: &[f64]| C64::new(x[0] + 0.3 * x[1] * x[1], 0.0);
        let f1 = |x: &[f64]| C64::new(0.5 * x[1], 0.0);
        let g0 = |x: &[f64]| C64::new(x[0] * x[1], 0.0);
        let g1 = |x: &[f64]| C64::new(0.2 - x[0], 0.0);
        let mut vals = Vec::new();
        for n in [12usize, 24, 48] {
            let g = grid2(n);
            let coeffs = CoefficientSet::new(
                SymMatrixField::zeros(&g),
                VectorField::zeros(&g),
                q_bump.sample(&g),
                DomainMask::boxed(&g).unwrap(),
            )
            .unwrap();
            let mask = coeffs.support.clone();
            let fdat = NavierBoundaryData::from_fns(&mask, f0, f1);
            let gdat = NavierBoundaryData::from_fns(&mask, g0, g1);
            let dn = dn_map(&coeffs, &[fdat]).unwrap();
            vals.push(dn.pairing(0, &gdat));
        }
        let d1 = (vals[1] - vals[0]).norm();
        let d2 = (vals[2] - vals[1]).norm();
        assert!(d2 < 0.5 * d1, "pairing not settling: {d1} then {d2}");
    }

    #[test]
    fn dn_csv_round_trip_layout() {
        let g = grid2(8);
        let coeffs = CoefficientSet::zero(&g).unwrap();
        let mask = coeffs.support.clone();
        let basis = vec![NavierBoundaryData::from_fns(&mask, |x| C64::new(x[0], 0.0), |_| C64::new(1.0, 0.0))];
        let dn = dn_map(&coeffs, &basis).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("dn.csv");
        let sidecar = dir.path().join("dn.json");
        dn.save(&csv, &sidecar).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().count(), 2 * dn.rows.len());
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&sidecar).unwrap()).unwrap();
        assert_eq!(meta["rows"].as_array().unwrap().len(), dn.rows.len());
    }
}
