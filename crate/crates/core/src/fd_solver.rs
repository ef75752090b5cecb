//! Finite-volume reference solver for `-div(a grad u) = f` with Dirichlet data.
//!
//! Faces carry the harmonic mean of the two nodal coefficients they join.
//! Pinned nodes move to the right-hand side, leaving an SPD M-matrix on the
//! unknowns that is solved by preconditioned conjugate gradients.

use crate::boundary::{BoundaryLoop, BoundaryTrace};
use crate::error::{Error, Result};
use crate::grid::{sq_l2_norm, GridFunction, GridSpec};
use crate::microstructure::CoefficientField;

/// Compressed-row sparse matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col: Vec<usize>,
    pub val: Vec<f64>,
}

impl CsrMatrix {
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (r, yr) in y.iter_mut().enumerate().take(self.n) {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.val[k] * x[self.col[k]];
            }
            *yr = acc;
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        (self.row_ptr[r]..self.row_ptr[r + 1]).find(|&k| self.col[k] == c).map_or(0.0, |k| self.val[k])
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|r| (self.row_ptr[r]..self.row_ptr[r + 1]).all(|k| (self.val[k] - self.get(self.col[k], r)).abs() <= tol))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preconditioner {
    Jacobi,
    #[default]
    IncompleteCholesky,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Stop when `|A x - b|_inf <= tol * |b|_inf`.
    pub tol: f64,
    pub preconditioner: Preconditioner,
    /// Iteration budget is `budget_factor * unknowns`.
    pub budget_factor: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-12, preconditioner: Preconditioner::IncompleteCholesky, budget_factor: 20 }
    }
}

pub fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

enum Factor {
    Jacobi(Vec<f64>),
    /// Lower-triangular IC(0) factor on the pattern of A.
    Cholesky(CsrMatrix),
}

impl Factor {
    fn build(m: &CsrMatrix, kind: Preconditioner) -> Result<Self> {
        match kind {
            Preconditioner::Jacobi => Ok(Factor::Jacobi((0..m.n).map(|r| 1.0 / m.get(r, r)).collect())),
            Preconditioner::IncompleteCholesky => {
                let mut row_ptr = vec![0];
                let mut col = Vec::new();
                let mut val: Vec<f64> = Vec::new();
                for r in 0..m.n {
                    for k in m.row_ptr[r]..m.row_ptr[r + 1] {
                        if m.col[k] <= r {
                            col.push(m.col[k]);
                            val.push(m.val[k]);
                        }
                    }
                    row_ptr.push(col.len());
                }
                let mut l = CsrMatrix { n: m.n, row_ptr, col, val };
                for r in 0..l.n {
                    let (start, end) = (l.row_ptr[r], l.row_ptr[r + 1]);
                    for k in start..end {
                        let c = l.col[k];
                        // Sparse dot of rows r and c over columns < c.
                        let mut s = 0.0;
                        let (mut p, mut q) = (start, l.row_ptr[c]);
                        let qe = l.row_ptr[c + 1];
                        while p < k && q < qe {
                            let (cp, cq) = (l.col[p], l.col[q]);
                            if cq >= c {
                                break;
                            }
                            if cp == cq {
                                s += l.val[p] * l.val[q];
                                p += 1;
                                q += 1;
                            } else if cp < cq {
                                p += 1;
                            } else {
                                q += 1;
                            }
                        }
                        if c == r {
                            let d = l.val[k] - s;
                            if d <= 0.0 {
                                return Err(Error::InvalidGrid("incomplete factorization broke down".into()));
                            }
                            l.val[k] = d.sqrt();
                        } else {
                            let diag = l.val[l.row_ptr[c + 1] - 1];
                            l.val[k] = (l.val[k] - s) / diag;
                        }
                    }
                }
                Ok(Factor::Cholesky(l))
            }
        }
    }

    fn apply(&self, r: &[f64], z: &mut [f64]) {
        match self {
            Factor::Jacobi(d) => {
                for ((zi, ri), di) in z.iter_mut().zip(r).zip(d) {
                    *zi = ri * di;
                }
            }
            Factor::Cholesky(l) => {
                for i in 0..l.n {
                    let (s, e) = (l.row_ptr[i], l.row_ptr[i + 1]);
                    let mut acc = r[i];
                    for k in s..e - 1 {
                        acc -= l.val[k] * z[l.col[k]];
                    }
                    z[i] = acc / l.val[e - 1];
                }
                for i in (0..l.n).rev() {
                    let (s, e) = (l.row_ptr[i], l.row_ptr[i + 1]);
                    z[i] /= l.val[e - 1];
                    let zi = z[i];
                    for k in s..e - 1 {
                        z[l.col[k]] -= l.val[k] * zi;
                    }
                }
            }
        }
    }
}

/// Preconditioned CG on an SPD system; `x` holds the initial guess.
pub fn pcg(m: &CsrMatrix, b: &[f64], x: &mut [f64], opts: &SolverOptions) -> Result<usize> {
    let factor = Factor::build(m, opts.preconditioner)?;
    pcg_with(m, &factor, b, x, opts)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn pcg_with(m: &CsrMatrix, factor: &Factor, b: &[f64], x: &mut [f64], opts: &SolverOptions) -> Result<usize> {
    let n = m.n;
    let bnorm = inf_norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(0);
    }
    let target = opts.tol * bnorm;
    let mut r = vec![0.0; n];
    m.matvec(x, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let mut z = vec![0.0; n];
    factor.apply(&r, &mut z);
    let mut p = z.clone();
    let mut q = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let budget = opts.budget_factor * n.max(1);
    for it in 0..budget {
        if inf_norm(&r) <= target {
            return Ok(it);
        }
        m.matvec(&p, &mut q);
        let alpha = rz / dot(&p, &q);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        // Refresh the true residual now and then to avoid drift below the target.
        if it % 50 == 49 {
            m.matvec(x, &mut q);
            for i in 0..n {
                r[i] = b[i] - q[i];
            }
        }
        factor.apply(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    if inf_norm(&r) <= target {
        return Ok(budget);
    }
    Err(Error::NonConvergence { iterations: budget, residual: inf_norm(&r) / bnorm })
}

/// An assembled Dirichlet problem whose operator and preconditioner can be
/// reused for many boundary data on the same coefficient field.
pub struct FdProblem {
    pub spec: GridSpec,
    unknown_nodes: Vec<usize>,
    matrix: CsrMatrix,
    /// (row, pinned node, coupling weight) entries moved to the right-hand side.
    couplings: Vec<(usize, usize, f64)>,
    factor: Factor,
    opts: SolverOptions,
}

impl FdProblem {
    /// `unknown[p]` flags nodes to solve for; every other node is pinned to
    /// the value supplied at solve time. Unknown nodes must not lie on the
    /// grid edge.
    pub fn new(a: &CoefficientField, unknown: &[bool], opts: SolverOptions) -> Result<Self> {
        let spec = a.spec;
        if unknown.len() != spec.len() {
            return Err(Error::ShapeMismatch(format!("mask of {} nodes on a {}-node grid", unknown.len(), spec.len())));
        }
        let mut index = vec![usize::MAX; spec.len()];
        let mut unknown_nodes = Vec::new();
        for j in 0..spec.ny {
            for i in 0..spec.nx {
                let p = spec.index(i, j);
                if unknown[p] {
                    if spec.is_boundary(i, j) {
                        return Err(Error::InvalidGrid(format!("unknown node ({i}, {j}) lies on the grid edge")));
                    }
                    index[p] = unknown_nodes.len();
                    unknown_nodes.push(p);
                }
            }
        }
        let (cx, cy) = (1.0 / (spec.hx() * spec.hx()), 1.0 / (spec.hy() * spec.hy()));
        let mut row_ptr = vec![0];
        let mut col = Vec::new();
        let mut val = Vec::new();
        let mut couplings = Vec::new();
        for (r, &p) in unknown_nodes.iter().enumerate() {
            let ap = a.values[p];
            // Neighbour order S, W, (self), E, N keeps columns sorted.
            let nbrs = [(p - spec.nx, cy), (p - 1, cx), (p + 1, cx), (p + spec.nx, cy)];
            let mut diag = 0.0;
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(5);
            for (k, &(q, c)) in nbrs.iter().enumerate() {
                let w = c * harmonic(ap, a.values[q]);
                diag += w;
                if index[q] != usize::MAX {
                    row.push((index[q], -w));
                } else {
                    couplings.push((r, q, w));
                }
                if k == 1 {
                    row.push((r, 0.0));
                }
            }
            for (c, v) in row {
                col.push(c);
                val.push(if c == r { diag } else { v });
            }
            row_ptr.push(col.len());
        }
        let matrix = CsrMatrix { n: unknown_nodes.len(), row_ptr, col, val };
        let factor = Factor::build(&matrix, opts.preconditioner)?;
        Ok(Self { spec, unknown_nodes, matrix, couplings, factor, opts })
    }

    /// All interior nodes of the rectangle are unknown.
    pub fn rectangle(a: &CoefficientField, opts: SolverOptions) -> Result<Self> {
        let s = a.spec;
        let unknown: Vec<bool> = (0..s.len()).map(|p| !s.is_boundary(p % s.nx, p / s.nx)).collect();
        Self::new(a, &unknown, opts)
    }

    pub fn unknowns(&self) -> usize {
        self.unknown_nodes.len()
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    /// Right-hand side for the given pinned values and optional nodal forcing.
    pub fn system(&self, values: &[f64], forcing: Option<&[f64]>) -> LinearSystem {
        let mut rhs: Vec<f64> = match forcing {
            Some(f) => self.unknown_nodes.iter().map(|&p| f[p]).collect(),
            None => vec![0.0; self.unknowns()],
        };
        for &(r, q, w) in &self.couplings {
            rhs[r] += w * values[q];
        }
        LinearSystem { matrix: self.matrix.clone(), rhs }
    }

    /// Solves with pinned values taken from `values`; its unknown entries
    /// seed the iteration.
    pub fn solve(&self, values: &GridFunction, forcing: Option<&[f64]>) -> Result<GridFunction> {
        if values.spec != self.spec || values.channels != 1 {
            return Err(Error::ShapeMismatch("pinned values must be a single-channel field on the problem grid".into()));
        }
        let mut rhs: Vec<f64> = match forcing {
            Some(f) => self.unknown_nodes.iter().map(|&p| f[p]).collect(),
            None => vec![0.0; self.unknowns()],
        };
        for &(r, q, w) in &self.couplings {
            rhs[r] += w * values.data[q];
        }
        let mut x: Vec<f64> = self.unknown_nodes.iter().map(|&p| values.data[p]).collect();
        pcg_with(&self.matrix, &self.factor, &rhs, &mut x, &self.opts)?;
        let mut out = values.clone();
        for (k, &p) in self.unknown_nodes.iter().enumerate() {
            out.data[p] = x[k];
        }
        Ok(out)
    }
}

/// Nodal field that is zero in the interior and carries `g` on the boundary.
pub fn pinned_field(g: &BoundaryTrace) -> GridFunction {
    let lp = BoundaryLoop::rectangle(&g.spec);
    let mut f = GridFunction::zeros(g.spec, 1);
    for (k, &(i, j)) in lp.nodes.iter().enumerate() {
        f.set(i, j, 0, g.values[k]);
    }
    f
}

pub fn solve_dirichlet(a: &CoefficientField, g: &BoundaryTrace) -> Result<GridFunction> {
    solve_dirichlet_with(a, g, SolverOptions::default())
}

pub fn solve_dirichlet_with(a: &CoefficientField, g: &BoundaryTrace, opts: SolverOptions) -> Result<GridFunction> {
    if a.spec != g.spec {
        return Err(Error::ShapeMismatch("coefficient field and trace live on different grids".into()));
    }
    FdProblem::rectangle(a, opts)?.solve(&pinned_field(g), None)
}

/// Second-order differences: central inside, one-sided on the edges.
pub fn gradient(u: &GridFunction) -> Result<GridFunction> {
    if u.channels != 1 {
        return Err(Error::ShapeMismatch(format!("gradient needs one channel, got {}", u.channels)));
    }
    let s = u.spec;
    let mut out = GridFunction::zeros(s, 2);
    let d = |n: usize, h: f64, k: usize, at: &dyn Fn(usize) -> f64| -> f64 {
        if n == 2 {
            (at(1) - at(0)) / h
        } else if k == 0 {
            (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
        } else if k == n - 1 {
            (3.0 * at(n - 1) - 4.0 * at(n - 2) + at(n - 3)) / (2.0 * h)
        } else {
            (at(k + 1) - at(k - 1)) / (2.0 * h)
        }
    };
    for j in 0..s.ny {
        for i in 0..s.nx {
            let gx = d(s.nx, s.hx(), i, &|m| u.get(m, j, 0));
            let gy = d(s.ny, s.hy(), j, &|m| u.get(i, m, 0));
            out.set(i, j, 0, gx);
            out.set(i, j, 1, gy);
        }
    }
    Ok(out)
}

/// Manufactured solutions used to validate the discretization order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManufacturedCase {
    /// `a = 1`, `u = sin(pi x) sin(pi y)`.
    SinSin,
    /// `a = 1 + x`, `u = x^2`, `f = -(2 + 4x)`.
    GradedQuadratic,
    /// `a = 1`, `u = 2x - y + 0.5`.
    Linear,
}

impl ManufacturedCase {
    pub fn coefficient(self, x: f64, _y: f64) -> f64 {
        match self {
            ManufacturedCase::GradedQuadratic => 1.0 + x,
            _ => 1.0,
        }
    }

    pub fn exact(self, x: f64, y: f64) -> f64 {
        use std::f64::consts::PI;
        match self {
            ManufacturedCase::SinSin => (PI * x).sin() * (PI * y).sin(),
            ManufacturedCase::GradedQuadratic => x * x,
            ManufacturedCase::Linear => 2.0 * x - y + 0.5,
        }
    }

    pub fn forcing(self, x: f64, y: f64) -> f64 {
        use std::f64::consts::PI;
        match self {
            ManufacturedCase::SinSin => 2.0 * PI * PI * (PI * x).sin() * (PI * y).sin(),
            ManufacturedCase::GradedQuadratic => -(2.0 + 4.0 * x),
            ManufacturedCase::Linear => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub resolutions: Vec<usize>,
    /// L2 error against the exact solution per resolution.
    pub errors: Vec<f64>,
    /// Observed order between consecutive resolutions.
    pub orders: Vec<f64>,
}

impl ConvergenceReport {
    /// Smallest observed order, or `None` when every error is at round-off level.
    pub fn min_order(&self) -> Option<f64> {
        if self.errors.iter().all(|&e| e < 1e-11) {
            return None;
        }
        Some(self.orders.iter().cloned().fold(f64::INFINITY, f64::min))
    }
}

pub fn solve_manufactured(case: ManufacturedCase, resolutions: &[usize]) -> Result<ConvergenceReport> {
    let mut errors = Vec::new();
    let opts = SolverOptions { tol: 1e-13, ..SolverOptions::default() };
    for &n in resolutions {
        let spec = GridSpec::unit(n)?;
        let a = GridFunction::from_fn(spec, |x, y| case.coefficient(x, y));
        let a = CoefficientField::new(spec, a.data, vec![0; spec.len()])?;
        let exact = GridFunction::from_fn(spec, |x, y| case.exact(x, y));
        let forcing = GridFunction::from_fn(spec, |x, y| case.forcing(x, y));
        let mut pinned = exact.clone();
        for j in 1..n - 1 {
            for i in 1..n - 1 {
                pinned.set(i, j, 0, 0.0);
            }
        }
        let u = FdProblem::rectangle(&a, opts)?.solve(&pinned, Some(&forcing.data))?;
        errors.push(sq_l2_norm(&u.sub(&exact)?).sqrt());
    }
    let orders = errors
        .windows(2)
        .zip(resolutions.windows(2))
        .map(|(e, n)| (e[0] / e[1]).ln() / (((n[1] - 1) as f64) / ((n[0] - 1) as f64)).ln())
        .collect();
    let report = ConvergenceReport { resolutions: resolutions.to_vec(), errors, orders };
    if let Some(order) = report.min_order() {
        if order < 1.5 {
            return Err(Error::ValidationFailure { order });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::{extract_trace, trace_from_params, FourierBoundaryParams};
    use crate::microstructure::{generate, MicrostructureRecipe};
    use crate::rng;

    fn field(spec: GridSpec, f: impl Fn(f64, f64) -> f64) -> CoefficientField {
        let g = GridFunction::from_fn(spec, f);
        CoefficientField::new(spec, g.data, vec![0; spec.len()]).unwrap()
    }

    #[test]
    fn linear_solution_is_exact() {
        let spec = GridSpec::unit(17).unwrap();
        let exact = GridFunction::from_fn(spec, |x, y| x + y);
        let g = extract_trace(&exact).unwrap();
        let u = solve_dirichlet(&CoefficientField::constant(spec, 1.0).unwrap(), &g).unwrap();
        assert!(u.max_abs_diff(&exact).unwrap() < 1e-10);
    }

    #[test]
    fn coefficient_scaling_drops_out() {
        let spec = GridSpec::unit(17).unwrap();
        let g = trace_from_params(&FourierBoundaryParams::sample(&mut rng::stream(1, 0)), &spec);
        let u1 = solve_dirichlet(&CoefficientField::constant(spec, 1.0).unwrap(), &g).unwrap();
        let u7 = solve_dirichlet(&CoefficientField::constant(spec, 7.3).unwrap(), &g).unwrap();
        assert!(u1.max_abs_diff(&u7).unwrap() < 1e-10);
    }

    #[test]
    fn single_interior_node() {
        let spec = GridSpec::unit(3).unwrap();
        let mut pinned = GridFunction::zeros(spec, 1);
        pinned.set(1, 0, 0, 1.0);
        pinned.set(0, 1, 0, 2.0);
        pinned.set(2, 1, 0, 3.0);
        pinned.set(1, 2, 0, 4.0);
        let p = FdProblem::rectangle(&CoefficientField::constant(spec, 1.0).unwrap(), SolverOptions::default()).unwrap();
        let u = p.solve(&pinned, None).unwrap();
        assert!((u.get(1, 1, 0) - 2.5).abs() < 1e-14);
    }

    #[test]
    fn assembled_system_properties() {
        let spec = GridSpec::unit(17).unwrap();
        let a = generate(&MicrostructureRecipe::voronoi(10, 4).with_range(0.0, 10.0), &spec).unwrap();
        let p = FdProblem::rectangle(&a, SolverOptions::default()).unwrap();
        let m = p.matrix();
        assert!(m.is_symmetric(1e-12));
        let mut strict = 0;
        for r in 0..m.n {
            let off: f64 = (m.row_ptr[r]..m.row_ptr[r + 1]).filter(|&k| m.col[k] != r).map(|k| m.val[k].abs()).sum();
            let d = m.get(r, r);
            assert!(d >= off - 1e-12);
            if d > off + 1e-12 {
                strict += 1;
            }
        }
        // Rows touching the boundary are strictly dominant.
        assert_eq!(strict, 4 * 15 - 4);
    }

    #[test]
    fn residual_meets_tolerance() {
        let spec = GridSpec::unit(33).unwrap();
        let a = generate(&MicrostructureRecipe::voronoi(10, 9).with_range(0.0, 10.0), &spec).unwrap();
        let g = trace_from_params(&FourierBoundaryParams::sample(&mut rng::stream(9, 1)), &spec);
        let pinned = pinned_field(&g);
        let p = FdProblem::rectangle(&a, SolverOptions::default()).unwrap();
        let u = p.solve(&pinned, None).unwrap();
        let sys = p.system(&pinned.data, None);
        let interior: Vec<f64> = (0..spec.len()).filter(|&q| !spec.is_boundary(q % 33, q / 33)).map(|q| u.data[q]).collect();
        let mut r = vec![0.0; sys.rhs.len()];
        sys.matrix.matvec(&interior, &mut r);
        let res = r.iter().zip(&sys.rhs).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(res <= 1e-10 * inf_norm(&sys.rhs));
    }

    #[test]
    fn jacobi_and_ic_agree() {
        let spec = GridSpec::unit(17).unwrap();
        let a = generate(&MicrostructureRecipe::voronoi(6, 2).with_range(0.5, 10.0), &spec).unwrap();
        let g = trace_from_params(&FourierBoundaryParams::sample(&mut rng::stream(2, 1)), &spec);
        let u1 = solve_dirichlet(&a, &g).unwrap();
        let opts = SolverOptions { preconditioner: Preconditioner::Jacobi, ..SolverOptions::default() };
        let u2 = solve_dirichlet_with(&a, &g, opts).unwrap();
        assert!(u1.max_abs_diff(&u2).unwrap() < 1e-9);
    }

    #[test]
    fn budget_exhaustion_is_reported() {
        let spec = GridSpec::unit(33).unwrap();
        let a = generate(&MicrostructureRecipe::voronoi(6, 2).with_range(0.5, 10.0), &spec).unwrap();
        let g = trace_from_params(&FourierBoundaryParams::sample(&mut rng::stream(2, 1)), &spec);
        let opts = SolverOptions { budget_factor: 0, ..SolverOptions::default() };
        assert!(matches!(solve_dirichlet_with(&a, &g, opts), Err(Error::NonConvergence { .. })));
    }

    #[test]
    fn maximum_principle_over_microstructures() {
        let spec = GridSpec::unit(33).unwrap();
        for seed in 0..6 {
            let a = generate(&MicrostructureRecipe::voronoi(10, seed).with_range(0.0, 10.0), &spec).unwrap();
            let g = trace_from_params(&FourierBoundaryParams::sample(&mut rng::stream(seed, 7)), &spec);
            let u = solve_dirichlet(&a, &g).unwrap();
            let lo = g.values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = g.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(u.min() >= lo - 1e-10 && u.max() <= hi + 1e-10);
        }
    }

    #[test]
    fn mirror_symmetry() {
        let spec = GridSpec::unit(33).unwrap();
        let a = field(spec, |x, y| 1.0 + 4.0 * (x - 0.5).powi(2) + y);
        let u = solve_dirichlet(&a, &extract_trace(&GridFunction::from_fn(spec, |x, y| (x - 0.5).abs() + y * y)).unwrap()).unwrap();
        for j in 0..33 {
            for i in 0..33 {
                assert!((u.get(i, j, 0) - u.get(32 - i, j, 0)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn linear_in_boundary_data() {
        let spec = GridSpec::unit(17).unwrap();
        let a = generate(&MicrostructureRecipe::voronoi(5, 3).with_range(0.0, 10.0), &spec).unwrap();
        let g1 = trace_from_params(&FourierBoundaryParams::sample(&mut rng::stream(1, 1)), &spec);
        let g2 = trace_from_params(&FourierBoundaryParams::sample(&mut rng::stream(2, 1)), &spec);
        let (al, be) = (0.7, -1.9);
        let comb = BoundaryTrace::new(spec, g1.values.iter().zip(&g2.values).map(|(x, y)| al * x + be * y).collect()).unwrap();
        let lhs = solve_dirichlet(&a, &comb).unwrap();
        let rhs = solve_dirichlet(&a, &g1).unwrap().scaled(al).axpy(be, &solve_dirichlet(&a, &g2).unwrap()).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-9);
    }

    #[test]
    fn gradient_cases() {
        let spec = GridSpec::unit(17).unwrap();
        let g = gradient(&GridFunction::from_fn(spec, |x, _| x)).unwrap();
        for j in 0..17 {
            for i in 0..17 {
                assert!((g.get(i, j, 0) - 1.0).abs() < 1e-12 && g.get(i, j, 1).abs() < 1e-12);
            }
        }
        let g = gradient(&GridFunction::from_fn(spec, |x, _| x * x)).unwrap();
        assert!((g.get(8, 3, 0) - 1.0).abs() < 1e-12);
        // One-sided second-order differences are also exact on quadratics.
        assert!(g.get(0, 3, 0).abs() < 1e-12 && (g.get(16, 3, 0) - 2.0).abs() < 1e-12);
        let g = gradient(&GridFunction::constant(spec, 3.0)).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn manufactured_orders() {
        let levels = [9, 17, 33, 65];
        for case in [ManufacturedCase::SinSin, ManufacturedCase::GradedQuadratic] {
            let r = solve_manufactured(case, &levels).unwrap();
            let order = r.min_order().unwrap();
            assert!(order >= 1.9, "{case:?}: {:?}", r.orders);
        }
        let r = solve_manufactured(ManufacturedCase::Linear, &levels).unwrap();
        assert!(r.errors.iter().all(|&e| e < 1e-11));
        assert_eq!(r.min_order(), None);
    }

    #[test]
    fn masked_problem_pins_outside() {
        // Unknowns only in the left half; the right half stays pinned.
        let spec = GridSpec::unit(9).unwrap();
        let unknown: Vec<bool> = (0..spec.len()).map(|p| !spec.is_boundary(p % 9, p / 9) && p % 9 < 4).collect();
        let a = CoefficientField::constant(spec, 1.0).unwrap();
        let exact = GridFunction::from_fn(spec, |x, y| 3.0 * x - y);
        let mut pinned = exact.clone();
        for (p, &u) in unknown.iter().enumerate() {
            if u {
                pinned.data[p] = 0.0;
            }
        }
        let u = FdProblem::new(&a, &unknown, SolverOptions::default()).unwrap().solve(&pinned, None).unwrap();
        assert!(u.max_abs_diff(&exact).unwrap() < 1e-12);
    }
}
