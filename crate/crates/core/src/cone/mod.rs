//! Convex programs over a complex vector `w` and an optional Hermitian matrix
//! `W`, solved by realification and a dense primal-dual interior-point method.
//!
//! A [`ConeProblem`] has a linear objective `tr(W C)` plus an optional
//! quadratic term `w^H Q w`, linear equalities on `w`, trace inequalities
//! `tr(W G_i) <= 0`, complex second-order-cone constraints `|f . w| <= rho`
//! and optionally the LMI `[[W, w], [w^H, 1]] >= 0`.
//!
//! Equalities are eliminated up front: `w = w0 + N z` with `N` an orthonormal
//! basis of the nullspace of the equality rows.

pub mod cones;
pub mod dump;
pub mod ipm;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::hermitian::{realify_matrix, HermitianMatrix, C64};

pub use cones::ConeDims;
pub use ipm::{solve_real, RealConeProgram, RealSolution, SolveStatus, SolverOptions};

/// `coeffs . w = rhs` (no conjugation).
#[derive(Debug, Clone, PartialEq)]
pub struct Equality {
    pub coeffs: DVector<C64>,
    pub rhs: C64,
}

/// `|coeffs . w| <= radius`.
#[derive(Debug, Clone, PartialEq)]
pub struct SocConstraint {
    pub coeffs: DVector<C64>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConeProblem {
    /// Complex dimension of `w`.
    pub dim: usize,
    /// `C` in `tr(W C)`; requires `lmi`.
    pub trace_cost: Option<HermitianMatrix>,
    /// `Q` in `w^H Q w`.
    pub quadratic_cost: Option<HermitianMatrix>,
    pub equalities: Vec<Equality>,
    /// `G_i` in `tr(W G_i) <= 0`; requires `lmi`.
    pub trace_ineqs: Vec<HermitianMatrix>,
    pub soc: Vec<SocConstraint>,
    /// Enables `[[W, w], [w^H, 1]] >= 0`.
    pub lmi: bool,
}

impl ConeProblem {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            trace_cost: None,
            quadratic_cost: None,
            equalities: Vec::new(),
            trace_ineqs: Vec::new(),
            soc: Vec::new(),
            lmi: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim;
        if n == 0 {
            return Err(Error::InvalidArgument("problem dimension must be positive".into()));
        }
        if self.equalities.is_empty() {
            return Err(Error::InvalidArgument(
                "at least one equality constraint is required".into(),
            ));
        }
        let check_dim = |h: &HermitianMatrix, what: &str| {
            if h.dim() != n {
                Err(Error::Dimension(format!("{what} is {}x{0}, expected {n}x{n}", h.dim())))
            } else {
                Ok(())
            }
        };
        if let Some(c) = &self.trace_cost {
            check_dim(c, "trace cost")?;
        }
        if let Some(q) = &self.quadratic_cost {
            check_dim(q, "quadratic cost")?;
        }
        for g in &self.trace_ineqs {
            check_dim(g, "trace inequality")?;
        }
        if !self.lmi && (self.trace_cost.is_some() || !self.trace_ineqs.is_empty()) {
            return Err(Error::InvalidArgument(
                "trace terms need the matrix variable (enable the LMI)".into(),
            ));
        }
        for e in &self.equalities {
            if e.coeffs.len() != n {
                return Err(Error::Dimension(format!(
                    "equality row has {} entries, expected {n}",
                    e.coeffs.len()
                )));
            }
        }
        for s in &self.soc {
            if s.coeffs.len() != n {
                return Err(Error::Dimension(format!(
                    "cone row has {} entries, expected {n}",
                    s.coeffs.len()
                )));
            }
            if !(s.radius >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "cone radius {} must be nonnegative",
                    s.radius
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConeSolution {
    pub w: DVector<C64>,
    /// Present when the LMI was active.
    pub w_matrix: Option<HermitianMatrix>,
    pub objective: f64,
    pub dual_objective: f64,
    pub duality_gap: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub weak_duality_violation: f64,
}

impl ConeSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

/// Looseness of the relaxation at a solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankGap {
    /// Spectral norm of `W - w w^H`.
    pub gap_matrix_norm: f64,
    /// Second-largest over largest eigenvalue of `W`.
    pub top_eigen_ratio: f64,
    /// Smallest eigenvalue of `W - w w^H`.
    pub schur_min_eigenvalue: f64,
}

/// `None` if the solution carries no matrix variable.
pub fn extract_rank_gap(sol: &ConeSolution) -> Option<RankGap> {
    let w_mat = sol.w_matrix.as_ref()?;
    let diff = HermitianMatrix::symmetrized(w_mat.matrix() - &sol.w * sol.w.adjoint());
    let diff_vals = diff.eigenvalues();
    let vals = w_mat.eigenvalues();
    let n = vals.len();
    let ratio = if n < 2 || vals[n - 1] <= 0.0 {
        0.0
    } else {
        (vals[n - 2] / vals[n - 1]).max(0.0)
    };
    Some(RankGap {
        gap_matrix_norm: diff_vals.iter().fold(0.0, |m: f64, v| m.max(v.abs())),
        top_eigen_ratio: ratio,
        schur_min_eigenvalue: diff_vals.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

/// Affine parameterization `w = w0 + N z` of `{ w : E w = d }`.
struct AffineSubspace {
    w0: DVector<C64>,
    basis: DMatrix<C64>,
}

const RANK_CUTOFF: f64 = 1e-10;

fn solve_equalities(rows: &[Equality], n: usize) -> Option<AffineSubspace> {
    let k = rows.len();
    let padded = k.max(n);
    let mut e = DMatrix::<C64>::zeros(padded, n);
    let mut d = DVector::<C64>::zeros(padded);
    for (i, row) in rows.iter().enumerate() {
        e.set_row(i, &row.coeffs.transpose());
        d[i] = row.rhs;
    }
    let svd = e.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let sig = svd.singular_values;
    let mut order: Vec<usize> = (0..sig.len()).collect();
    order.sort_by(|&a, &b| sig[b].total_cmp(&sig[a]));
    let smax = order.first().map(|&i| sig[i]).unwrap_or(0.0);
    let rank = order
        .iter()
        .filter(|&&i| sig[i] > RANK_CUTOFF * smax && smax > 0.0)
        .count();

    let mut w0 = DVector::<C64>::zeros(n);
    for &i in &order[..rank] {
        let vi = v_t.row(i).adjoint();
        let coef = (u.column(i).adjoint() * &d)[(0, 0)] / sig[i];
        w0 += vi * coef;
    }
    let resid = (&e * &w0 - &d).norm();
    if resid > 1e-8 * (1.0 + d.norm()) {
        return None;
    }
    let mut basis = DMatrix::<C64>::zeros(n, n - rank);
    for (col, &i) in order[rank..].iter().enumerate() {
        basis.set_column(col, &v_t.row(i).adjoint());
    }
    Some(AffineSubspace { w0, basis })
}

/// Coefficients of `tr(W C)` over the real parameters of a Hermitian `W`
/// (diagonal entries, then real/imaginary parts of the strict upper triangle).
fn trace_coefficients(c: &HermitianMatrix) -> Vec<f64> {
    let n = c.dim();
    let m = c.matrix();
    let mut out = Vec::with_capacity(n * n);
    for k in 0..n {
        out.push(m[(k, k)].re);
    }
    for k in 0..n {
        for l in k + 1..n {
            out.push(2.0 * m[(k, l)].re);
            out.push(2.0 * m[(k, l)].im);
        }
    }
    out
}

fn hermitian_from_params(p: &[f64], n: usize) -> HermitianMatrix {
    let mut m = DMatrix::<C64>::zeros(n, n);
    for k in 0..n {
        m[(k, k)] = C64::new(p[k], 0.0);
    }
    let mut idx = n;
    for k in 0..n {
        for l in k + 1..n {
            let v = C64::new(p[idx], p[idx + 1]);
            m[(k, l)] = v;
            m[(l, k)] = v.conj();
            idx += 2;
        }
    }
    HermitianMatrix::symmetrized(m)
}

/// Solves a complex cone program.
pub fn solve(problem: &ConeProblem, opts: &SolverOptions) -> Result<ConeSolution> {
    problem.validate()?;
    match whitening(problem) {
        Some(t) => {
            let sol = solve_direct(&transform(problem, &t), opts)?;
            Ok(untransform(sol, &t))
        }
        None => solve_direct(problem, opts),
    }
}

/// `T = L^{-H}` for the Cholesky factor `L` of the (single, positive definite)
/// cost matrix, so that the cost becomes the identity under `w = T u`.
fn whitening(problem: &ConeProblem) -> Option<DMatrix<C64>> {
    let cost = match (&problem.trace_cost, &problem.quadratic_cost) {
        (Some(c), None) | (None, Some(c)) => c,
        _ => return None,
    };
    let n = problem.dim;
    let chol = cost.matrix().clone().cholesky()?;
    let t = chol.l().adjoint().solve_upper_triangular(&DMatrix::identity(n, n))?;
    t.iter().all(|v| v.is_finite()).then_some(t)
}

fn congruence(h: &HermitianMatrix, t: &DMatrix<C64>) -> HermitianMatrix {
    HermitianMatrix::symmetrized(t.adjoint() * h.matrix() * t)
}

fn transform(problem: &ConeProblem, t: &DMatrix<C64>) -> ConeProblem {
    let tt = t.transpose();
    ConeProblem {
        dim: problem.dim,
        trace_cost: problem.trace_cost.as_ref().map(|c| congruence(c, t)),
        quadratic_cost: problem.quadratic_cost.as_ref().map(|c| congruence(c, t)),
        equalities: problem
            .equalities
            .iter()
            .map(|e| Equality {
                coeffs: &tt * &e.coeffs,
                rhs: e.rhs,
            })
            .collect(),
        trace_ineqs: problem.trace_ineqs.iter().map(|g| congruence(g, t)).collect(),
        soc: problem
            .soc
            .iter()
            .map(|c| SocConstraint {
                coeffs: &tt * &c.coeffs,
                radius: c.radius,
            })
            .collect(),
        lmi: problem.lmi,
    }
}

fn untransform(mut sol: ConeSolution, t: &DMatrix<C64>) -> ConeSolution {
    sol.w = t * &sol.w;
    sol.w_matrix = sol
        .w_matrix
        .map(|u| HermitianMatrix::symmetrized(t * u.matrix() * t.adjoint()));
    sol
}

fn solve_direct(problem: &ConeProblem, opts: &SolverOptions) -> Result<ConeSolution> {
    let n = problem.dim;

    let mut rows = problem.equalities.clone();
    for s in problem.soc.iter().filter(|s| s.radius == 0.0) {
        rows.push(Equality {
            coeffs: s.coeffs.clone(),
            rhs: C64::new(0.0, 0.0),
        });
    }
    let Some(sub) = solve_equalities(&rows, n) else {
        return Ok(infeasible_solution(n, problem.lmi));
    };
    let d = sub.basis.ncols();
    let nz = 2 * d;
    let nw = if problem.lmi { n * n } else { 0 };
    let nx = nz + nw;

    // Complex direction of each real z-variable.
    let mut dirs = DMatrix::<C64>::zeros(n, nz);
    for j in 0..d {
        dirs.set_column(j, &sub.basis.column(j));
        dirs.set_column(d + j, &(sub.basis.column(j) * C64::new(0.0, 1.0)));
    }
    let w_scale = {
        let nrm = sub.w0.norm();
        if nrm > 1e-12 {
            nrm
        } else {
            1.0
        }
    };

    // Objective.
    let mut p = DMatrix::<f64>::zeros(nx, nx);
    let mut q = DVector::<f64>::zeros(nx);
    let mut offset = 0.0;
    if let Some(qc) = &problem.quadratic_cost {
        let qm = qc.matrix();
        offset += qc.quadratic_form(&sub.w0);
        let lin = (sub.w0.adjoint() * qm * &dirs).map(|v| 2.0 * v.re);
        let quad = (dirs.adjoint() * qm * &dirs).map(|v| 2.0 * v.re);
        q.rows_mut(0, nz).copy_from(&lin.transpose());
        p.view_mut((0, 0), (nz, nz)).copy_from(&quad);
    }
    if let Some(c) = &problem.trace_cost {
        let coef = trace_coefficients(c);
        for (j, v) in coef.iter().enumerate() {
            q[nz + j] += w_scale * w_scale * v;
        }
    }
    let kappa = p.iter().chain(q.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    let kappa = if kappa > 0.0 { kappa } else { 1.0 };
    p /= kappa;
    q /= kappa;

    // Cone constraints.
    let active_soc: Vec<&SocConstraint> = problem.soc.iter().filter(|s| s.radius > 0.0).collect();
    let lmi_order = 2 * (n + 1);
    let dims = ConeDims {
        nonneg: problem.trace_ineqs.len(),
        soc: vec![3; active_soc.len()],
        psd: if problem.lmi { vec![lmi_order] } else { vec![] },
    };
    let total = dims.total();
    let mut g = DMatrix::<f64>::zeros(total, nx);
    let mut h = DVector::<f64>::zeros(total);
    let mut row = 0;

    for gi in &problem.trace_ineqs {
        let nrm = gi.norm();
        let nrm = if nrm > 0.0 { nrm } else { 1.0 };
        for (j, v) in trace_coefficients(gi).iter().enumerate() {
            g[(row, nz + j)] = v / nrm;
        }
        row += 1;
    }

    for sc in &active_soc {
        let value0 = (sc.coeffs.transpose() * &sub.w0)[(0, 0)];
        let grad = sc.coeffs.transpose() * &dirs;
        let gamma = 1.0 / sc.radius.max(sc.coeffs.norm() * sub.w0.norm()).max(1e-300);
        h[row] = gamma * sc.radius;
        h[row + 1] = gamma * value0.re;
        h[row + 2] = gamma * value0.im;
        for j in 0..nz {
            g[(row + 1, j)] = -gamma * grad[(0, j)].re;
            g[(row + 2, j)] = -gamma * grad[(0, j)].im;
        }
        row += 3;
    }

    if problem.lmi {
        let mut z0 = DMatrix::<C64>::zeros(n + 1, n + 1);
        for i in 0..n {
            z0[(i, n)] = sub.w0[i] / w_scale;
            z0[(n, i)] = sub.w0[i].conj() / w_scale;
        }
        z0[(n, n)] = C64::new(1.0, 0.0);
        let h_psd = cones::svec(&realify_matrix(&z0));
        h.rows_mut(row, h_psd.len()).copy_from_slice(&h_psd);

        let mut put = |col: usize, zj: &DMatrix<C64>| {
            let v = cones::svec(&realify_matrix(zj));
            for (i, x) in v.iter().enumerate() {
                g[(row + i, col)] = -x;
            }
        };
        for j in 0..nz {
            let mut zj = DMatrix::<C64>::zeros(n + 1, n + 1);
            for i in 0..n {
                zj[(i, n)] = dirs[(i, j)] / w_scale;
                zj[(n, i)] = dirs[(i, j)].conj() / w_scale;
            }
            put(j, &zj);
        }
        let mut col = nz;
        for k in 0..n {
            let mut zj = DMatrix::<C64>::zeros(n + 1, n + 1);
            zj[(k, k)] = C64::new(1.0, 0.0);
            put(col, &zj);
            col += 1;
        }
        for k in 0..n {
            for l in k + 1..n {
                let mut re = DMatrix::<C64>::zeros(n + 1, n + 1);
                re[(k, l)] = C64::new(1.0, 0.0);
                re[(l, k)] = C64::new(1.0, 0.0);
                put(col, &re);
                let mut im = DMatrix::<C64>::zeros(n + 1, n + 1);
                im[(k, l)] = C64::new(0.0, 1.0);
                im[(l, k)] = C64::new(0.0, -1.0);
                put(col + 1, &im);
                col += 2;
            }
        }
    }

    let mut prog = RealConeProgram::new(q, g, h, dims).with_quadratic(p);
    prog.objective_scale = kappa;
    prog.objective_offset = offset;
    let sol = solve_real(&prog, opts).map_err(Error::InvalidArgument)?;

    let x = &sol.x;
    let mut w = sub.w0.clone();
    for j in 0..nz {
        w += dirs.column(j) * C64::new(x[j], 0.0);
    }
    let w_matrix = problem.lmi.then(|| {
        let params: Vec<f64> = x.rows(nz, nw).iter().copied().collect();
        hermitian_from_params(&params, n).scale(w_scale * w_scale)
    });

    Ok(ConeSolution {
        w,
        w_matrix,
        objective: sol.primal_objective,
        dual_objective: sol.dual_objective,
        duality_gap: sol.gap,
        status: sol.status,
        iterations: sol.iterations,
        primal_residual: sol.primal_residual,
        dual_residual: sol.dual_residual,
        weak_duality_violation: sol.weak_duality_violation,
    })
}

fn infeasible_solution(n: usize, lmi: bool) -> ConeSolution {
    ConeSolution {
        w: DVector::zeros(n),
        w_matrix: lmi.then(|| HermitianMatrix::zeros(n)),
        objective: f64::INFINITY,
        dual_objective: f64::INFINITY,
        duality_gap: f64::INFINITY,
        status: SolveStatus::Infeasible,
        iterations: 0,
        primal_residual: f64::INFINITY,
        dual_residual: f64::INFINITY,
        weak_duality_violation: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn fix(dim: usize, idx: usize, value: C64) -> Equality {
        let mut coeffs = DVector::zeros(dim);
        coeffs[idx] = c(1.0, 0.0);
        Equality { coeffs, rhs: value }
    }

    #[test]
    fn lmi_with_fixed_vector_is_rank_one() {
        // minimize tr(W) s.t. [[W, w], [w^H, 1]] >= 0, w = [1, 0]
        let mut prob = ConeProblem::new(2);
        prob.lmi = true;
        prob.trace_cost = Some(HermitianMatrix::identity(2));
        prob.equalities = vec![fix(2, 0, c(1.0, 0.0)), fix(2, 1, c(0.0, 0.0))];
        let sol = solve(&prob, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_relative_eq!(sol.objective, 1.0, epsilon = 1e-7);
        let gap = extract_rank_gap(&sol).unwrap();
        assert!(gap.gap_matrix_norm < 1e-7, "{gap:?}");
        assert!(gap.schur_min_eigenvalue > -1e-7);
    }

    #[test]
    fn scalar_lmi_minimum() {
        // minimize W s.t. [[W, 1], [1, 1]] >= 0 -> W = 1
        let mut prob = ConeProblem::new(1);
        prob.lmi = true;
        prob.trace_cost = Some(HermitianMatrix::identity(1));
        prob.equalities = vec![fix(1, 0, c(1.0, 0.0))];
        let sol = solve(&prob, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_relative_eq!(sol.objective, 1.0, epsilon = 1e-7);
        assert!(sol.duality_gap <= 1e-7 * (1.0 + sol.objective.abs()));
    }

    #[test]
    fn equality_constrained_quadratic_matches_closed_form() {
        // minimize w^H diag(2, 1) w s.t. [1, 1] . w = 1 -> w = [1/3, 2/3], value 2/3
        let mut prob = ConeProblem::new(2);
        prob.quadratic_cost = Some(HermitianMatrix::from_real_diagonal(&[2.0, 1.0]));
        prob.equalities = vec![Equality {
            coeffs: DVector::from_vec(vec![c(1.0, 0.0), c(1.0, 0.0)]),
            rhs: c(1.0, 0.0),
        }];
        let sol = solve(&prob, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_relative_eq!(sol.w[0].re, 1.0 / 3.0, epsilon = 1e-10);
        assert_relative_eq!(sol.w[1].re, 2.0 / 3.0, epsilon = 1e-10);
        assert_relative_eq!(sol.objective, 2.0 / 3.0, epsilon = 1e-10);
    }

    #[test]
    fn soc_constraint_binds() {
        // minimize |w1|^2 + |w2|^2 s.t. w1 + w2 = 2, |w1 - 3 w2| <= 0.5
        let mut prob = ConeProblem::new(2);
        prob.quadratic_cost = Some(HermitianMatrix::identity(2));
        prob.equalities = vec![Equality {
            coeffs: DVector::from_vec(vec![c(1.0, 0.0), c(1.0, 0.0)]),
            rhs: c(2.0, 0.0),
        }];
        prob.soc = vec![SocConstraint {
            coeffs: DVector::from_vec(vec![c(1.0, 0.0), c(-3.0, 0.0)]),
            radius: 0.5,
        }];
        let sol = solve(&prob, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        // On the line w1 = 2 - w2: |2 - 4 w2| <= 0.5 -> w2 in [0.375, 0.625]; closest to 1 is 0.625.
        assert_relative_eq!(sol.w[1].re, 0.625, epsilon = 1e-6);
        assert_relative_eq!(sol.w[0].re, 1.375, epsilon = 1e-6);
    }

    #[test]
    fn inconsistent_equalities_are_infeasible() {
        let mut prob = ConeProblem::new(1);
        prob.quadratic_cost = Some(HermitianMatrix::identity(1));
        prob.equalities = vec![fix(1, 0, c(1.0, 0.0)), fix(1, 0, c(2.0, 0.0))];
        let sol = solve(&prob, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn zero_radius_cone_becomes_equality() {
        let mut prob = ConeProblem::new(2);
        prob.quadratic_cost = Some(HermitianMatrix::identity(2));
        prob.equalities = vec![Equality {
            coeffs: DVector::from_vec(vec![c(1.0, 0.0), c(1.0, 0.0)]),
            rhs: c(2.0, 0.0),
        }];
        prob.soc = vec![SocConstraint {
            coeffs: DVector::from_vec(vec![c(1.0, 0.0), c(-3.0, 0.0)]),
            radius: 0.0,
        }];
        let sol = solve(&prob, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_relative_eq!(sol.w[0].re, 1.5, epsilon = 1e-10);
        assert_relative_eq!(sol.w[1].re, 0.5, epsilon = 1e-10);
    }

    #[test]
    fn rank_gap_of_identity() {
        let sol = ConeSolution {
            w: DVector::zeros(3),
            w_matrix: Some(HermitianMatrix::identity(3)),
            objective: 0.0,
            dual_objective: 0.0,
            duality_gap: 0.0,
            status: SolveStatus::Optimal,
            iterations: 0,
            primal_residual: 0.0,
            dual_residual: 0.0,
            weak_duality_violation: 0.0,
        };
        let gap = extract_rank_gap(&sol).unwrap();
        assert_relative_eq!(gap.gap_matrix_norm, 1.0, epsilon = 1e-12);
        assert_relative_eq!(gap.top_eigen_ratio, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn validation_errors() {
        let mut prob = ConeProblem::new(2);
        assert!(solve(&prob, &SolverOptions::default()).is_err());
        prob.equalities = vec![fix(2, 0, c(1.0, 0.0))];
        prob.trace_cost = Some(HermitianMatrix::identity(2));
        assert!(solve(&prob, &SolverOptions::default()).is_err());
    }
}
