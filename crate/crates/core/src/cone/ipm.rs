//! Primal-dual path-following interior-point method for small dense cone
//! programs
//!
//! ```text
//!   minimize    1/2 x'Px + q'x
//!   subject to  Gx + s = h,  Ax = b,  s in K
//! ```
//!
//! with Nesterov-Todd scaling and Mehrotra predictor-corrector steps. The
//! KKT system is reduced to `[P + G'W^{-1}W^{-T}G, A'; A, 0]` and factored
//! densely every iteration.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::cones::{identity, interior_shift, jordan, jordan_div, max_step, ConeDims, NtScaling, ScaleOp};

/// Termination state of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
    /// KKT factorization failed or the iterate left the cone interior.
    Breakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Relative duality-gap target: `gap <= gap_tol * (1 + |objective|)`.
    pub gap_tol: f64,
    /// Relative primal/dual residual tolerance.
    pub feas_tol: f64,
    /// If the iteration stalls or runs out before reaching `gap_tol`, a
    /// feasible iterate within this gap is still reported optimal.
    pub accept_gap_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            gap_tol: 1e-12,
            feas_tol: 1e-9,
            accept_gap_tol: 1e-7,
        }
    }
}

/// A real cone program. `objective_scale` and `objective_offset` map the
/// internal objective to the reported one (`scale * obj + offset`) and enter
/// the stopping test.
#[derive(Debug, Clone)]
pub struct RealConeProgram {
    pub p: Option<DMatrix<f64>>,
    pub q: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub dims: ConeDims,
    pub objective_scale: f64,
    pub objective_offset: f64,
}

impl RealConeProgram {
    pub fn new(q: DVector<f64>, g: DMatrix<f64>, h: DVector<f64>, dims: ConeDims) -> Self {
        let n = q.len();
        Self {
            p: None,
            q,
            g,
            h,
            a: DMatrix::zeros(0, n),
            b: DVector::zeros(0),
            dims,
            objective_scale: 1.0,
            objective_offset: 0.0,
        }
    }

    pub fn with_quadratic(mut self, p: DMatrix<f64>) -> Self {
        self.p = Some(p);
        self
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a = a;
        self.b = b;
        self
    }

    fn check(&self) -> Result<(), String> {
        let n = self.q.len();
        if self.g.ncols() != n || self.a.ncols() != n {
            return Err(format!("G/A must have {n} columns"));
        }
        if self.g.nrows() != self.h.len() || self.h.len() != self.dims.total() {
            return Err(format!(
                "G has {} rows, h has {}, cone dimension is {}",
                self.g.nrows(),
                self.h.len(),
                self.dims.total()
            ));
        }
        if self.a.nrows() != self.b.len() {
            return Err("A and b row counts differ".into());
        }
        if let Some(p) = &self.p {
            if p.shape() != (n, n) {
                return Err(format!("P must be {n}x{n}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RealSolution {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub s: Vec<f64>,
    pub z: Vec<f64>,
    pub status: SolveStatus,
    pub iterations: usize,
    pub primal_objective: f64,
    pub dual_objective: f64,
    /// Complementarity gap `s'z`, in reported objective units.
    pub gap: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Largest `(dual - primal) / (1 + |primal|)` observed over iterations
    /// whose residuals were below the feasibility tolerance.
    pub weak_duality_violation: f64,
}

struct Kkt {
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    matrix: DMatrix<f64>,
}

impl Kkt {
    fn factor(h: DMatrix<f64>, a: &DMatrix<f64>) -> Option<Self> {
        let n = h.nrows();
        let p = a.nrows();
        if p == 0 {
            let scale = h.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
            let mut reg = 0.0;
            for _ in 0..4 {
                let mut m = h.clone();
                for i in 0..n {
                    m[(i, i)] += reg;
                }
                if let Some(ch) = m.clone().cholesky() {
                    return Some(Self {
                        chol: Some(ch),
                        lu: None,
                        matrix: h,
                    });
                }
                reg = if reg == 0.0 { 1e-14 * scale } else { reg * 100.0 };
            }
            None
        } else {
            let mut m = DMatrix::zeros(n + p, n + p);
            m.view_mut((0, 0), (n, n)).copy_from(&h);
            m.view_mut((n, 0), (p, n)).copy_from(a);
            m.view_mut((0, n), (n, p)).copy_from(&a.transpose());
            let lu = m.clone().lu();
            if !lu.is_invertible() {
                return None;
            }
            Some(Self {
                chol: None,
                lu: Some(lu),
                matrix: m,
            })
        }
    }

    fn raw_solve(&self, rhs: &DVector<f64>) -> Option<DVector<f64>> {
        match (&self.chol, &self.lu) {
            (Some(ch), _) => Some(ch.solve(rhs)),
            (_, Some(lu)) => lu.solve(rhs),
            _ => None,
        }
    }

    /// Solves with one step of iterative refinement.
    fn solve(&self, rhs: &DVector<f64>) -> Option<DVector<f64>> {
        let mut sol = self.raw_solve(rhs)?;
        let resid = rhs - &self.matrix * &sol;
        if let Some(corr) = self.raw_solve(&resid) {
            sol += corr;
        }
        if sol.iter().all(|v| v.is_finite()) {
            Some(sol)
        } else {
            None
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solves a real cone program.
pub fn solve_real(prog: &RealConeProgram, opts: &SolverOptions) -> Result<RealSolution, String> {
    prog.check()?;
    let n = prog.q.len();
    let neq = prog.a.nrows();
    let dims = &prog.dims;
    let e = identity(dims);
    let degree = dims.degree().max(1) as f64;
    let p_mat = prog.p.clone().unwrap_or_else(|| DMatrix::zeros(n, n));
    let gt = prog.g.transpose();
    let at = prog.a.transpose();
    let scale = prog.objective_scale;
    let offset = prog.objective_offset;

    // Starting point from the least-squares system with W = I.
    let h0 = &p_mat + &gt * &prog.g;
    let kkt0 = Kkt::factor(h0, &prog.a).ok_or("singular initial KKT system")?;
    let mut rhs0 = DVector::zeros(n + neq);
    rhs0.rows_mut(0, n).copy_from(&(-&prog.q + &gt * &prog.h));
    rhs0.rows_mut(n, neq).copy_from(&prog.b);
    let sol0 = kkt0.solve(&rhs0).ok_or("initial KKT solve failed")?;
    let mut x = sol0.rows(0, n).into_owned();
    let mut y = sol0.rows(n, neq).into_owned();
    let z0 = &prog.g * &x - &prog.h;
    let mut z: Vec<f64> = z0.iter().copied().collect();
    let mut s: Vec<f64> = z.iter().map(|v| -v).collect();
    for v in [&mut s, &mut z] {
        let t = interior_shift(dims, v);
        if t >= -1e-8 * norm(v).max(1.0) {
            let a = 1.0 + t;
            for (vi, ei) in v.iter_mut().zip(&e) {
                *vi += a * ei;
            }
        }
    }

    let resx0 = prog.q.norm().max(1.0);
    let resz0 = prog.h.norm().max(prog.b.norm()).max(1.0);

    let status;
    let mut iterations = 0;
    let mut weak_violation = f64::NEG_INFINITY;
    let mut pobj;
    let mut dobj;
    let mut pres;
    let mut dres;
    let mut gap;
    // Feasible iterate with the smallest gap, kept in case later steps stall.
    let mut best: Option<(DVector<f64>, DVector<f64>, Vec<f64>, Vec<f64>, f64, f64, f64, f64, f64)> = None;

    loop {
        // Residuals.
        let gx = &prog.g * &x;
        let rx = &p_mat * &x + &prog.q + &at * &y + &gt * DVector::from_column_slice(&z);
        let ry = &prog.a * &x - &prog.b;
        let rz: Vec<f64> = (0..s.len()).map(|i| gx[i] + s[i] - prog.h[i]).collect();
        gap = dot(&s, &z);
        pobj = 0.5 * x.dot(&(&p_mat * &x)) + prog.q.dot(&x);
        let gxh: Vec<f64> = (0..s.len()).map(|i| gx[i] - prog.h[i]).collect();
        dobj = pobj + y.dot(&ry) + dot(&z, &gxh);
        pres = (ry.norm_squared() + dot(&rz, &rz)).sqrt() / resz0;
        dres = rx.norm() / resx0;

        let reported = scale * pobj + offset;
        log::trace!(
            "it {iterations:3} pobj {reported:+.9e} gap {:.2e} pres {pres:.2e} dres {dres:.2e}",
            scale * gap
        );
        if pres <= opts.feas_tol && dres <= opts.feas_tol {
            let v = scale * (dobj - pobj) / (1.0 + reported.abs());
            weak_violation = weak_violation.max(v);
            if best.as_ref().is_none_or(|b| gap < b.6) {
                best = Some((x.clone(), y.clone(), s.clone(), z.clone(), pobj, dobj, gap, pres, dres));
            }
            if scale * gap <= opts.gap_tol * (1.0 + reported.abs()) {
                status = SolveStatus::Optimal;
                break;
            }
        }

        // Primal infeasibility certificate: z in K*, G'z + A'y ~ 0, h'z + b'y < 0.
        let hz = prog.h.dot(&DVector::from_column_slice(&z)) + prog.b.dot(&y);
        if hz < 0.0 {
            let cert = (&gt * DVector::from_column_slice(&z) + &at * &y).norm();
            if cert / -hz < 1e-8 && pres > opts.feas_tol {
                status = SolveStatus::Infeasible;
                break;
            }
        }

        if iterations >= opts.max_iter {
            status = SolveStatus::MaxIter;
            break;
        }
        iterations += 1;

        let w = match NtScaling::compute(dims, &s, &z) {
            Some(w) => w,
            None => {
                status = SolveStatus::Breakdown;
                break;
            }
        };
        let lambda = w.lambda.clone();

        // G-hat = W^{-T} G, column by column.
        let mut ghat = DMatrix::zeros(s.len(), n);
        for j in 0..n {
            let col: Vec<f64> = prog.g.column(j).iter().copied().collect();
            let scaled = w.apply(ScaleOp::WInvT, &col);
            ghat.set_column(j, &DVector::from_vec(scaled));
        }
        let hmat = &p_mat + ghat.transpose() * &ghat;
        let kkt = match Kkt::factor(hmat, &prog.a) {
            Some(k) => k,
            None => {
                status = SolveStatus::Breakdown;
                break;
            }
        };

        // Solves the linearized system for right-hand sides (bx, by, bz, bs):
        //   P dx + A'dy + G'dz = bx,  A dx = by,  G dx + ds = bz,  lambda o (dss + dzs) = bs
        // and returns (dx, dy, ds_scaled, dz_scaled).
        let lin = |bx: &DVector<f64>, by: &DVector<f64>, bz: &[f64], bs: &[f64]| {
            let t = jordan_div(dims, &lambda, bs);
            let bz_hat = w.apply(ScaleOp::WInvT, bz);
            let rt: Vec<f64> = t.iter().zip(&bz_hat).map(|(a, b)| a - b).collect();
            let mut rhs = DVector::zeros(n + neq);
            rhs.rows_mut(0, n)
                .copy_from(&(bx - ghat.transpose() * DVector::from_column_slice(&rt)));
            rhs.rows_mut(n, neq).copy_from(by);
            let sol = kkt.solve(&rhs)?;
            let dx = sol.rows(0, n).into_owned();
            let dy = sol.rows(n, neq).into_owned();
            let gdx = &ghat * &dx;
            let u: Vec<f64> = (0..rt.len()).map(|i| gdx[i] + rt[i]).collect();
            let ds_scaled: Vec<f64> = t.iter().zip(&u).map(|(a, b)| a - b).collect();
            Some((dx, dy, ds_scaled, u))
        };
        let newton = |bs: &[f64]| -> Option<(DVector<f64>, DVector<f64>, Vec<f64>, Vec<f64>)> {
            let bx = -&rx;
            let by = -&ry;
            let bz: Vec<f64> = rz.iter().map(|v| -v).collect();
            let (mut dx, mut dy, mut dss, mut dzs) = lin(&bx, &by, &bz, bs)?;
            for _ in 0..2 {
                let ex = &bx - (&p_mat * &dx + &at * &dy + ghat.transpose() * DVector::from_column_slice(&dzs));
                let ey = &by - &prog.a * &dx;
                let gdx = &prog.g * &dx;
                let wds = w.apply(ScaleOp::WT, &dss);
                let ez: Vec<f64> = (0..bz.len()).map(|i| bz[i] - gdx[i] - wds[i]).collect();
                let sum: Vec<f64> = dss.iter().zip(&dzs).map(|(a, b)| a + b).collect();
                let ls = jordan(dims, &lambda, &sum);
                let es: Vec<f64> = bs.iter().zip(&ls).map(|(a, b)| a - b).collect();
                let (cx, cy, cs, cz) = lin(&ex, &ey, &ez, &es)?;
                dx += cx;
                dy += cy;
                dss.iter_mut().zip(&cs).for_each(|(a, b)| *a += b);
                dzs.iter_mut().zip(&cz).for_each(|(a, b)| *a += b);
            }
            Some((dx, dy, dss, dzs))
        };

        // Predictor.
        let ll = jordan(dims, &lambda, &lambda);
        let ds_aff: Vec<f64> = ll.iter().map(|v| -v).collect();
        let Some((_, _, dsa, dza)) = newton(&ds_aff) else {
            status = SolveStatus::Breakdown;
            break;
        };
        let alpha_aff = max_step(dims, &lambda, &dsa)
            .min(max_step(dims, &lambda, &dza))
            .min(1.0);
        let sigma = (1.0 - alpha_aff).clamp(0.0, 1.0).powi(3);
        let mu = gap / degree;

        // Corrector.
        let corr = jordan(dims, &dsa, &dza);
        let ds_cc: Vec<f64> = (0..ll.len()).map(|i| -ll[i] - corr[i] + sigma * mu * e[i]).collect();
        let Some((dx, dy, dss, dzs)) = newton(&ds_cc) else {
            status = SolveStatus::Breakdown;
            break;
        };
        let alpha_max = max_step(dims, &lambda, &dss).min(max_step(dims, &lambda, &dzs));
        let alpha = (0.99 * alpha_max).min(1.0);
        if !(alpha > 1e-14) {
            status = SolveStatus::Breakdown;
            break;
        }
        let ds = w.apply(ScaleOp::WT, &dss);
        let dz = w.apply(ScaleOp::WInv, &dzs);
        x += dx * alpha;
        y += dy * alpha;
        for i in 0..s.len() {
            s[i] += alpha * ds[i];
            z[i] += alpha * dz[i];
        }
    }

    if status != SolveStatus::Optimal && status != SolveStatus::Infeasible {
        if let Some(b) = best {
            let r = scale * b.4 + offset;
            if scale * b.6 <= opts.accept_gap_tol * (1.0 + r.abs()) {
                (x, y, s, z, pobj, dobj, gap, pres, dres) = b;
            }
        }
    }
    let reported = scale * pobj + offset;
    let status = match status {
        SolveStatus::MaxIter | SolveStatus::Breakdown
            if pres <= opts.feas_tol
                && dres <= opts.feas_tol
                && scale * gap <= opts.accept_gap_tol * (1.0 + reported.abs()) =>
        {
            SolveStatus::Optimal
        }
        other => other,
    };

    Ok(RealSolution {
        x,
        y,
        s,
        z,
        status,
        iterations,
        primal_objective: scale * pobj + offset,
        dual_objective: scale * dobj + offset,
        gap: scale * gap,
        primal_residual: pres,
        dual_residual: dres,
        weak_duality_violation: weak_violation.max(0.0),
    })
}
