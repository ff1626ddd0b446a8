//! Binaural beamformers: BMVDR, interaural transfer function (ITF) bounds,
//! the lifted semi-definite relaxation (SDCR), successive convex
//! optimization (SCO) and the hybrid of the two.
//!
//! Filters are distortionless towards the target: `w_L^H a = a_L` and
//! `w_R^H a = a_R`, so each output reproduces the target as received at its
//! reference microphone.

use std::fmt;

use log::warn;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cone::{self, ConeProblem, Equality, RankGap, SocConstraint, SolverOptions};
use crate::error::{Error, Result};
use crate::hermitian::{HermitianMatrix, C64};
use crate::scene::AtfVector;
use crate::stft::StftGrid;

/// Absolute tolerance on "ITF error minus bound" for constraint checks.
pub const FEAS_TOL: f64 = 1e-8;

/// Bounds at or below this are imposed as equalities.
const ZERO_BOUND: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bmvdr,
    Sco,
    Sdcr,
    Hybrid,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Bmvdr, Method::Sco, Method::Sdcr, Method::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            Method::Bmvdr => "bmvdr",
            Method::Sco => "sco",
            Method::Sdcr => "sdcr",
            Method::Hybrid => "hybrid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }

    /// Whether the method depends on the relaxation factor.
    pub fn is_relaxed(self) -> bool {
        self != Method::Bmvdr
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Left and right filters of one frequency bin.
#[derive(Debug, Clone, PartialEq)]
pub struct BinFilter {
    pub w_l: DVector<C64>,
    pub w_r: DVector<C64>,
}

impl BinFilter {
    pub fn m(&self) -> usize {
        self.w_l.len()
    }

    /// `[w_L; w_R]`.
    pub fn stacked(&self) -> DVector<C64> {
        let m = self.m();
        DVector::from_fn(2 * m, |i, _| if i < m { self.w_l[i] } else { self.w_r[i - m] })
    }

    pub fn from_stacked(w: &DVector<C64>) -> Self {
        let m = w.len() / 2;
        Self {
            w_l: w.rows(0, m).into_owned(),
            w_r: w.rows(m, m).into_owned(),
        }
    }

    /// `(w_L^H v, w_R^H v)`.
    pub fn respond(&self, v: &DVector<C64>) -> (C64, C64) {
        (self.w_l.dotc(v), self.w_r.dotc(v))
    }

    /// `w^H P~ w`.
    pub fn noise_power(&self, p_tilde: &HermitianMatrix) -> f64 {
        p_tilde.quadratic_form(&self.stacked())
    }

    /// Largest violation of `w_L^H a = a_L`, `w_R^H a = a_R`.
    pub fn distortion(&self, a: &AtfVector) -> f64 {
        let (l, r) = self.respond(a.values());
        (l - a.left()).norm().max((r - a.right()).norm())
    }
}

/// Per-bin bookkeeping of a design.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BinDiagnostics {
    /// Convex problems solved for this bin (0 for the closed form).
    pub solves: usize,
    pub converged: bool,
    pub rank_gap: Option<RankGap>,
    /// Which constituent produced the filter (hybrid only).
    pub path: Option<Method>,
    /// Solver failure replaced the design by BMVDR.
    pub fallback: bool,
    /// Objective of the last convex solve (`tr(W P~)` for SDCR).
    pub objective: Option<f64>,
    /// Largest `gap / (1 + |objective|)` over optimal solves.
    pub max_relative_gap: f64,
    pub max_weak_duality_violation: f64,
    pub non_optimal_solves: usize,
}

impl BinDiagnostics {
    fn record(&mut self, sol: &cone::ConeSolution) {
        self.solves += 1;
        self.objective = Some(sol.objective);
        self.max_weak_duality_violation = self.max_weak_duality_violation.max(sol.weak_duality_violation);
        if sol.is_optimal() {
            let rel = sol.duality_gap / (1.0 + sol.objective.abs());
            self.max_relative_gap = self.max_relative_gap.max(rel);
        } else {
            self.non_optimal_solves += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinDesign {
    pub filter: BinFilter,
    pub diag: BinDiagnostics,
}

/// Filters of every bin for one method.
#[derive(Debug, Clone, PartialEq)]
pub struct BinauralFilter {
    pub method: Method,
    pub bins: Vec<BinDesign>,
}

impl BinauralFilter {
    pub fn total_solves(&self) -> usize {
        self.bins.iter().map(|b| b.diag.solves).sum()
    }

    pub fn filters(&self) -> Vec<BinFilter> {
        self.bins.iter().map(|b| b.filter.clone()).collect()
    }
}

/// Closed-form binaural MVDR.
pub fn bmvdr(p_n: &HermitianMatrix, a: &AtfVector) -> Result<BinFilter> {
    if p_n.dim() != a.len() {
        return Err(Error::Dimension(format!(
            "CPSD is {0}x{0}, ATF has {1} entries",
            p_n.dim(),
            a.len()
        )));
    }
    if a.left().norm() == 0.0 && a.right().norm() == 0.0 {
        return Err(Error::Degenerate(
            "both reference entries of the target ATF vanish".into(),
        ));
    }
    let x = p_n.inverse().matrix() * a.values();
    let denom = a.values().dotc(&x).re;
    if !(denom > 0.0) {
        return Err(Error::Degenerate(format!("a^H P^-1 a = {denom} is not positive")));
    }
    Ok(BinFilter {
        w_l: &x * (a.left().conj() / denom),
        w_r: &x * (a.right().conj() / denom),
    })
}

/// `(|a_L|^2 + |a_R|^2) / (a^H P^-1 a)`.
pub fn bmvdr_noise_power(p_n: &HermitianMatrix, a: &AtfVector) -> f64 {
    let x = p_n.inverse().matrix() * a.values();
    (a.left().norm_sqr() + a.right().norm_sqr()) / a.values().dotc(&x).re
}

/// Input ITF `b_L / b_R`.
pub fn itf_in(b: &AtfVector) -> Option<C64> {
    b.itf()
}

/// Output ITF `(w_L^H b) / (w_R^H b)`.
pub fn itf_out(w: &BinFilter, b: &AtfVector) -> Option<C64> {
    let (l, r) = w.respond(b.values());
    (r.norm() > 0.0).then(|| l / r)
}

/// `|ITF_out - ITF_in|`, infinite where either ITF is undefined.
pub fn itf_error(w: &BinFilter, b: &AtfVector) -> f64 {
    match (itf_out(w, b), itf_in(b)) {
        (Some(o), Some(i)) => (o - i).norm(),
        _ => f64::INFINITY,
    }
}

/// ITF error of BMVDR, `|a_L/a_R - b_L/b_R|`.
pub fn bmvdr_itf_error(a: &AtfVector, b: &AtfVector) -> Result<f64> {
    match (a.itf(), b.itf()) {
        (Some(ia), Some(ib)) => Ok((ia - ib).norm()),
        _ => Err(Error::Degenerate("right reference entry vanishes".into())),
    }
}

/// Per-constraint bounds of the relaxed problem.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxationSpec {
    pub c: f64,
    pub slack: f64,
    pub k_max: usize,
    pub constraints: Vec<AtfVector>,
    /// `c` times the BMVDR ITF error of each constraint.
    pub eps: Vec<f64>,
    /// `(c + slack)` times the BMVDR ITF error, used by the hybrid switch.
    pub eps_tilde: Vec<f64>,
}

impl RelaxationSpec {
    pub fn m(&self) -> usize {
        self.constraints.len()
    }

    /// Constraints violated by `w` beyond `FEAS_TOL`, against `bounds`.
    pub fn violations(&self, w: &BinFilter, bounds: &[f64]) -> usize {
        self.constraints
            .iter()
            .zip(bounds)
            .filter(|(b, e)| !(itf_error(w, b) <= *e + FEAS_TOL))
            .count()
    }

    pub fn satisfied_by(&self, w: &BinFilter) -> bool {
        self.violations(w, &self.eps) == 0
    }
}

pub fn epsilon_bounds(
    c: f64,
    a: &AtfVector,
    constraints: &[AtfVector],
    slack: f64,
    k_max: usize,
) -> Result<RelaxationSpec> {
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::InvalidArgument(format!("relaxation factor {c} outside [0, 1]")));
    }
    if !(slack >= 0.0) {
        return Err(Error::InvalidArgument(format!("slack {slack} must be nonnegative")));
    }
    if k_max == 0 {
        return Err(Error::InvalidArgument("k_max must be positive".into()));
    }
    let base: Vec<f64> = constraints
        .iter()
        .map(|b| bmvdr_itf_error(a, b))
        .collect::<Result<_>>()?;
    Ok(RelaxationSpec {
        c,
        slack,
        k_max,
        constraints: constraints.to_vec(),
        eps: base.iter().map(|e| c * e).collect(),
        eps_tilde: base.iter().map(|e| (c + slack) * e).collect(),
    })
}

/// `M` with `w^H M w = |b_R|^2 |w_R^H b|^2 (err^2 - eps^2)`, where `err` is
/// the ITF error of `w` for `b`.
pub fn constraint_matrix(b: &AtfVector, eps: f64) -> HermitianMatrix {
    let m = b.len();
    let bb = b.values() * b.values().adjoint();
    let (bl, br) = (b.left(), b.right());
    let a_blk = &bb * C64::new(br.norm_sqr(), 0.0);
    let b_blk = &bb * (-bl.conj() * br);
    let c_blk = &bb * C64::new(bl.norm_sqr() - br.norm_sqr() * eps * eps, 0.0);
    let mut out = nalgebra::DMatrix::zeros(2 * m, 2 * m);
    out.view_mut((0, 0), (m, m)).copy_from(&a_blk);
    out.view_mut((0, m), (m, m)).copy_from(&b_blk);
    out.view_mut((m, 0), (m, m)).copy_from(&b_blk.adjoint());
    out.view_mut((m, m), (m, m)).copy_from(&c_blk);
    HermitianMatrix::symmetrized(out)
}

/// Rows of `w_L^H a = a_L`, `w_R^H a = a_R` in the solver's `f . w` form.
fn distortionless_rows(a: &AtfVector) -> Vec<Equality> {
    let m = a.len();
    let ca = a.values().map(|v| v.conj());
    let mut left = DVector::zeros(2 * m);
    left.rows_mut(0, m).copy_from(&ca);
    let mut right = DVector::zeros(2 * m);
    right.rows_mut(m, m).copy_from(&ca);
    vec![
        Equality {
            coeffs: left,
            rhs: a.left().conj(),
        },
        Equality {
            coeffs: right,
            rhs: a.right().conj(),
        },
    ]
}

/// Row `f` with `f . w = conj(w_L^H b - r w_R^H b)`, `r = b_L / b_R`.
fn itf_row(b: &AtfVector) -> DVector<C64> {
    let m = b.len();
    let r = b.left() / b.right();
    let cb = b.values().map(|v| v.conj());
    let mut row = DVector::zeros(2 * m);
    row.rows_mut(0, m).copy_from(&cb);
    row.rows_mut(m, m).copy_from(&(cb * -r.conj()));
    row
}

fn check_inputs(p_tilde: &HermitianMatrix, a: &AtfVector, spec: &RelaxationSpec) -> Result<()> {
    if p_tilde.dim() != 2 * a.len() {
        return Err(Error::Dimension(format!(
            "lifted CPSD is {0}x{0}, expected {1}",
            p_tilde.dim(),
            2 * a.len()
        )));
    }
    if spec.constraints.iter().any(|b| b.len() != a.len()) || spec.eps.len() != spec.m() {
        return Err(Error::Dimension("constraint ATFs do not match the target ATF".into()));
    }
    Ok(())
}

fn bmvdr_from_lift(p_tilde: &HermitianMatrix, a: &AtfVector) -> Result<BinFilter> {
    bmvdr(&p_tilde.principal_block(0, a.len()), a)
}

/// Builds the SDCR cone program of one bin.
pub fn sdcr_problem(p_tilde: &HermitianMatrix, a: &AtfVector, spec: &RelaxationSpec) -> ConeProblem {
    let mut prob = ConeProblem::new(2 * a.len());
    prob.lmi = true;
    prob.trace_cost = Some(p_tilde.clone());
    prob.equalities = distortionless_rows(a);
    for (b, &e) in spec.constraints.iter().zip(&spec.eps) {
        if e <= ZERO_BOUND {
            prob.equalities.push(Equality {
                coeffs: itf_row(b),
                rhs: C64::new(0.0, 0.0),
            });
        } else {
            prob.trace_ineqs.push(constraint_matrix(b, e));
        }
    }
    prob
}

/// Semi-definite relaxation; one convex solve.
pub fn sdcr_solve(
    p_tilde: &HermitianMatrix,
    a: &AtfVector,
    spec: &RelaxationSpec,
    opts: &SolverOptions,
) -> Result<BinDesign> {
    check_inputs(p_tilde, a, spec)?;
    let sol = cone::solve(&sdcr_problem(p_tilde, a, spec), opts)?;
    let mut diag = BinDiagnostics::default();
    diag.record(&sol);
    diag.path = Some(Method::Sdcr);
    if !sol.is_optimal() {
        warn!(
            "SDCR solve ended with status {:?}; using BMVDR for this bin",
            sol.status
        );
        diag.fallback = true;
        return Ok(BinDesign {
            filter: bmvdr_from_lift(p_tilde, a)?,
            diag,
        });
    }
    diag.rank_gap = cone::extract_rank_gap(&sol);
    diag.converged = true;
    Ok(BinDesign {
        filter: BinFilter::from_stacked(&sol.w),
        diag,
    })
}

/// One SCO subproblem: quadratic objective, distortionless equalities and
/// `|w_L^H b_i - r_i w_R^H b_i| <= eps_i |w_prev_R^H b_i|`.
pub fn sco_subproblem(
    p_tilde: &HermitianMatrix,
    a: &AtfVector,
    spec: &RelaxationSpec,
    prev: &BinFilter,
) -> ConeProblem {
    let mut prob = ConeProblem::new(2 * a.len());
    prob.quadratic_cost = Some(p_tilde.clone());
    prob.equalities = distortionless_rows(a);
    for (b, &e) in spec.constraints.iter().zip(&spec.eps) {
        let (_, den) = prev.respond(b.values());
        let radius = e * den.norm();
        if radius <= ZERO_BOUND {
            prob.equalities.push(Equality {
                coeffs: itf_row(b),
                rhs: C64::new(0.0, 0.0),
            });
        } else {
            prob.soc.push(SocConstraint {
                coeffs: itf_row(b),
                radius,
            });
        }
    }
    prob
}

/// Whether `w` meets every cone of the SCO subproblem built around `prev`.
fn meets_subproblem(w: &BinFilter, spec: &RelaxationSpec, prev: &BinFilter) -> bool {
    spec.constraints.iter().zip(&spec.eps).all(|(b, &e)| {
        let (_, den) = prev.respond(b.values());
        let (u, v) = w.respond(b.values());
        let r = b.left() / b.right();
        let lhs = (u - r * v).norm();
        let radius = e * den.norm();
        lhs <= radius * (1.0 + 1e-12) + 1e-15 * (u.norm() + (r * v).norm())
    })
}

/// Successive convex optimization starting from BMVDR.
///
/// Each subproblem minimizes the BMVDR objective under the same equalities,
/// so when BMVDR already meets the subproblem's cones it is the exact
/// optimum and is used without running the interior-point method. It still
/// counts as a solve.
pub fn sco_solve(
    p_tilde: &HermitianMatrix,
    a: &AtfVector,
    spec: &RelaxationSpec,
    opts: &SolverOptions,
) -> Result<BinDesign> {
    check_inputs(p_tilde, a, spec)?;
    let unconstrained = bmvdr_from_lift(p_tilde, a)?;
    let mut current = unconstrained.clone();
    let mut diag = BinDiagnostics {
        path: Some(Method::Sco),
        ..Default::default()
    };
    while diag.solves < spec.k_max {
        if meets_subproblem(&unconstrained, spec, &current) {
            diag.solves += 1;
            diag.objective = Some(unconstrained.noise_power(p_tilde));
            current = unconstrained.clone();
        } else {
            let sol = cone::solve(&sco_subproblem(p_tilde, a, spec, &current), opts)?;
            diag.record(&sol);
            if !sol.is_optimal() {
                warn!(
                    "SCO subproblem {} ended with status {:?}; keeping the previous iterate",
                    diag.solves, sol.status
                );
                diag.fallback = true;
                break;
            }
            current = BinFilter::from_stacked(&sol.w);
        }
        if spec.satisfied_by(&current) {
            diag.converged = true;
            break;
        }
    }
    Ok(BinDesign { filter: current, diag })
}

/// SDCR first; SCO when the SDCR filter misses the slackened bounds.
pub fn hybrid_solve(
    p_tilde: &HermitianMatrix,
    a: &AtfVector,
    spec: &RelaxationSpec,
    opts: &SolverOptions,
) -> Result<BinDesign> {
    let first = sdcr_solve(p_tilde, a, spec, opts)?;
    if spec.violations(&first.filter, &spec.eps_tilde) == 0 {
        let mut out = first;
        out.diag.path = Some(Method::Sdcr);
        return Ok(out);
    }
    let mut second = sco_solve(p_tilde, a, spec, opts)?;
    let d = &mut second.diag;
    d.solves += first.diag.solves;
    d.non_optimal_solves += first.diag.non_optimal_solves;
    d.max_relative_gap = d.max_relative_gap.max(first.diag.max_relative_gap);
    d.max_weak_duality_violation = d.max_weak_duality_violation.max(first.diag.max_weak_duality_violation);
    d.rank_gap = first.diag.rank_gap;
    d.path = Some(Method::Sco);
    Ok(second)
}

/// Designs one bin with `method`.
pub fn design_bin(
    method: Method,
    p_tilde: &HermitianMatrix,
    a: &AtfVector,
    spec: &RelaxationSpec,
    opts: &SolverOptions,
) -> Result<BinDesign> {
    match method {
        Method::Bmvdr => Ok(BinDesign {
            filter: bmvdr_from_lift(p_tilde, a)?,
            diag: BinDiagnostics {
                converged: true,
                objective: Some(bmvdr_noise_power(&p_tilde.principal_block(0, a.len()), a)),
                ..Default::default()
            },
        }),
        Method::Sdcr => sdcr_solve(p_tilde, a, spec, opts),
        Method::Sco => sco_solve(p_tilde, a, spec, opts),
        Method::Hybrid => hybrid_solve(p_tilde, a, spec, opts),
    }
}

/// Inputs of one bin.
#[derive(Debug, Clone)]
pub struct BinProblem {
    pub p_tilde: HermitianMatrix,
    pub target: AtfVector,
    pub spec: RelaxationSpec,
}

/// Designs all bins in parallel; results are ordered by bin.
pub fn design_all(method: Method, bins: &[BinProblem], opts: &SolverOptions) -> Result<BinauralFilter> {
    let designs = bins
        .par_iter()
        .map(|b| design_bin(method, &b.p_tilde, &b.target, &b.spec, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(BinauralFilter { method, bins: designs })
}

/// Left and right outputs `w_L^H y`, `w_R^H y` per bin and frame.
pub fn apply_filters(filters: &[BinFilter], mics: &[StftGrid]) -> Result<(StftGrid, StftGrid)> {
    let Some(first) = mics.first() else {
        return Err(Error::Dimension("no microphone grids".into()));
    };
    if mics.iter().any(|g| !g.same_shape(first)) {
        return Err(Error::Dimension("microphone grids differ in shape".into()));
    }
    if filters.len() != first.n_bins() {
        return Err(Error::Dimension(format!(
            "{} filters for {} bins",
            filters.len(),
            first.n_bins()
        )));
    }
    if filters
        .iter()
        .any(|f| f.w_l.len() != mics.len() || f.w_r.len() != mics.len())
    {
        return Err(Error::Dimension("filter length differs from microphone count".into()));
    }
    let (nf, nb) = (first.n_frames(), first.n_bins());
    let mut left = StftGrid::zeros(nf, nb);
    let mut right = StftGrid::zeros(nf, nb);
    for f in 0..nf {
        for (k, w) in filters.iter().enumerate() {
            let mut l = C64::new(0.0, 0.0);
            let mut r = C64::new(0.0, 0.0);
            for (m, g) in mics.iter().enumerate() {
                let y = g.get(f, k);
                l += w.w_l[m].conj() * y;
                r += w.w_r[m].conj() * y;
            }
            left.set(f, k, l);
            right.set(f, k, r);
        }
    }
    Ok((left, right))
}
