//! Dense complex Hermitian matrix kernels.
//!
//! All tolerances in this module are relative to the spectral radius of the
//! input (clamped below at 1), so that matrices whose magnitudes differ by
//! orders of magnitude across frequency are treated uniformly.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

/// Default tolerance for PSD tests.
pub const PSD_TOL: f64 = 1e-9;

/// Relative tolerance on Hermitian symmetry.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Singular-value cutoff used for pseudo-inverses, relative to the largest
/// eigenvalue magnitude.
pub const PINV_CUTOFF: f64 = 1e-10;

/// A dense complex matrix with `H[(i, j)] == conj(H[(j, i)])`.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianMatrix(DMatrix<C64>);

impl HermitianMatrix {
    /// Wraps `m` after checking Hermitian symmetry, then symmetrizes it exactly.
    pub fn new(m: DMatrix<C64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Dimension(format!(
                "Hermitian matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let scale = m.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let asymmetry = (&m - m.adjoint()).iter().map(|v| v.norm()).fold(0.0, f64::max);
        let tolerance = SYMMETRY_TOL * scale.max(f64::MIN_POSITIVE);
        if asymmetry > tolerance && asymmetry > 0.0 {
            return Err(Error::NotHermitian { asymmetry, tolerance });
        }
        Ok(Self::symmetrized(m))
    }

    /// Builds `(m + m^H) / 2` without checking.
    pub fn symmetrized(m: DMatrix<C64>) -> Self {
        let adj = m.adjoint();
        Self((m + adj).scale(0.5))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    /// `v v^H`.
    pub fn outer(v: &DVector<C64>) -> Self {
        Self::symmetrized(v * v.adjoint())
    }

    pub fn from_real_diagonal(d: &[f64]) -> Self {
        let n = d.len();
        let mut m = DMatrix::zeros(n, n);
        for (i, &x) in d.iter().enumerate() {
            m[(i, i)] = C64::new(x, 0.0);
        }
        Self(m)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<C64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.0[(i, i)].re).sum()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self(self.0.scale(s))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::Dimension(format!(
                "cannot add {}x{} and {}x{}",
                self.dim(),
                self.dim(),
                other.dim(),
                other.dim()
            )));
        }
        Ok(Self(&self.0 + &other.0))
    }

    /// `v^H H v` (real by symmetry).
    pub fn quadratic_form(&self, v: &DVector<C64>) -> f64 {
        (v.adjoint() * &self.0 * v)[(0, 0)].re
    }

    /// `tr(self * other)`, real for Hermitian arguments.
    pub fn trace_product(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(other.0.transpose().iter())
            .map(|(a, b)| (a * b).re)
            .sum()
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Eigenvalues in ascending order with matching eigenvectors as columns.
    pub fn eigen(&self) -> (DVector<f64>, DMatrix<C64>) {
        let n = self.dim();
        if n == 0 {
            return (DVector::zeros(0), DMatrix::zeros(0, 0));
        }
        let eig = self.0.clone().symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
        let mut vectors = DMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            vectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        (values, vectors)
    }

    pub fn eigenvalues(&self) -> DVector<f64> {
        if self.dim() == 0 {
            return DVector::zeros(0);
        }
        let mut v: Vec<f64> = self.0.clone().symmetric_eigenvalues().iter().copied().collect();
        v.sort_by(f64::total_cmp);
        DVector::from_vec(v)
    }

    pub fn spectral_radius(&self) -> f64 {
        self.eigenvalues().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Pseudo-inverse via eigendecomposition; eigenvalues with magnitude below
    /// `PINV_CUTOFF` times the largest are treated as zero.
    pub fn pinv(&self) -> Self {
        let n = self.dim();
        let (vals, vecs) = self.eigen();
        let largest = vals.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
        let mut out = DMatrix::zeros(n, n);
        if largest == 0.0 {
            return Self(out);
        }
        for k in 0..n {
            if vals[k].abs() > PINV_CUTOFF * largest {
                let v = vecs.column(k);
                out += (v * v.adjoint()).scale(1.0 / vals[k]);
            }
        }
        Self::symmetrized(out)
    }

    /// Inverse for well-conditioned positive definite matrices, falling back
    /// to the pseudo-inverse.
    pub fn inverse(&self) -> Self {
        match self.0.clone().cholesky() {
            Some(ch) => Self::symmetrized(ch.inverse()),
            None => self.pinv(),
        }
    }

    /// Principal sub-block `[start, start + len)`.
    pub fn principal_block(&self, start: usize, len: usize) -> Self {
        Self(self.0.view((start, start), (len, len)).into_owned())
    }

    /// Block-diagonal lift `diag(self, self)`.
    pub fn block_diag_lift(&self) -> Self {
        let n = self.dim();
        let mut out = DMatrix::zeros(2 * n, 2 * n);
        out.view_mut((0, 0), (n, n)).copy_from(&self.0);
        out.view_mut((n, n), (n, n)).copy_from(&self.0);
        Self(out)
    }
}

/// `true` iff the smallest eigenvalue is at least `-tol * max(1, spectral radius)`.
pub fn is_psd(h: &HermitianMatrix, tol: f64) -> bool {
    psd_margin(h) >= -tol
}

/// Smallest eigenvalue divided by `max(1, spectral radius)`.
pub fn psd_margin(h: &HermitianMatrix) -> f64 {
    if h.dim() == 0 {
        return 0.0;
    }
    let vals = h.eigenvalues();
    let radius = vals.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
    vals[0] / radius.max(1.0)
}

/// Generalized Schur complements of a 2x2 block partition and the
/// three-condition PSD certificate built from the top-left block.
#[derive(Debug, Clone)]
pub struct SchurComplements {
    /// `C - B^H A^+ B`.
    pub s1: HermitianMatrix,
    /// `A - B C^+ B^H`.
    pub s2: HermitianMatrix,
    /// `A >= 0`, `(I - A A^+) B = 0` and `S1 >= 0`.
    pub psd_certificate: bool,
}

/// Splits `z` into `[[A, B], [B^H, C]]` with `A` of size `split` and computes
/// both generalized Schur complements.
pub fn generalized_schur(z: &HermitianMatrix, split: usize) -> Result<SchurComplements> {
    let n = z.dim();
    if split == 0 || split >= n {
        return Err(Error::InvalidArgument(format!(
            "split {split} must lie strictly inside (0, {n})"
        )));
    }
    let m = z.matrix();
    let a = HermitianMatrix::symmetrized(m.view((0, 0), (split, split)).into_owned());
    let c = HermitianMatrix::symmetrized(m.view((split, split), (n - split, n - split)).into_owned());
    let b = m.view((0, split), (split, n - split)).into_owned();

    let a_pinv = a.pinv();
    let c_pinv = c.pinv();
    let s1 = HermitianMatrix::symmetrized(c.matrix() - b.adjoint() * a_pinv.matrix() * &b);
    let s2 = HermitianMatrix::symmetrized(a.matrix() - &b * c_pinv.matrix() * b.adjoint());

    let scale = z.spectral_radius().max(1.0);
    let tol = PSD_TOL * scale;
    let a_psd = a.min_eigenvalue() >= -tol;
    let range_residual = (DMatrix::<C64>::identity(split, split) - a.matrix() * a_pinv.matrix()) * &b;
    let range_ok = range_residual.iter().map(|v| v.norm()).fold(0.0, f64::max) <= PINV_CUTOFF.sqrt() * scale;
    let s1_psd = s1.min_eigenvalue() >= -tol;

    Ok(SchurComplements {
        s1,
        s2,
        psd_certificate: a_psd && range_ok && s1_psd,
    })
}

/// Real symmetric embedding `[[Re H, -Im H], [Im H, Re H]]`.
pub fn realify(h: &HermitianMatrix) -> DMatrix<f64> {
    realify_matrix(h.matrix())
}

/// Real embedding of an arbitrary complex matrix; a ring homomorphism.
pub fn realify_matrix(m: &DMatrix<C64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    let mut out = DMatrix::zeros(2 * r, 2 * c);
    for i in 0..r {
        for j in 0..c {
            let v = m[(i, j)];
            out[(i, j)] = v.re;
            out[(i, j + c)] = -v.im;
            out[(i + r, j)] = v.im;
            out[(i + r, j + c)] = v.re;
        }
    }
    out
}
