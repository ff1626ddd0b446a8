//! Cone algebra for the interior-point method: Jordan products, identity
//! elements, Nesterov-Todd scalings and step-length computations for the
//! nonnegative orthant, second-order cones and PSD cones (in `svec` form).

use nalgebra::{DMatrix, DVector};

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Cone product layout: `nonneg` scalars, then second-order cones of the
/// given sizes, then PSD blocks of the given orders stored as `svec`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConeDims {
    pub nonneg: usize,
    pub soc: Vec<usize>,
    pub psd: Vec<usize>,
}

impl ConeDims {
    pub fn total(&self) -> usize {
        self.nonneg + self.soc.iter().sum::<usize>() + self.psd.iter().map(|&n| svec_len(n)).sum::<usize>()
    }

    /// Barrier degree: number of nonneg entries, one per SOC, order per PSD block.
    pub fn degree(&self) -> usize {
        self.nonneg + self.soc.len() + self.psd.iter().sum::<usize>()
    }

    pub(crate) fn soc_ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        let mut off = self.nonneg;
        self.soc.iter().map(move |&k| {
            let r = off..off + k;
            off += k;
            r
        })
    }

    pub(crate) fn psd_ranges(&self) -> impl Iterator<Item = (usize, std::ops::Range<usize>)> + '_ {
        let mut off = self.nonneg + self.soc.iter().sum::<usize>();
        self.psd.iter().map(move |&n| {
            let len = svec_len(n);
            let r = off..off + len;
            off += len;
            (n, r)
        })
    }
}

pub fn svec_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Lower triangle, column-major, off-diagonal entries scaled by sqrt(2) so
/// that `svec(X) . svec(Y) = tr(XY)`.
pub fn svec(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(svec_len(n));
    for j in 0..n {
        for i in j..n {
            if i == j {
                out.push(m[(i, i)]);
            } else {
                out.push(SQRT2 * 0.5 * (m[(i, j)] + m[(j, i)]));
            }
        }
    }
    out
}

pub fn smat(v: &[f64], n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for j in 0..n {
        for i in j..n {
            if i == j {
                m[(i, i)] = v[k];
            } else {
                let x = v[k] / SQRT2;
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
            k += 1;
        }
    }
    m
}

/// Identity element of the cone product.
pub fn identity(dims: &ConeDims) -> Vec<f64> {
    let mut e = vec![0.0; dims.total()];
    e[..dims.nonneg].iter_mut().for_each(|v| *v = 1.0);
    for r in dims.soc_ranges() {
        e[r.start] = 1.0;
    }
    for (n, r) in dims.psd_ranges() {
        e[r].copy_from_slice(&svec(&DMatrix::identity(n, n)));
    }
    e
}

/// Jordan product `u o v`.
pub fn jordan(dims: &ConeDims, u: &[f64], v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; u.len()];
    for i in 0..dims.nonneg {
        out[i] = u[i] * v[i];
    }
    for r in dims.soc_ranges() {
        let (u0, v0) = (u[r.start], v[r.start]);
        out[r.start] = r.clone().map(|i| u[i] * v[i]).sum();
        for i in r.start + 1..r.end {
            out[i] = u0 * v[i] + v0 * u[i];
        }
    }
    for (n, r) in dims.psd_ranges() {
        let um = smat(&u[r.clone()], n);
        let vm = smat(&v[r.clone()], n);
        let prod = (&um * &vm + &vm * &um) * 0.5;
        out[r].copy_from_slice(&svec(&prod));
    }
    out
}

/// Solves `lambda o x = y` for `x`, with `lambda` a scaling point (diagonal
/// on PSD blocks).
pub fn jordan_div(dims: &ConeDims, lambda: &[f64], y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for i in 0..dims.nonneg {
        out[i] = y[i] / lambda[i];
    }
    for r in dims.soc_ranges() {
        let l0 = lambda[r.start];
        let tail = r.start + 1..r.end;
        let l1y1: f64 = tail.clone().map(|i| lambda[i] * y[i]).sum();
        let l1l1: f64 = tail.clone().map(|i| lambda[i] * lambda[i]).sum();
        let det = l0 * l0 - l1l1;
        let x0 = (l0 * y[r.start] - l1y1) / det;
        out[r.start] = x0;
        for i in tail {
            out[i] = (y[i] - x0 * lambda[i]) / l0;
        }
    }
    for (n, r) in dims.psd_ranges() {
        let diag = psd_diagonal(&lambda[r.clone()], n);
        let ym = smat(&y[r.clone()], n);
        let mut xm = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                xm[(i, j)] = 2.0 * ym[(i, j)] / (diag[i] + diag[j]);
            }
        }
        out[r].copy_from_slice(&svec(&xm));
    }
    out
}

fn psd_diagonal(v: &[f64], n: usize) -> Vec<f64> {
    let mut d = Vec::with_capacity(n);
    let mut k = 0;
    for j in 0..n {
        d.push(v[k]);
        k += n - j;
    }
    d
}

#[derive(Debug, Clone)]
struct SocScaling {
    w: DMatrix<f64>,
    w_inv: DMatrix<f64>,
}

#[derive(Debug, Clone)]
struct PsdScaling {
    r: DMatrix<f64>,
    r_inv: DMatrix<f64>,
}

/// Nesterov-Todd scaling `W` with `W^{-T} s = W z = lambda`.
#[derive(Debug, Clone)]
pub struct NtScaling {
    dims: ConeDims,
    d: Vec<f64>,
    soc: Vec<SocScaling>,
    psd: Vec<PsdScaling>,
    pub lambda: Vec<f64>,
}

/// Which variant of the scaling map to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleOp {
    W,
    WT,
    WInv,
    WInvT,
}

impl NtScaling {
    /// Returns `None` if `s` or `z` is not strictly inside the cone.
    pub fn compute(dims: &ConeDims, s: &[f64], z: &[f64]) -> Option<Self> {
        let mut d = Vec::with_capacity(dims.nonneg);
        let mut lambda = vec![0.0; s.len()];
        for i in 0..dims.nonneg {
            if s[i] <= 0.0 || z[i] <= 0.0 {
                return None;
            }
            d.push((s[i] / z[i]).sqrt());
            lambda[i] = (s[i] * z[i]).sqrt();
        }

        let mut soc = Vec::with_capacity(dims.soc.len());
        for r in dims.soc_ranges() {
            let k = r.len();
            let sv = &s[r.clone()];
            let zv = &z[r.clone()];
            let js = jnorm(sv)?;
            let jz = jnorm(zv)?;
            let beta = (js / jz).sqrt();
            let sbar: Vec<f64> = sv.iter().map(|v| v / js).collect();
            let zbar: Vec<f64> = zv.iter().map(|v| v / jz).collect();
            let dot: f64 = sbar.iter().zip(&zbar).map(|(a, b)| a * b).sum();
            let gamma = ((1.0 + dot) / 2.0).sqrt();
            let mut wbar = vec![0.0; k];
            wbar[0] = (sbar[0] + zbar[0]) / (2.0 * gamma);
            for i in 1..k {
                wbar[i] = (sbar[i] - zbar[i]) / (2.0 * gamma);
            }
            let mut hm = DMatrix::zeros(k, k);
            let mut hinv = DMatrix::zeros(k, k);
            hm[(0, 0)] = wbar[0];
            hinv[(0, 0)] = wbar[0];
            for i in 1..k {
                hm[(0, i)] = wbar[i];
                hm[(i, 0)] = wbar[i];
                hinv[(0, i)] = -wbar[i];
                hinv[(i, 0)] = -wbar[i];
                for j in 1..k {
                    let v = wbar[i] * wbar[j] / (1.0 + wbar[0]) + if i == j { 1.0 } else { 0.0 };
                    hm[(i, j)] = v;
                    hinv[(i, j)] = v;
                }
            }
            let w = hm * beta;
            let w_inv = hinv / beta;
            let lz = &w * DVector::from_column_slice(zv);
            lambda[r].copy_from_slice(lz.as_slice());
            soc.push(SocScaling { w, w_inv });
        }

        let mut psd = Vec::with_capacity(dims.psd.len());
        for (n, r) in dims.psd_ranges() {
            let l1 = smat(&s[r.clone()], n).cholesky()?.l();
            let l2 = smat(&z[r.clone()], n).cholesky()?.l();
            let svd = (l2.transpose() * &l1).svd(true, true);
            let u = svd.u?;
            let vt = svd.v_t?;
            let sig = svd.singular_values;
            if sig.iter().any(|&x| x <= 0.0 || !x.is_finite()) {
                return None;
            }
            let inv_sqrt = DMatrix::from_diagonal(&sig.map(|x| 1.0 / x.sqrt()));
            let rm = &l1 * vt.transpose() * &inv_sqrt;
            let r_inv = &inv_sqrt * u.transpose() * l2.transpose();
            let lam = DMatrix::from_diagonal(&sig);
            lambda[r].copy_from_slice(&svec(&lam));
            psd.push(PsdScaling { r: rm, r_inv });
        }

        Some(Self {
            dims: dims.clone(),
            d,
            soc,
            psd,
            lambda,
        })
    }

    pub fn apply(&self, op: ScaleOp, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        for i in 0..self.dims.nonneg {
            out[i] = match op {
                ScaleOp::W | ScaleOp::WT => self.d[i] * u[i],
                ScaleOp::WInv | ScaleOp::WInvT => u[i] / self.d[i],
            };
        }
        for (sc, r) in self.soc.iter().zip(self.dims.soc_ranges()) {
            let m = match op {
                ScaleOp::W | ScaleOp::WT => &sc.w,
                ScaleOp::WInv | ScaleOp::WInvT => &sc.w_inv,
            };
            let v = m * DVector::from_column_slice(&u[r.clone()]);
            out[r].copy_from_slice(v.as_slice());
        }
        for (sc, (n, r)) in self.psd.iter().zip(self.dims.psd_ranges()) {
            let um = smat(&u[r.clone()], n);
            let vm = match op {
                ScaleOp::W => sc.r.transpose() * um * &sc.r,
                ScaleOp::WT => &sc.r * um * sc.r.transpose(),
                ScaleOp::WInv => sc.r_inv.transpose() * um * &sc.r_inv,
                ScaleOp::WInvT => &sc.r_inv * um * sc.r_inv.transpose(),
            };
            out[r].copy_from_slice(&svec(&vm));
        }
        out
    }
}

fn jnorm(v: &[f64]) -> Option<f64> {
    let tail: f64 = v[1..].iter().map(|x| x * x).sum();
    let j = v[0] * v[0] - tail;
    if v[0] <= 0.0 || j <= 0.0 {
        None
    } else {
        Some(j.sqrt())
    }
}

/// `min { t : x + t e in K }` (negative when `x` is interior).
pub fn interior_shift(dims: &ConeDims, x: &[f64]) -> f64 {
    let mut t = f64::NEG_INFINITY;
    for &v in &x[..dims.nonneg] {
        t = t.max(-v);
    }
    for r in dims.soc_ranges() {
        let tail: f64 = x[r.start + 1..r.end].iter().map(|v| v * v).sum::<f64>().sqrt();
        t = t.max(tail - x[r.start]);
    }
    for (n, r) in dims.psd_ranges() {
        let m = smat(&x[r], n);
        let min = m.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min);
        t = t.max(-min);
    }
    t
}

/// Largest `alpha >= 0` with `lambda + alpha * dir` in the cone, where
/// `lambda` is a scaling point (diagonal PSD blocks). May be infinite.
pub fn max_step(dims: &ConeDims, lambda: &[f64], dir: &[f64]) -> f64 {
    let mut alpha = f64::INFINITY;
    for i in 0..dims.nonneg {
        if dir[i] < 0.0 {
            alpha = alpha.min(-lambda[i] / dir[i]);
        }
    }
    for r in dims.soc_ranges() {
        alpha = alpha.min(soc_step(&lambda[r.clone()], &dir[r]));
    }
    for (n, r) in dims.psd_ranges() {
        let diag = psd_diagonal(&lambda[r.clone()], n);
        let dm = smat(&dir[r], n);
        let mut scaled = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                scaled[(i, j)] = dm[(i, j)] / (diag[i] * diag[j]).sqrt();
            }
        }
        let min = scaled
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min < 0.0 {
            alpha = alpha.min(-1.0 / min);
        }
    }
    alpha
}

fn soc_step(x: &[f64], d: &[f64]) -> f64 {
    // Normalize x to unit J-norm so the quadratic is well scaled.
    let jx = match jnorm(x) {
        Some(v) => v,
        None => return 0.0,
    };
    let xs: Vec<f64> = x.iter().map(|v| v / jx).collect();
    let ds: Vec<f64> = d.iter().map(|v| v / jx).collect();
    let jd = |u: &[f64], v: &[f64]| u[0] * v[0] - u[1..].iter().zip(&v[1..]).map(|(a, b)| a * b).sum::<f64>();
    // f(t) = a t^2 + b t + c, c = 1
    let a = jd(&ds, &ds);
    let b = 2.0 * jd(&xs, &ds);
    let c = 1.0;
    let mut roots = Vec::new();
    if a.abs() < 1e-300 {
        if b < 0.0 {
            roots.push(-c / b);
        }
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            let qv = -0.5 * (b + b.signum() * sq);
            if qv != 0.0 {
                roots.push(qv / a);
                roots.push(c / qv);
            }
        }
    }
    let mut t = roots.into_iter().filter(|&r| r > 0.0).fold(f64::INFINITY, f64::min);
    if ds[0] < 0.0 {
        t = t.min(-xs[0] / ds[0]);
    }
    t
}
