//! Plain-text dump of a [`ConeProblem`] for cross-checking with other solvers.
//!
//! ```text
//! cone_problem 1
//! dim 2
//! lmi 1
//! trace_cost 2 2
//! 1 0 0 0
//! 0 0 1 0
//! quadratic_cost none
//! equalities 1
//! 1 0 1 0 rhs 1 0
//! trace_ineqs 0
//! soc 0
//! ```
//!
//! Matrices are written row-major, one row per line, each complex entry as
//! `re im`. Floats use Rust's shortest round-trip representation.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use super::{ConeProblem, Equality, SocConstraint};
use crate::error::{Error, Result};
use crate::hermitian::{HermitianMatrix, C64};

const MAGIC: &str = "cone_problem";
const VERSION: u32 = 1;

pub fn write_dump(problem: &ConeProblem) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC} {VERSION}");
    let _ = writeln!(out, "dim {}", problem.dim);
    let _ = writeln!(out, "lmi {}", u8::from(problem.lmi));
    write_opt_matrix(&mut out, "trace_cost", problem.trace_cost.as_ref());
    write_opt_matrix(&mut out, "quadratic_cost", problem.quadratic_cost.as_ref());
    let _ = writeln!(out, "equalities {}", problem.equalities.len());
    for e in &problem.equalities {
        write_row(&mut out, &e.coeffs);
        let _ = writeln!(out, " rhs {:?} {:?}", e.rhs.re, e.rhs.im);
    }
    let _ = writeln!(out, "trace_ineqs {}", problem.trace_ineqs.len());
    for g in &problem.trace_ineqs {
        write_matrix(&mut out, "matrix", g);
    }
    let _ = writeln!(out, "soc {}", problem.soc.len());
    for s in &problem.soc {
        write_row(&mut out, &s.coeffs);
        let _ = writeln!(out, " radius {:?}", s.radius);
    }
    out
}

fn write_row(out: &mut String, v: &DVector<C64>) {
    let parts: Vec<String> = v.iter().map(|z| format!("{:?} {:?}", z.re, z.im)).collect();
    out.push_str(&parts.join(" "));
}

fn write_matrix(out: &mut String, label: &str, h: &HermitianMatrix) {
    let m = h.matrix();
    let _ = writeln!(out, "{label} {} {}", m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        let parts: Vec<String> = m.row(r).iter().map(|z| format!("{:?} {:?}", z.re, z.im)).collect();
        let _ = writeln!(out, "{}", parts.join(" "));
    }
}

fn write_opt_matrix(out: &mut String, label: &str, h: Option<&HermitianMatrix>) {
    match h {
        Some(h) => write_matrix(out, label, h),
        None => {
            let _ = writeln!(out, "{label} none");
        }
    }
}

struct Tokens<'a> {
    iter: std::str::SplitWhitespace<'a>,
}

impl<'a> Tokens<'a> {
    fn next(&mut self) -> Result<&'a str> {
        self.iter
            .next()
            .ok_or_else(|| Error::InvalidArgument("unexpected end of cone problem dump".into()))
    }

    fn expect(&mut self, word: &str) -> Result<()> {
        let t = self.next()?;
        if t == word {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("expected `{word}`, found `{t}`")))
        }
    }

    fn parse<T: std::str::FromStr>(&mut self) -> Result<T> {
        let t = self.next()?;
        t.parse()
            .map_err(|_| Error::InvalidArgument(format!("cannot parse `{t}` in cone problem dump")))
    }

    fn complex(&mut self) -> Result<C64> {
        Ok(C64::new(self.parse()?, self.parse()?))
    }

    fn row(&mut self, n: usize) -> Result<DVector<C64>> {
        let mut v = DVector::zeros(n);
        for i in 0..n {
            v[i] = self.complex()?;
        }
        Ok(v)
    }

    fn matrix_body(&mut self) -> Result<HermitianMatrix> {
        let rows: usize = self.parse()?;
        let cols: usize = self.parse()?;
        if rows != cols {
            return Err(Error::Dimension(format!("{rows}x{cols} matrix is not square")));
        }
        let mut m = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m[(r, c)] = self.complex()?;
            }
        }
        HermitianMatrix::new(m)
    }

    fn opt_matrix(&mut self, label: &str) -> Result<Option<HermitianMatrix>> {
        self.expect(label)?;
        let save = self.iter.clone();
        if self.next()? == "none" {
            return Ok(None);
        }
        self.iter = save;
        self.matrix_body().map(Some)
    }
}

pub fn parse_dump(text: &str) -> Result<ConeProblem> {
    let mut t = Tokens {
        iter: text.split_whitespace(),
    };
    t.expect(MAGIC)?;
    let version: u32 = t.parse()?;
    if version != VERSION {
        return Err(Error::InvalidArgument(format!("unsupported dump version {version}")));
    }
    t.expect("dim")?;
    let dim: usize = t.parse()?;
    t.expect("lmi")?;
    let lmi = t.parse::<u8>()? != 0;
    let mut problem = ConeProblem::new(dim);
    problem.lmi = lmi;
    problem.trace_cost = t.opt_matrix("trace_cost")?;
    problem.quadratic_cost = t.opt_matrix("quadratic_cost")?;
    t.expect("equalities")?;
    let k: usize = t.parse()?;
    for _ in 0..k {
        let coeffs = t.row(dim)?;
        t.expect("rhs")?;
        let rhs = t.complex()?;
        problem.equalities.push(Equality { coeffs, rhs });
    }
    t.expect("trace_ineqs")?;
    let m: usize = t.parse()?;
    for _ in 0..m {
        t.expect("matrix")?;
        problem.trace_ineqs.push(t.matrix_body()?);
    }
    t.expect("soc")?;
    let p: usize = t.parse()?;
    for _ in 0..p {
        let coeffs = t.row(dim)?;
        t.expect("radius")?;
        let radius = t.parse()?;
        problem.soc.push(SocConstraint { coeffs, radius });
    }
    Ok(problem)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut p = ConeProblem::new(2);
        p.lmi = true;
        p.trace_cost = Some(
            HermitianMatrix::new(DMatrix::from_row_slice(
                2,
                2,
                &[
                    C64::new(2.0, 0.0),
                    C64::new(0.1, -0.3),
                    C64::new(0.1, 0.3),
                    C64::new(1.0 / 3.0, 0.0),
                ],
            ))
            .unwrap(),
        );
        p.equalities.push(Equality {
            coeffs: DVector::from_vec(vec![C64::new(1.0, 0.5), C64::new(-0.25, 1e-17)]),
            rhs: C64::new(1.0, 0.0),
        });
        p.trace_ineqs.push(HermitianMatrix::identity(2).scale(-1.0));
        p.soc.push(SocConstraint {
            coeffs: DVector::from_vec(vec![C64::new(0.0, 1.0), C64::new(std::f64::consts::PI, 0.0)]),
            radius: 0.7,
        });
        let text = write_dump(&p);
        assert!(text.starts_with("cone_problem 1\ndim 2\n"));
        let back = parse_dump(&text).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_dump("cone_problem 2").is_err());
        assert!(parse_dump("nonsense").is_err());
        assert!(parse_dump("cone_problem 1\ndim 2\nlmi 0\ntrace_cost none\n").is_err());
    }
}
