//! Preconditioned conjugate gradients on symmetric positive semidefinite operators.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct CgOptions {
    /// Relative residual target `|r| <= tol * |b|`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self { tol: 1e-13, max_iter: 20_000 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CgStats {
    pub iterations: usize,
    pub residual: f64,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solves `A x = b` on the range of `project`, which must be an orthogonal
/// projector commuting with `A` (removal of the operator kernel).
///
/// `precond` holds the inverse diagonal; `x` is the initial guess and the output.
pub fn cg<A, P>(apply: A, b: &[f64], precond: &[f64], project: P, x: &mut [f64], opts: CgOptions) -> Result<CgStats>
where
    A: Fn(&[f64], &mut [f64]),
    P: Fn(&mut [f64]),
{
    let n = b.len();
    let mut rhs = b.to_vec();
    project(&mut rhs);
    project(x);
    let bnorm = norm(&rhs);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgStats { iterations: 0, residual: 0.0 });
    }
    let target = opts.tol * bnorm;
    let mut ax = vec![0.0; n];
    apply(x, &mut ax);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    project(&mut r);
    let mut z: Vec<f64> = r.iter().zip(precond).map(|(r, m)| r * m).collect();
    project(&mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut rnorm = norm(&r);
    for it in 0..opts.max_iter {
        if rnorm <= target {
            return Ok(CgStats { iterations: it, residual: rnorm / bnorm });
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::NoConvergence { iterations: it, residual: rnorm / bnorm });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        project(&mut r);
        // periodic true-residual refresh against drift
        if (it + 1) % 200 == 0 {
            apply(x, &mut ax);
            for i in 0..n {
                r[i] = rhs[i] - ax[i];
            }
            project(&mut r);
        }
        rnorm = norm(&r);
        for i in 0..n {
            z[i] = r[i] * precond[i];
        }
        project(&mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    if rnorm <= target {
        Ok(CgStats { iterations: opts.max_iter, residual: rnorm / bnorm })
    } else {
        Err(Error::NoConvergence { iterations: opts.max_iter, residual: rnorm / bnorm })
    }
}

/// Weighted mean removal: `x -= (w·x / Σw)` per group.
pub fn remove_weighted_mean(x: &mut [f64], w: &[f64]) {
    let total: f64 = w.iter().sum();
    let m = dot(x, w) / total;
    x.iter_mut().for_each(|v| *v -= m);
}
