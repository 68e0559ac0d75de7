use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::linalg::SparseMatrix;

/// A symmetric positive-definite operator `x ↦ A x`.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
}

impl LinearOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let n = self.nrows();
        out.iter_mut().for_each(|o| *o = 0.0);
        // Column-major storage: accumulate column by column.
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                let col = &self.as_slice()[j * n..(j + 1) * n];
                for (o, &a) in out.iter_mut().zip(col) {
                    *o += a * xj;
                }
            }
        }
    }
}

impl LinearOperator for SparseMatrix {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.mul_vec_into(x, out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CgOptions {
    /// Stop once the mean of the squared residual entries falls to this level.
    pub tol_mse: f64,
    pub max_iters: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self { tol_mse: 1e-3, max_iters: 500 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CgReport {
    pub iterations: usize,
    /// Mean squared entry of `A x − b`, recomputed from the returned iterate.
    pub residual_mse: f64,
    /// Set when `max_iters` was reached before the tolerance.
    pub truncated: bool,
}

#[derive(Clone, Debug)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub report: CgReport,
}

pub fn cg_solve(op: &dyn LinearOperator, rhs: &[f64], opts: CgOptions) -> Result<CgSolution> {
    cg_solve_observed(op, rhs, opts, |_, _| {})
}

/// Conjugate gradient from `x₀ = 0`, calling `observe(k, x_k)` after every iteration.
///
/// On truncation the iterate with the smallest recursive residual is returned.
pub fn cg_solve_observed(
    op: &dyn LinearOperator,
    rhs: &[f64],
    opts: CgOptions,
    mut observe: impl FnMut(usize, &[f64]),
) -> Result<CgSolution> {
    let n = op.dim();
    if rhs.len() != n {
        return input_err(format!("rhs length {} does not match operator dimension {n}", rhs.len()));
    }
    if !(opts.tol_mse >= 0.0) {
        return input_err("tol_mse must be non-negative");
    }
    let nf = n.max(1) as f64;
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    let mut best = (rr, x.clone());
    let mut iterations = 0;

    let breakdown = |iterations: usize, rr: f64| {
        Error::CgBreakdown(CgReport { iterations, residual_mse: rr / nf, truncated: false })
    };

    while rr / nf > opts.tol_mse && iterations < opts.max_iters {
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !pap.is_finite() || !rr.is_finite() {
            return Err(breakdown(iterations, rr));
        }
        if pap <= 0.0 {
            return Err(Error::Numerical(format!(
                "operator is not positive definite (pᵀAp = {pap:e} at iteration {iterations})"
            )));
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        if !rr_new.is_finite() {
            return Err(breakdown(iterations + 1, rr_new));
        }
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
        iterations += 1;
        observe(iterations, &x);
        if rr < best.0 {
            best = (rr, x.clone());
        }
    }

    let truncated = rr / nf > opts.tol_mse;
    let x = if truncated { best.1 } else { x };
    op.apply(&x, &mut ap);
    let residual_mse = ap.iter().zip(rhs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / nf;
    if !residual_mse.is_finite() {
        return Err(breakdown(iterations, residual_mse));
    }
    Ok(CgSolution { x, report: CgReport { iterations, residual_mse, truncated } })
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
