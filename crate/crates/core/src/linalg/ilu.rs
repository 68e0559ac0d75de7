//! Threshold incomplete LU (ILUT) used as an approximate inverse of sparse SPD matrices.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{input_err, Error, Result};
use crate::linalg::sparse::SparseBuilder;
use crate::linalg::SparseMatrix;

pub const DEFAULT_DROP_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_FILL_FACTOR: f64 = 10.0;

/// `A ≈ L U` with `L` unit lower triangular (diagonal not stored) and `U` upper triangular.
#[derive(Clone, Debug)]
pub struct IluFactor {
    l: SparseMatrix,
    u: SparseMatrix,
    u_diag: Vec<f64>,
    pub drop_tolerance: f64,
    pub fill_factor: f64,
}

impl IluFactor {
    /// ILUT factorization.
    ///
    /// Within row `i`, an entry is dropped when its magnitude falls below
    /// `drop_tolerance · ‖a_i‖₂`, and at most `⌈fill_factor · nnz(a_i)⌉` entries are kept in each
    /// of the `L` and `U` parts (largest magnitudes win). The diagonal is always kept.
    pub fn new(a: &SparseMatrix, drop_tolerance: f64, fill_factor: f64) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return input_err("ILU needs a square matrix");
        }
        if !(drop_tolerance >= 0.0) || !(fill_factor > 0.0) {
            return input_err("drop tolerance must be >= 0 and fill factor > 0");
        }
        let mut w = vec![0.0; n];
        let mut in_row = vec![false; n];
        let mut pattern: Vec<usize> = Vec::new();
        let mut heap: BinaryHeap<Reverse<usize>> = BinaryHeap::new();

        let mut u_rows: Vec<Vec<(u32, f64)>> = Vec::with_capacity(n);
        let mut u_diag: Vec<f64> = Vec::with_capacity(n);
        let mut lb = SparseBuilder::new(n);

        for i in 0..n {
            let (cols, vals) = a.row(i);
            let row_norm = vals.iter().map(|v| v * v).sum::<f64>().sqrt();
            let tau = drop_tolerance * row_norm;
            let lfil = (fill_factor * cols.len() as f64).ceil() as usize;

            for (&c, &v) in cols.iter().zip(vals) {
                let c = c as usize;
                w[c] = v;
                in_row[c] = true;
                pattern.push(c);
                if c < i {
                    heap.push(Reverse(c));
                }
            }
            let mut l_part: Vec<(usize, f64)> = Vec::new();
            while let Some(Reverse(k)) = heap.pop() {
                let factor = w[k] / u_diag[k];
                if factor.abs() < tau || factor == 0.0 {
                    w[k] = 0.0;
                    continue;
                }
                w[k] = factor;
                l_part.push((k, factor));
                for &(j, ukj) in &u_rows[k] {
                    let j = j as usize;
                    if !in_row[j] {
                        in_row[j] = true;
                        pattern.push(j);
                        if j < i {
                            heap.push(Reverse(j));
                        }
                    }
                    w[j] -= factor * ukj;
                }
            }

            let diag = w[i];
            let mut u_part: Vec<(usize, f64)> = pattern
                .iter()
                .copied()
                .filter(|&j| j > i && w[j] != 0.0 && w[j].abs() >= tau)
                .map(|j| (j, w[j]))
                .collect();
            for &j in &pattern {
                w[j] = 0.0;
                in_row[j] = false;
            }
            pattern.clear();

            if diag == 0.0 || !diag.is_finite() {
                return Err(Error::ZeroPivot { row: i });
            }
            keep_largest(&mut l_part, lfil);
            keep_largest(&mut u_part, lfil);
            for (k, v) in l_part {
                lb.push(k, v);
            }
            lb.finish_row();
            u_diag.push(diag);
            u_rows.push(u_part.into_iter().map(|(j, v)| (j as u32, v)).collect());
        }

        let mut ub = SparseBuilder::new(n);
        for (i, row) in u_rows.iter().enumerate() {
            ub.push(i, u_diag[i]);
            for &(j, v) in row {
                ub.push(j as usize, v);
            }
            ub.finish_row();
        }
        Ok(Self {
            l: lb.build(),
            u: ub.build(),
            u_diag,
            drop_tolerance,
            fill_factor,
        })
    }

    pub fn dim(&self) -> usize {
        self.u_diag.len()
    }

    pub fn nnz(&self) -> usize {
        self.l.nnz() + self.u.nnz()
    }

    /// `x = U⁻¹ L⁻¹ b`
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut y = self.forward(b);
        self.backward_in_place(&mut y);
        y
    }

    fn forward(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut y = b.to_vec();
        for i in 0..n {
            let (cols, vals) = self.l.row(i);
            let s: f64 = cols.iter().zip(vals).map(|(&c, &v)| v * y[c as usize]).sum();
            y[i] -= s;
        }
        y
    }

    fn backward_in_place(&self, y: &mut [f64]) {
        for i in (0..self.dim()).rev() {
            let (cols, vals) = self.u.row(i);
            // First stored entry of each U row is the diagonal.
            let s: f64 = cols[1..].iter().zip(&vals[1..]).map(|(&c, &v)| v * y[c as usize]).sum();
            y[i] = (y[i] - s) / self.u_diag[i];
        }
    }

    /// Map standard-normal `z` to an approximate draw with covariance `A⁻¹`.
    ///
    /// For symmetric `A`, `U ≈ D Lᵀ` with `D = diag(U)`, so `U⁻¹ D^{1/2} z` has covariance
    /// `L⁻ᵀ D⁻¹ L⁻¹ ≈ A⁻¹`. Fails when a pivot is not positive.
    pub fn sample_transform(&self, z: &[f64]) -> Result<Vec<f64>> {
        if let Some(i) = self.u_diag.iter().position(|d| *d <= 0.0) {
            return Err(Error::Numerical(format!(
                "ILU pivot {i} is not positive; cannot sample from the approximate covariance"
            )));
        }
        let mut y: Vec<f64> = z.iter().zip(&self.u_diag).map(|(zi, d)| zi * d.sqrt()).collect();
        self.backward_in_place(&mut y);
        Ok(y)
    }

    /// `‖A x − b‖ / ‖b‖` for `x` from [`IluFactor::solve`].
    pub fn relative_residual(&self, a: &SparseMatrix, b: &[f64]) -> f64 {
        let x = self.solve(b);
        let ax = a.mul_vec(&x);
        let num: f64 = ax.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
        let den: f64 = b.iter().map(|q| q * q).sum();
        (num / den.max(f64::MIN_POSITIVE)).sqrt()
    }
}

fn keep_largest(part: &mut Vec<(usize, f64)>, limit: usize) {
    if part.len() > limit {
        part.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
        part.truncate(limit);
    }
    part.sort_by_key(|e| e.0);
}

/// Apply the approximate inverse held by `fac` to `rhs`.
pub fn ilu_inverse_apply(fac: &IluFactor, rhs: &[f64]) -> Result<Vec<f64>> {
    if rhs.len() != fac.dim() {
        return input_err(format!("rhs length {} does not match factor dimension {}", rhs.len(), fac.dim()));
    }
    Ok(fac.solve(rhs))
}
