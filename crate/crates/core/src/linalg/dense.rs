use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{input_err, Error, Result};

const JITTER_LADDER: [f64; 3] = [1e-10, 1e-8, 1e-6];

/// Cholesky factorization of a symmetric positive-definite matrix.
///
/// If the plain factorization fails, `δ · trace / n` is added to the diagonal for
/// `δ ∈ {1e-10, 1e-8, 1e-6}` in turn and the level that succeeded is kept in `jitter_used`.
#[derive(Clone, Debug)]
pub struct SymFactor {
    chol: Cholesky<f64, Dyn>,
    pub jitter_used: f64,
}

impl SymFactor {
    pub fn new(mat: &DMatrix<f64>) -> Result<Self> {
        check_symmetric(mat)?;
        if mat.iter().any(|v| !v.is_finite()) {
            return input_err("matrix contains non-finite entries");
        }
        if let Some(chol) = Cholesky::new(mat.clone()) {
            return Ok(Self { chol, jitter_used: 0.0 });
        }
        let n = mat.nrows();
        let scale = (mat.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
        for delta in JITTER_LADDER {
            let jitter = delta * scale;
            let mut m = mat.clone();
            for i in 0..n {
                m[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(m) {
                log::debug!("Cholesky succeeded with jitter {jitter:e}");
                return Ok(Self { chol, jitter_used: jitter });
            }
        }
        Err(Error::Singular(format!(
            "{n}x{n} matrix is not positive definite even with jitter {:e}",
            JITTER_LADDER[2] * scale
        )))
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }

    pub fn solve_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    /// Lower-triangular factor `L` with `A + jitter·I = L Lᵀ`.
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Solve `Lᵀ x = b`. Maps standard-normal draws to draws with covariance `A⁻¹`.
    pub fn solve_lower_transpose(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .tr_solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal")
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    /// Reconstruct `L Lᵀ` (includes the jitter).
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let l = self.chol.l();
        &l * l.transpose()
    }
}

fn check_symmetric(mat: &DMatrix<f64>) -> Result<()> {
    let (r, c) = mat.shape();
    if r != c {
        return input_err(format!("expected a square matrix, got {r}x{c}"));
    }
    if r == 0 {
        return input_err("empty matrix");
    }
    let scale = mat.amax().max(1.0);
    for i in 0..r {
        for j in (i + 1)..r {
            if (mat[(i, j)] - mat[(j, i)]).abs() > 1e-10 * scale {
                return input_err(format!("matrix is not symmetric at ({i}, {j})"));
            }
        }
    }
    Ok(())
}

/// Solve `mat · X = rhs` for symmetric positive-definite `mat`.
pub fn sym_solve(mat: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if rhs.nrows() != mat.nrows() {
        return input_err(format!(
            "right-hand side has {} rows, matrix dimension is {}",
            rhs.nrows(),
            mat.nrows()
        ));
    }
    Ok(SymFactor::new(mat)?.solve(rhs))
}

/// Eigendecomposition of a symmetric matrix, eigenvalues ascending.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: DVector<f64>,
    /// Orthonormal eigenvectors, one per column, in the order of `values`.
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.vectors.nrows(), self.vectors.ncols(), |i, j| {
            self.vectors[(i, j)] * self.values[j]
        });
        scaled * self.vectors.transpose()
    }
}

pub fn eig_sym(mat: &DMatrix<f64>) -> Result<SymEigen> {
    check_symmetric(mat)?;
    let n = mat.nrows();
    let eig = SymmetricEigen::try_new(mat.clone(), f64::EPSILON, 1000 * n.max(10))
        .ok_or_else(|| Error::Numerical("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let vectors = DMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    Ok(SymEigen { values, vectors })
}

/// `(A ⊗ B) v` without forming the Kronecker product.
///
/// `v` is read as an `A.ncols() × B.ncols()` matrix `V` in row-major order and the result is
/// `A V Bᵀ`, again row-major.
pub fn kron_apply(a: &DMatrix<f64>, b: &DMatrix<f64>, v: &[f64]) -> Result<Vec<f64>> {
    let (n_out, n_in) = a.shape();
    let (l_out, l_in) = b.shape();
    if v.len() != n_in * l_in {
        return input_err(format!(
            "vector length {} does not match Kronecker input size {}x{}",
            v.len(),
            n_in,
            l_in
        ));
    }
    let vm = DMatrix::from_row_slice(n_in, l_in, v);
    let out = a * vm * b.transpose();
    debug_assert_eq!(out.shape(), (n_out, l_out));
    Ok(row_major(&out))
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        out.extend(m.row(i).iter());
    }
    out
}
