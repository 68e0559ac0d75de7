//! Positive-definite kernels, Gram matrices and kernel truncation.
//!
//! Point sets are stored one point per row of a `DMatrix<f64>`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::linalg::SparseMatrix;

/// Target fraction of zeros in the joint design matrix `G ⊗ T` used by the sparse model.
pub const JOINT_ZERO_FRACTION: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    /// `exp(-‖a-b‖₂² / 2σ²)`
    Gaussian,
    /// `exp(-‖a-b‖₁ / σ)`
    Laplacian,
}

impl std::str::FromStr for KernelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "rbf" => Ok(KernelKind::Gaussian),
            "laplacian" => Ok(KernelKind::Laplacian),
            other => Err(format!("unknown kernel kind '{other}'")),
        }
    }
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelKind::Gaussian => f.write_str("gaussian"),
            KernelKind::Laplacian => f.write_str("laplacian"),
        }
    }
}

/// Kernel family plus its length scale (same units as the input coordinates).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub scale: f64,
}

impl KernelConfig {
    pub fn new(kind: KernelKind, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return input_err(format!("kernel scale must be positive and finite, got {scale}"));
        }
        Ok(Self { kind, scale })
    }

    pub fn gaussian(scale: f64) -> Result<Self> {
        Self::new(KernelKind::Gaussian, scale)
    }

    pub fn laplacian(scale: f64) -> Result<Self> {
        Self::new(KernelKind::Laplacian, scale)
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.kind, self.scale).map(|_| ())
    }

    /// Evaluate on two points of equal dimension.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != b.len() {
            return input_err(format!(
                "kernel arguments differ in dimension ({} vs {})",
                a.len(),
                b.len()
            ));
        }
        Ok(self.eval_iter(a.iter().copied().zip(b.iter().copied())))
    }

    #[inline]
    pub(crate) fn eval_iter(&self, pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
        match self.kind {
            KernelKind::Gaussian => {
                let d2: f64 = pairs.map(|(x, y)| (x - y) * (x - y)).sum();
                (-d2 / (2.0 * self.scale * self.scale)).exp()
            }
            KernelKind::Laplacian => {
                let d1: f64 = pairs.map(|(x, y)| (x - y).abs()).sum();
                (-d1 / self.scale).exp()
            }
        }
    }

    /// Kernel between row `i` of `a` and row `j` of `b`.
    #[inline]
    pub(crate) fn eval_rows(&self, a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
        let p = a.ncols();
        self.eval_iter((0..p).map(|k| (a[(i, k)], b[(j, k)])))
    }

    /// Kernel vector `(k(q, p_1), …, k(q, p_n))` of a query against every row of `points`.
    pub fn vector(&self, query: &[f64], points: &DMatrix<f64>) -> Result<Vec<f64>> {
        if query.len() != points.ncols() {
            return input_err(format!(
                "query has dimension {} but points have dimension {}",
                query.len(),
                points.ncols()
            ));
        }
        Ok((0..points.nrows())
            .map(|j| {
                self.eval_iter(query.iter().enumerate().map(|(k, &q)| (q, points[(j, k)])))
            })
            .collect())
    }
}

/// Evaluate `cfg` on two points.
pub fn eval_kernel(cfg: &KernelConfig, a: &[f64], b: &[f64]) -> Result<f64> {
    cfg.eval(a, b)
}

/// Dense Gram matrix. Square Grams built from a single point set are exactly symmetric.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    pub values: DMatrix<f64>,
    pub symmetric: bool,
}

impl GramMatrix {
    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.values
    }
}

/// Gram matrix of a point set against itself. Computes the upper triangle and mirrors it.
pub fn gram_square(cfg: &KernelConfig, points: &DMatrix<f64>) -> Result<GramMatrix> {
    let n = points.nrows();
    if n == 0 {
        return input_err("cannot build a Gram matrix from an empty point set");
    }
    let mut values = DMatrix::zeros(n, n);
    for i in 0..n {
        values[(i, i)] = cfg.eval_rows(points, i, points, i);
        for j in (i + 1)..n {
            let v = cfg.eval_rows(points, i, points, j);
            values[(i, j)] = v;
            values[(j, i)] = v;
        }
    }
    Ok(GramMatrix { values, symmetric: true })
}

/// Cross Gram matrix, entry `(i, j) = k(rows_i, cols_j)`.
///
/// When both point sets are identical the symmetric construction is used.
pub fn gram(cfg: &KernelConfig, rows: &DMatrix<f64>, cols: &DMatrix<f64>) -> Result<GramMatrix> {
    if rows.nrows() == 0 || cols.nrows() == 0 {
        return input_err("cannot build a Gram matrix from an empty point set");
    }
    if rows.ncols() != cols.ncols() {
        return input_err(format!(
            "point sets differ in dimension ({} vs {})",
            rows.ncols(),
            cols.ncols()
        ));
    }
    if std::ptr::eq(rows, cols) || rows == cols {
        return gram_square(cfg, rows);
    }
    let values =
        DMatrix::from_fn(rows.nrows(), cols.nrows(), |i, j| cfg.eval_rows(rows, i, cols, j));
    Ok(GramMatrix { values, symmetric: false })
}

/// Gram matrix with its smallest entries removed.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGram {
    pub matrix: SparseMatrix,
    /// Fraction of structural zeros over all `rows × cols` entries.
    pub zero_fraction: f64,
    /// Largest dropped value; every stored off-diagonal value is strictly above it.
    /// `None` when nothing was dropped.
    pub threshold: Option<f64>,
}

impl SparseGram {
    /// Zero the entries of a query kernel vector that this truncation would have dropped.
    pub fn mask_query(&self, v: &mut [f64]) {
        if let Some(tau) = self.threshold {
            for x in v.iter_mut() {
                if *x <= tau {
                    *x = 0.0;
                }
            }
        }
    }
}

/// Drop the `⌈z · entries⌉` smallest entries of a Gram matrix.
///
/// Diagonal entries of symmetric Grams are never dropped. When the cut falls inside a run
/// of equal values the whole run is kept, so the achieved zero fraction may undershoot.
pub fn truncate(gm: &GramMatrix, target_zero_fraction: f64) -> Result<SparseGram> {
    let z = target_zero_fraction;
    if !(0.0..1.0).contains(&z) {
        return input_err(format!("target zero fraction must lie in [0, 1), got {z}"));
    }
    let (nr, nc) = gm.values.shape();
    let square = gm.symmetric && nr == nc;
    let total = nr * nc;

    let mut candidates: Vec<f64> = Vec::with_capacity(total);
    for j in 0..nc {
        for i in 0..nr {
            if !(square && i == j) {
                candidates.push(gm.values[(i, j)]);
            }
        }
    }
    let k = (((z * total as f64) - 1e-9).ceil().max(0.0) as usize).min(candidates.len());

    // Entries strictly below `cut` are dropped, plus entries equal to it when `inclusive`.
    let rule = if k == 0 {
        None
    } else {
        candidates.sort_unstable_by(f64::total_cmp);
        let kth = candidates[k - 1];
        let tie = k < candidates.len() && candidates[k] == kth;
        Some((kth, !tie))
    };
    let dropped = |v: f64| match rule {
        None => false,
        Some((cut, inclusive)) => v < cut || (inclusive && v == cut),
    };

    let mut row_ptr = Vec::with_capacity(nr + 1);
    let mut col_idx = Vec::new();
    let mut vals = Vec::new();
    let mut threshold: Option<f64> = None;
    row_ptr.push(0);
    for i in 0..nr {
        for j in 0..nc {
            let v = gm.values[(i, j)];
            let keep = (square && i == j) || !dropped(v);
            if keep {
                if v != 0.0 {
                    col_idx.push(j as u32);
                    vals.push(v);
                }
            } else {
                threshold = Some(threshold.map_or(v, |t: f64| t.max(v)));
            }
        }
        row_ptr.push(col_idx.len());
    }
    let nnz = vals.len();
    let matrix = SparseMatrix::from_csr(nr, nc, row_ptr, col_idx, vals)?;
    Ok(SparseGram {
        matrix,
        zero_fraction: (total - nnz) as f64 / total as f64,
        threshold,
    })
}

/// Zero fraction for the t-space Gram so that `z_G + z_T − z_G·z_T = 0.9`.
pub fn z_t_from_z_g(z_g: f64) -> Result<f64> {
    if !(0.0..=JOINT_ZERO_FRACTION).contains(&z_g) {
        return input_err(format!("z_G must lie in [0, 0.9], got {z_g}"));
    }
    Ok(((JOINT_ZERO_FRACTION - z_g) / (1.0 - z_g)).max(0.0))
}
