//! Comparison models: a functional linear model (FLM) with kernel-expanded coefficient
//! functions, and a bank of independent kernel ridge regressors, one per grid point.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{DenseFunctionalDataset, FunctionalDataset, SparseFunctionalDataset};
use crate::error::{input_err, Error, Result};
use crate::kernel::{gram, gram_square, KernelConfig, KernelKind};
use crate::linalg::{sym_solve, SymFactor};

/// Largest `(p+1)·L` accepted by [`flm_fit`].
pub const DEFAULT_FLM_CAPACITY: usize = 20_000;

/// `Y(X, t) = Σ_j x'_j Σ_l θ^j_l k_T(t, c_l)` with `x' = (1, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlmModel {
    /// Length `(p+1)·L`, coefficient `j` of center `l` at `j·L + l`.
    pub theta: Vec<f64>,
    pub kernel_t: KernelConfig,
    pub centers: DMatrix<f64>,
    pub lambda: f64,
    pub input_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlmOptions {
    pub lambda: f64,
    pub kernel_t: KernelConfig,
    /// Defaults to the measurement grid for dense data; required for sparse data.
    pub centers: Option<DMatrix<f64>>,
    pub capacity: usize,
}

impl FlmOptions {
    pub fn new(lambda: f64, kernel_t: KernelConfig) -> Self {
        Self { lambda, kernel_t, centers: None, capacity: DEFAULT_FLM_CAPACITY }
    }

    pub fn with_centers(mut self, centers: DMatrix<f64>) -> Self {
        self.centers = Some(centers);
        self
    }
}

fn augmented(x: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] })
}

fn check_flm(opts: &FlmOptions, p: usize, l: usize) -> Result<()> {
    if !(opts.lambda > 0.0 && opts.lambda.is_finite()) {
        return input_err(format!("lambda must be positive and finite, got {}", opts.lambda));
    }
    opts.kernel_t.validate()?;
    let dim = (p + 1) * l;
    if dim > opts.capacity {
        return Err(Error::Capacity(format!(
            "FLM system has (p+1)·L = {dim} unknowns, above the cap of {}; reduce the covariate \
             dimension (e.g. by PCA) or the number of centers",
            opts.capacity
        )));
    }
    Ok(())
}

/// Ridge fit of the FLM coefficients.
pub fn flm_fit(data: &FunctionalDataset, opts: &FlmOptions) -> Result<FlmModel> {
    match data {
        FunctionalDataset::Dense(d) => flm_fit_dense(d, opts),
        FunctionalDataset::Sparse(s) => {
            let centers = opts
                .centers
                .clone()
                .ok_or_else(|| Error::Input("sparse FLM fits need an explicit center grid".into()))?;
            flm_fit_ragged(s, opts, centers)
        }
    }
}

/// Dense-grid shortcut: `WᵀW = (X'ᵀX') ⊗ (TᵀT)` and `Wᵀy = vec(X'ᵀ Y T)`.
pub fn flm_fit_dense(data: &DenseFunctionalDataset, opts: &FlmOptions) -> Result<FlmModel> {
    let centers = opts.centers.clone().unwrap_or_else(|| data.t.clone());
    if centers.ncols() != data.grid_dim() {
        return input_err("centers and grid differ in dimension");
    }
    let p = data.input_dim();
    let l = centers.nrows();
    check_flm(opts, p, l)?;
    let xa = augmented(&data.x);
    let t = gram(&opts.kernel_t, &data.t, &centers)?.values;
    let xtx = xa.tr_mul(&xa);
    let ttt = t.tr_mul(&t);
    let dim = (p + 1) * l;
    let mut a = DMatrix::from_fn(dim, dim, |r, c| xtx[(r / l, c / l)] * ttt[(r % l, c % l)]);
    for i in 0..dim {
        a[(i, i)] += opts.lambda;
    }
    let b = xa.tr_mul(&data.y) * &t;
    let rhs = DMatrix::from_fn(dim, 1, |r, _| b[(r / l, r % l)]);
    let theta = sym_solve(&a, &rhs)?;
    Ok(FlmModel {
        theta: theta.as_slice().to_vec(),
        kernel_t: opts.kernel_t,
        centers,
        lambda: opts.lambda,
        input_dim: p,
    })
}

/// General path with one `T_i` block per input.
pub fn flm_fit_ragged(
    data: &SparseFunctionalDataset,
    opts: &FlmOptions,
    centers: DMatrix<f64>,
) -> Result<FlmModel> {
    if centers.ncols() != data.grid_dim() || centers.nrows() == 0 {
        return input_err("center grid is empty or differs in dimension from the records");
    }
    let p = data.input_dim();
    let l = centers.nrows();
    check_flm(opts, p, l)?;
    let dim = (p + 1) * l;
    let pa = p + 1;
    let xa = augmented(&data.x);
    let t = gram(&opts.kernel_t, &data.t, &centers)?.values;
    let mut a = DMatrix::zeros(dim, dim);
    let mut rhs = DMatrix::zeros(dim, 1);
    for i in 0..data.n_inputs() {
        let rows = data.records_of(i);
        let ti = t.rows(rows.start, rows.len());
        let qi = ti.tr_mul(&ti);
        let yi = data.y.rows(rows.start, rows.len());
        let vi = ti.tr_mul(&yi);
        for ja in 0..pa {
            let xa_j = xa[(i, ja)];
            for l1 in 0..l {
                rhs[(ja * l + l1, 0)] += xa_j * vi[l1];
            }
            for jb in 0..pa {
                let w = xa_j * xa[(i, jb)];
                if w == 0.0 {
                    continue;
                }
                for l2 in 0..l {
                    for l1 in 0..l {
                        a[(ja * l + l1, jb * l + l2)] += w * qi[(l1, l2)];
                    }
                }
            }
        }
    }
    for i in 0..dim {
        a[(i, i)] += opts.lambda;
    }
    let theta = sym_solve(&a, &rhs)?;
    Ok(FlmModel {
        theta: theta.as_slice().to_vec(),
        kernel_t: opts.kernel_t,
        centers,
        lambda: opts.lambda,
        input_dim: p,
    })
}

impl FlmModel {
    pub fn n_centers(&self) -> usize {
        self.centers.nrows()
    }

    fn check(&self, x_new: &[f64], q: usize) -> Result<()> {
        if x_new.len() != self.input_dim {
            return input_err(format!(
                "query input has dimension {}, model expects {}",
                x_new.len(),
                self.input_dim
            ));
        }
        if q != self.centers.ncols() {
            return input_err(format!("query t has dimension {q}, model expects {}", self.centers.ncols()));
        }
        Ok(())
    }

    /// Coefficient-function values `β_l = Σ_j x'_j θ^j_l` for one input.
    fn beta(&self, x_new: &[f64]) -> Vec<f64> {
        let l = self.n_centers();
        let mut b = self.theta[..l].to_vec();
        for (j, &xj) in x_new.iter().enumerate() {
            for (bl, th) in b.iter_mut().zip(&self.theta[(j + 1) * l..(j + 2) * l]) {
                *bl += xj * th;
            }
        }
        b
    }

    pub fn predict(&self, x_new: &[f64], t_new: &[f64]) -> Result<f64> {
        self.check(x_new, t_new.len())?;
        let kt = self.kernel_t.vector(t_new, &self.centers)?;
        Ok(self.beta(x_new).iter().zip(&kt).map(|(a, b)| a * b).sum())
    }

    pub fn predict_curve(&self, x_new: &[f64], t_grid: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.check(x_new, t_grid.ncols())?;
        let beta = DVector::from_vec(self.beta(x_new));
        let kt = gram(&self.kernel_t, t_grid, &self.centers)?.values;
        Ok((kt * beta).as_slice().to_vec())
    }
}

/// Hyperparameters of one per-point regressor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KrrParams {
    pub kernel: KernelConfig,
    pub alpha: f64,
}

impl KrrParams {
    /// Translate an inverse-scale `γ` to a kernel scale: `1/√(2γ)` (Gaussian), `1/γ` (Laplacian).
    pub fn from_gamma(kind: KernelKind, gamma: f64, alpha: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return input_err(format!("gamma must be positive and finite, got {gamma}"));
        }
        let scale = match kind {
            KernelKind::Gaussian => 1.0 / (2.0 * gamma).sqrt(),
            KernelKind::Laplacian => 1.0 / gamma,
        };
        Ok(Self { kernel: KernelConfig::new(kind, scale)?, alpha })
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return input_err(format!("alpha must be positive and finite, got {}", self.alpha));
        }
        self.kernel.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KrrColumn {
    pub params: KrrParams,
    /// Dual coefficients over the training inputs.
    pub coef: Vec<f64>,
}

/// Independent kernel ridge regressors, one per grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct KrrBankModel {
    pub x_train: DMatrix<f64>,
    pub columns: Vec<KrrColumn>,
}

/// Fit one regressor per grid column: `coef_j = (G_j + α_j I)⁻¹ y_j`.
///
/// `params` holds either one entry per column or a single entry shared by all columns.
pub fn krr_bank_fit(data: &FunctionalDataset, params: &[KrrParams]) -> Result<KrrBankModel> {
    match data {
        FunctionalDataset::Dense(d) => krr_bank_fit_dense(d, params),
        FunctionalDataset::Sparse(_) => Err(Error::Unsupported(
            "per-point KRR needs every input measured at the same grid points; sparse records \
             have no shared grid, use krsfd or flm instead"
                .into(),
        )),
    }
}

pub fn krr_bank_fit_dense(data: &DenseFunctionalDataset, params: &[KrrParams]) -> Result<KrrBankModel> {
    let l = data.n_points();
    if params.len() != l && params.len() != 1 {
        return input_err(format!("expected 1 or {l} KRR parameter sets, got {}", params.len()));
    }
    let per_col = |j: usize| if params.len() == 1 { params[0] } else { params[j] };
    let mut columns: Vec<Option<KrrColumn>> = vec![None; l];
    // Columns sharing a configuration share one factorization.
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (per_col(a), per_col(b));
        (pa.kernel.kind as u8, pa.kernel.scale.to_bits(), pa.alpha.to_bits())
            .cmp(&(pb.kernel.kind as u8, pb.kernel.scale.to_bits(), pb.alpha.to_bits()))
            .then(a.cmp(&b))
    });
    let mut start = 0;
    while start < l {
        let p = per_col(order[start]);
        p.validate()?;
        let mut end = start + 1;
        while end < l && per_col(order[end]) == p {
            end += 1;
        }
        let cols = &order[start..end];
        let mut g = gram_square(&p.kernel, &data.x)?.values;
        for i in 0..g.nrows() {
            g[(i, i)] += p.alpha;
        }
        let f = SymFactor::new(&g)?;
        let rhs = DMatrix::from_fn(data.n_inputs(), cols.len(), |i, k| data.y[(i, cols[k])]);
        let coef = f.solve(&rhs);
        for (k, &j) in cols.iter().enumerate() {
            columns[j] = Some(KrrColumn { params: p, coef: coef.column(k).iter().copied().collect() });
        }
        start = end;
    }
    Ok(KrrBankModel {
        x_train: data.x.clone(),
        columns: columns.into_iter().map(|c| c.expect("every column fitted")).collect(),
    })
}

impl KrrBankModel {
    pub fn n_points(&self) -> usize {
        self.columns.len()
    }

    /// One prediction per grid point.
    pub fn predict(&self, x_new: &[f64]) -> Result<Vec<f64>> {
        if x_new.len() != self.x_train.ncols() {
            return input_err(format!(
                "query input has dimension {}, model expects {}",
                x_new.len(),
                self.x_train.ncols()
            ));
        }
        let mut cache: Vec<(KernelConfig, Vec<f64>)> = Vec::new();
        self.columns
            .iter()
            .map(|c| {
                let k = match cache.iter().find(|(cfg, _)| *cfg == c.params.kernel) {
                    Some((_, k)) => k.clone(),
                    None => {
                        let k = c.params.kernel.vector(x_new, &self.x_train)?;
                        cache.push((c.params.kernel, k.clone()));
                        k
                    }
                };
                Ok(k.iter().zip(&c.coef).map(|(a, b)| a * b).sum())
            })
            .collect()
    }
}
