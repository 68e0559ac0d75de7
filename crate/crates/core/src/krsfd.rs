//! Sparse-data variant: every input carries its own ragged set of measurement locations.
//!
//! The surface is `f(X, t) = Σ_n Σ_l k_G(X, X_n) θ_nl k_T(t, c_l)` over a fixed center grid
//! `c_1..c_L`, with an isotropic Gaussian prior on `θ`. The design row of a record `(X_i, t)`
//! is `g_iᵀ ⊗ k_T(t, c)ᵀ`, so `H` factors through the truncated `G` and the stacked
//! record-by-center matrix `T`. Large designs are never materialized: `H v` and `Hᵀ r` are
//! applied as `G`-row contractions.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::SparseFunctionalDataset;
use crate::error::{input_err, Error, Result};
use crate::kernel::{gram, gram_square, truncate, z_t_from_z_g, KernelConfig, KernelKind, SparseGram};
use crate::krfd::{sigma2_map, PredictiveDistribution, VarianceMode};
use crate::linalg::{
    cg_solve, CgOptions, CgReport, IluFactor, LinearOperator, SparseBuilder, SparseMatrix, SymFactor,
    DEFAULT_DROP_TOLERANCE, DEFAULT_FILL_FACTOR,
};

/// Largest `N·L` for which `HᵀH + λI` is formed densely and factored exactly.
pub const DEFAULT_DENSE_THRESHOLD: usize = 4000;

/// Refuse to assemble a sparse `HᵀH` with more stored entries than this.
pub const MAX_NORMAL_NNZ: usize = 60_000_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    /// Exact below the dense threshold, ILU above it.
    #[default]
    Auto,
    Exact,
    Ilu,
    /// Means only; `predict` and `sample_functions` fail.
    Skip,
}

impl std::str::FromStr for CovarianceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(Self::Auto),
            "exact" => Ok(Self::Exact),
            "ilu" => Ok(Self::Ilu),
            "skip" | "none" => Ok(Self::Skip),
            other => input_err(format!("unknown covariance mode '{other}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KrsfdHyperparams {
    pub lambda: f64,
    pub kernel_g: KernelConfig,
    pub kernel_t: KernelConfig,
    /// Target zero fraction of `G`; the `T` rate follows from the 0.9 joint target.
    pub z_g: f64,
    /// When false neither Gram is truncated.
    pub truncation: bool,
    /// Kernel centers, L × q.
    pub centers: DMatrix<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub cg: CgOptions,
    pub dense_threshold: usize,
    pub covariance: CovarianceMode,
    pub ilu_drop_tolerance: f64,
    pub ilu_fill_factor: f64,
}

impl KrsfdHyperparams {
    /// Benchmark configuration with `l` evenly spaced centers on `[lo, hi]`.
    pub fn benchmark(l: usize, lo: f64, hi: f64) -> Self {
        Self {
            lambda: 0.024,
            kernel_g: KernelConfig { kind: KernelKind::Gaussian, scale: 1.249 },
            kernel_t: KernelConfig { kind: KernelKind::Laplacian, scale: 0.173 },
            z_g: 0.434,
            truncation: true,
            centers: even_grid(l, lo, hi),
            alpha: 1e-3,
            beta: 1e-3,
            cg: CgOptions::default(),
            dense_threshold: DEFAULT_DENSE_THRESHOLD,
            covariance: CovarianceMode::Auto,
            ilu_drop_tolerance: DEFAULT_DROP_TOLERANCE,
            ilu_fill_factor: DEFAULT_FILL_FACTOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(v > 0.0 && v.is_finite()) {
                return input_err(format!("{name} must be positive and finite, got {v}"));
            }
        }
        self.kernel_g.validate()?;
        self.kernel_t.validate()?;
        z_t_from_z_g(self.z_g)?;
        if self.centers.nrows() == 0 || self.centers.ncols() == 0 {
            return input_err("center grid is empty");
        }
        if self.centers.iter().any(|v| !v.is_finite()) {
            return input_err("center grid contains non-finite values");
        }
        let l = self.centers.nrows();
        for a in 0..l {
            for b in a + 1..l {
                if self.centers.row(a) == self.centers.row(b) {
                    return input_err(format!("centers {a} and {b} coincide"));
                }
            }
        }
        Ok(())
    }

    /// Zero fractions actually applied to `(G, T)`.
    pub fn zero_fractions(&self) -> Result<(f64, f64)> {
        if self.truncation {
            Ok((self.z_g, z_t_from_z_g(self.z_g)?))
        } else {
            Ok((0.0, 0.0))
        }
    }
}

/// `l` evenly spaced points on `[lo, hi]` as an `l × 1` matrix.
pub fn even_grid(l: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    if l == 1 {
        return DMatrix::from_element(1, 1, 0.5 * (lo + hi));
    }
    DMatrix::from_fn(l, 1, |i, _| lo + (hi - lo) * i as f64 / (l - 1) as f64)
}

/// Factored design `H`: row `r` of input `i` is `G_i· ⊗ T_r·`.
#[derive(Clone, Debug)]
pub struct SparseDesign {
    /// Truncated `G`, N × N.
    pub g: SparseGram,
    /// Truncated record-by-center kernel matrix, S × L.
    pub t: SparseGram,
    offsets: Vec<usize>,
}

impl SparseDesign {
    pub fn build(data: &SparseFunctionalDataset, hp: &KrsfdHyperparams) -> Result<Self> {
        hp.validate()?;
        if data.grid_dim() != hp.centers.ncols() {
            return input_err(format!(
                "records have t dimension {}, centers have {}",
                data.grid_dim(),
                hp.centers.ncols()
            ));
        }
        if let Some(i) = data.record_counts().iter().position(|&c| c == 0) {
            return input_err(format!("input {i} has no records"));
        }
        let (z_g, z_t) = hp.zero_fractions()?;
        let g = truncate(&gram_square(&hp.kernel_g, &data.x)?, z_g)?;
        let t = truncate(&gram(&hp.kernel_t, &data.t, &hp.centers)?, z_t)?;
        Ok(Self { g, t, offsets: data.offsets().to_vec() })
    }

    pub fn n_inputs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_centers(&self) -> usize {
        self.t.matrix.ncols()
    }

    pub fn n_records(&self) -> usize {
        self.t.matrix.nrows()
    }

    /// `N·L`
    pub fn n_params(&self) -> usize {
        self.n_inputs() * self.n_centers()
    }

    pub fn block_rows(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// Stored entries of `H`, counted without forming it.
    pub fn nnz(&self) -> usize {
        (0..self.n_inputs())
            .map(|i| {
                let gi = self.g.matrix.row(i).0.len();
                self.block_rows(i).map(|r| gi * self.t.matrix.row(r).0.len()).sum::<usize>()
            })
            .sum()
    }

    pub fn zero_fraction(&self) -> f64 {
        let total = self.n_records() as f64 * self.n_params() as f64;
        1.0 - self.nnz() as f64 / total
    }

    /// Materialize `H` in CSR form (columns ordered `n·L + l`).
    pub fn to_csr(&self) -> SparseMatrix {
        let l = self.n_centers();
        let mut b = SparseBuilder::with_capacity(self.n_params(), self.n_records(), self.nnz());
        for i in 0..self.n_inputs() {
            let (gc, gv) = self.g.matrix.row(i);
            for r in self.block_rows(i) {
                let (tc, tv) = self.t.matrix.row(r);
                for (&n, &gval) in gc.iter().zip(gv) {
                    for (&c, &tval) in tc.iter().zip(tv) {
                        b.push(n as usize * l + c as usize, gval * tval);
                    }
                }
                b.finish_row();
            }
        }
        b.build()
    }

    /// `out = H θ`, with `θ` laid out `n·L + l`.
    pub fn apply(&self, theta: &[f64], out: &mut [f64]) {
        let l = self.n_centers();
        let mut row = vec![0.0; l];
        for i in 0..self.n_inputs() {
            // row = G_i· Θ
            row.fill(0.0);
            let (gc, gv) = self.g.matrix.row(i);
            for (&n, &gval) in gc.iter().zip(gv) {
                let th = &theta[n as usize * l..(n as usize + 1) * l];
                for (acc, &x) in row.iter_mut().zip(th) {
                    *acc += gval * x;
                }
            }
            for r in self.block_rows(i) {
                let (tc, tv) = self.t.matrix.row(r);
                out[r] = tc.iter().zip(tv).map(|(&c, &v)| v * row[c as usize]).sum();
            }
        }
    }

    /// `out = Hᵀ y`
    pub fn apply_t(&self, y: &[f64], out: &mut [f64]) {
        let l = self.n_centers();
        out.fill(0.0);
        let mut q = vec![0.0; l];
        for i in 0..self.n_inputs() {
            // q = T_iᵀ y_i
            q.fill(0.0);
            for r in self.block_rows(i) {
                let (tc, tv) = self.t.matrix.row(r);
                for (&c, &v) in tc.iter().zip(tv) {
                    q[c as usize] += v * y[r];
                }
            }
            let (gc, gv) = self.g.matrix.row(i);
            for (&n, &gval) in gc.iter().zip(gv) {
                let o = &mut out[n as usize * l..(n as usize + 1) * l];
                for (acc, &qv) in o.iter_mut().zip(&q) {
                    *acc += gval * qv;
                }
            }
        }
    }
}

/// `x ↦ (HᵀH + λI) x` without forming `HᵀH`.
struct NormalOperator<'a> {
    design: &'a SparseDesign,
    lambda: f64,
    scratch: std::cell::RefCell<Vec<f64>>,
}

impl LinearOperator for NormalOperator<'_> {
    fn dim(&self) -> usize {
        self.design.n_params()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let mut hx = self.scratch.borrow_mut();
        self.design.apply(x, &mut hx);
        self.design.apply_t(&hx, out);
        for (o, &xi) in out.iter_mut().zip(x) {
            *o += self.lambda * xi;
        }
    }
}

#[derive(Clone, Debug)]
enum Covariance {
    Exact(SymFactor),
    Ilu(IluFactor),
    Skipped,
}

/// Fitted sparse model.
#[derive(Clone, Debug)]
pub struct KrsfdModel {
    hp: KrsfdHyperparams,
    train: SparseFunctionalDataset,
    design: SparseDesign,
    theta: Vec<f64>,
    sigma2: f64,
    training_sse: f64,
    cg_report: CgReport,
    covariance: Covariance,
}

impl KrsfdModel {
    pub fn fit(data: &SparseFunctionalDataset, hp: &KrsfdHyperparams) -> Result<Self> {
        let design = SparseDesign::build(data, hp)?;
        let np = design.n_params();
        let mut rhs = vec![0.0; np];
        design.apply_t(data.y.as_slice(), &mut rhs);

        let dense_normal =
            if np <= hp.dense_threshold { Some(normal_dense(&design, hp.lambda)) } else { None };
        let solution = match &dense_normal {
            Some(a) => cg_solve(a, &rhs, hp.cg)?,
            None => {
                let op = NormalOperator {
                    design: &design,
                    lambda: hp.lambda,
                    scratch: std::cell::RefCell::new(vec![0.0; design.n_records()]),
                };
                cg_solve(&op, &rhs, hp.cg)?
            }
        };
        if solution.report.truncated {
            log::warn!(
                "CG stopped at {} iterations with residual MSE {:e}",
                solution.report.iterations,
                solution.report.residual_mse
            );
        }
        let theta = solution.x;
        let sse = residual_sse(&design, &theta, data.y.as_slice());
        let sigma2 = sigma2_map(hp.alpha, hp.beta, sse, data.n_records());
        let covariance = build_covariance(&design, hp, dense_normal)?;
        Ok(Self {
            hp: hp.clone(),
            train: data.clone(),
            design,
            theta,
            sigma2,
            training_sse: sse,
            cg_report: solution.report,
            covariance,
        })
    }

    /// Rebuild a model from stored parameters; the design and covariance are recomputed.
    pub fn from_parts(
        hp: KrsfdHyperparams,
        train: SparseFunctionalDataset,
        theta: Vec<f64>,
        sigma2: f64,
        cg_report: CgReport,
    ) -> Result<Self> {
        let design = SparseDesign::build(&train, &hp)?;
        if theta.len() != design.n_params() {
            return input_err(format!(
                "θ has length {}, expected {}",
                theta.len(),
                design.n_params()
            ));
        }
        if !(sigma2 >= 0.0) {
            return input_err("sigma2 must be non-negative");
        }
        let sse = residual_sse(&design, &theta, train.y.as_slice());
        let dense = if design.n_params() <= hp.dense_threshold
            && matches!(hp.covariance, CovarianceMode::Auto | CovarianceMode::Exact)
        {
            Some(normal_dense(&design, hp.lambda))
        } else {
            None
        };
        let covariance = build_covariance(&design, &hp, dense)?;
        Ok(Self { hp, train, design, theta, sigma2, training_sse: sse, cg_report, covariance })
    }

    pub fn hyperparams(&self) -> &KrsfdHyperparams {
        &self.hp
    }

    pub fn training_data(&self) -> &SparseFunctionalDataset {
        &self.train
    }

    pub fn design(&self) -> &SparseDesign {
        &self.design
    }

    /// `θ_MAP`, laid out `n·L + l`.
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn set_sigma2(&mut self, sigma2: f64) {
        self.sigma2 = sigma2.max(0.0);
    }

    pub fn training_sse(&self) -> f64 {
        self.training_sse
    }

    pub fn cg_report(&self) -> &CgReport {
        &self.cg_report
    }

    pub fn variance_mode(&self) -> Option<VarianceMode> {
        match self.covariance {
            Covariance::Exact(_) => Some(VarianceMode::Exact),
            Covariance::Ilu(_) => Some(VarianceMode::IluApproximate),
            Covariance::Skipped => None,
        }
    }

    fn g_vector(&self, x_new: &[f64]) -> Result<Vec<f64>> {
        if x_new.len() != self.train.input_dim() {
            return input_err(format!(
                "query input has dimension {}, model expects {}",
                x_new.len(),
                self.train.input_dim()
            ));
        }
        let mut g = self.hp.kernel_g.vector(x_new, &self.train.x)?;
        self.design.g.mask_query(&mut g);
        Ok(g)
    }

    fn t_vector(&self, t_new: &[f64]) -> Result<Vec<f64>> {
        if t_new.len() != self.hp.centers.ncols() {
            return input_err(format!(
                "query t has dimension {}, model expects {}",
                t_new.len(),
                self.hp.centers.ncols()
            ));
        }
        let mut t = self.hp.kernel_t.vector(t_new, &self.hp.centers)?;
        self.design.t.mask_query(&mut t);
        Ok(t)
    }

    /// `Θᵀ g`, length L.
    fn contract_g(&self, g: &[f64]) -> Vec<f64> {
        let l = self.design.n_centers();
        let mut out = vec![0.0; l];
        for (n, &gv) in g.iter().enumerate() {
            if gv != 0.0 {
                for (o, &th) in out.iter_mut().zip(&self.theta[n * l..(n + 1) * l]) {
                    *o += gv * th;
                }
            }
        }
        out
    }

    pub fn predict_mean(&self, x_new: &[f64], t_new: &[f64]) -> Result<f64> {
        let gt = self.contract_g(&self.g_vector(x_new)?);
        let t = self.t_vector(t_new)?;
        Ok(gt.iter().zip(&t).map(|(a, b)| a * b).sum())
    }

    pub fn predict_mean_curve(&self, x_new: &[f64], t_grid: &DMatrix<f64>) -> Result<Vec<f64>> {
        let gt = self.contract_g(&self.g_vector(x_new)?);
        (0..t_grid.nrows())
            .map(|k| {
                let tk: Vec<f64> = t_grid.row(k).iter().copied().collect();
                let t = self.t_vector(&tk)?;
                Ok(gt.iter().zip(&t).map(|(a, b)| a * b).sum())
            })
            .collect()
    }

    fn kron(g: &[f64], t: &[f64]) -> DVector<f64> {
        DVector::from_iterator(g.len() * t.len(), g.iter().flat_map(|&a| t.iter().map(move |&b| a * b)))
    }

    fn quad(&self, v: &DVector<f64>) -> Result<(f64, VarianceMode)> {
        match &self.covariance {
            Covariance::Exact(f) => {
                Ok((v.dot(&f.solve_vec(v)), VarianceMode::Exact))
            }
            Covariance::Ilu(f) => {
                let x = f.solve(v.as_slice());
                Ok((v.iter().zip(&x).map(|(a, b)| a * b).sum(), VarianceMode::IluApproximate))
            }
            Covariance::Skipped => Err(Error::Unsupported(
                "model was fit without a covariance factor; refit with covariance mode exact or ilu"
                    .into(),
            )),
        }
    }

    pub fn predict(&self, x_new: &[f64], t_new: &[f64]) -> Result<PredictiveDistribution> {
        let g = self.g_vector(x_new)?;
        let t = self.t_vector(t_new)?;
        let gt = self.contract_g(&g);
        let mean = gt.iter().zip(&t).map(|(a, b)| a * b).sum();
        let v = Self::kron(&g, &t);
        let (q, mode) = self.quad(&v)?;
        let mut variance = self.sigma2 * q;
        if variance < 0.0 {
            log::warn!("negative predictive variance {variance:e} clamped to 0");
            variance = 0.0;
        }
        Ok(PredictiveDistribution { mean, variance, variance_mode: mode })
    }

    pub fn predict_curve(
        &self,
        x_new: &[f64],
        t_grid: &DMatrix<f64>,
    ) -> Result<Vec<PredictiveDistribution>> {
        (0..t_grid.nrows())
            .map(|k| {
                let tk: Vec<f64> = t_grid.row(k).iter().copied().collect();
                self.predict(x_new, &tk)
            })
            .collect()
    }

    /// Latent curves from `θ ~ N(θ_MAP, σ²(HᵀH + λI)⁻¹)`, `n_samples × |t_grid|`.
    pub fn sample_functions(
        &self,
        x_new: &[f64],
        t_grid: &DMatrix<f64>,
        n_samples: usize,
        seed: u64,
    ) -> Result<DMatrix<f64>> {
        if n_samples == 0 {
            return input_err("n_samples must be at least 1");
        }
        let g = self.g_vector(x_new)?;
        let k = t_grid.nrows();
        let vs: Vec<DVector<f64>> = (0..k)
            .map(|j| {
                let tj: Vec<f64> = t_grid.row(j).iter().copied().collect();
                Ok(Self::kron(&g, &self.t_vector(&tj)?))
            })
            .collect::<Result<_>>()?;
        let theta = DVector::from_column_slice(&self.theta);
        let sigma = self.sigma2.sqrt();
        let np = self.theta.len();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut out = DMatrix::zeros(n_samples, k);
        for s in 0..n_samples {
            let z = DVector::from_fn(np, |_, _| rng.sample::<f64, _>(StandardNormal));
            let dev = match &self.covariance {
                Covariance::Exact(f) => f.solve_lower_transpose(&z),
                Covariance::Ilu(f) => DVector::from_vec(f.sample_transform(z.as_slice())?),
                Covariance::Skipped => {
                    return Err(Error::Unsupported("model was fit without a covariance factor".into()))
                }
            };
            let draw = &theta + dev * sigma;
            for (j, v) in vs.iter().enumerate() {
                out[(s, j)] = v.dot(&draw);
            }
        }
        Ok(out)
    }
}

fn normal_dense(design: &SparseDesign, lambda: f64) -> DMatrix<f64> {
    design.to_csr().dense_gram_ata(lambda)
}

fn residual_sse(design: &SparseDesign, theta: &[f64], y: &[f64]) -> f64 {
    let mut h = vec![0.0; design.n_records()];
    design.apply(theta, &mut h);
    h.iter().zip(y).map(|(a, b)| (b - a) * (b - a)).sum()
}

fn build_covariance(
    design: &SparseDesign,
    hp: &KrsfdHyperparams,
    dense: Option<DMatrix<f64>>,
) -> Result<Covariance> {
    let np = design.n_params();
    let mode = match hp.covariance {
        CovarianceMode::Auto if np <= hp.dense_threshold => CovarianceMode::Exact,
        CovarianceMode::Auto => CovarianceMode::Ilu,
        m => m,
    };
    match mode {
        CovarianceMode::Exact => {
            if np > hp.dense_threshold {
                return Err(Error::Capacity(format!(
                    "exact covariance needs N·L ≤ {} (got {np}); use ilu or skip",
                    hp.dense_threshold
                )));
            }
            let a = match dense {
                Some(a) => a,
                None => normal_dense(design, hp.lambda),
            };
            Ok(Covariance::Exact(SymFactor::new(&a)?))
        }
        CovarianceMode::Ilu => {
            let h = design.to_csr();
            let a = h.gram_ata(hp.lambda);
            if a.nnz() > MAX_NORMAL_NNZ {
                return Err(Error::Capacity(format!(
                    "HᵀH has {} stored entries (limit {MAX_NORMAL_NNZ}); use covariance mode skip",
                    a.nnz()
                )));
            }
            Ok(Covariance::Ilu(IluFactor::new(&a, hp.ilu_drop_tolerance, hp.ilu_fill_factor)?))
        }
        CovarianceMode::Skip | CovarianceMode::Auto => Ok(Covariance::Skipped),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_solve;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let (ar, ac) = a.shape();
        let (br, bc) = b.shape();
        DMatrix::from_fn(ar * br, ac * bc, |i, j| a[(i / br, j / bc)] * b[(i % br, j % bc)])
    }

    fn ragged(seed: u64, counts: &[usize]) -> SparseFunctionalDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = counts.len();
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
        let s: usize = counts.iter().sum();
        let t = DMatrix::from_fn(s, 1, |_, _| rng.random_range(0.0..2.0));
        let y = DVector::from_fn(s, |_, _| rng.random_range(-1.0..1.0));
        let mut offsets = vec![0];
        for c in counts {
            offsets.push(offsets.last().unwrap() + c);
        }
        SparseFunctionalDataset::from_grouped(x, t, y, offsets).unwrap()
    }

    fn small_hp(l: usize) -> KrsfdHyperparams {
        KrsfdHyperparams {
            lambda: 0.05,
            kernel_g: KernelConfig::gaussian(0.8).unwrap(),
            kernel_t: KernelConfig::laplacian(0.5).unwrap(),
            truncation: false,
            cg: CgOptions { tol_mse: 1e-26, max_iters: 2000 },
            ..KrsfdHyperparams::benchmark(l, 0.0, 2.0)
        }
    }

    #[test]
    fn single_record_design() {
        let d = SparseFunctionalDataset::from_grouped(
            DMatrix::from_element(1, 1, 0.4),
            DMatrix::from_element(1, 1, 0.7),
            DVector::from_element(1, 1.0),
            vec![0, 1],
        )
        .unwrap();
        let hp = KrsfdHyperparams { centers: DMatrix::from_element(1, 1, 0.2), ..small_hp(1) };
        let h = SparseDesign::build(&d, &hp).unwrap().to_csr();
        assert_eq!(h.shape(), (1, 1));
        assert_eq!(h.get(0, 0), hp.kernel_t.eval(&[0.7], &[0.2]).unwrap());
    }

    fn counts() -> impl Strategy<Value = Vec<usize>> {
        proptest::collection::vec(1usize..6, 1..6)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn design_matches_explicit_blocks(seed in 0u64..1000, counts in counts(), l in 1usize..6) {
            let d = ragged(seed, &counts);
            let n = counts.len();
            let hp = small_hp(l);
            let design = SparseDesign::build(&d, &hp).unwrap();
            let h = design.to_csr().to_dense();
            let g = gram(&hp.kernel_g, &d.x, &d.x).unwrap().values;
            for i in 0..n {
                for r in d.records_of(i) {
                    let tr = gram(&hp.kernel_t, &d.t.rows(r, 1).into_owned(), &hp.centers).unwrap().values;
                    let block = kron(&g.rows(i, 1).into_owned(), &tr);
                    for c in 0..n * l {
                        prop_assert_eq!(h[(r, c)], block[(0, c)]);
                    }
                }
            }
            // Factored apply agrees with the materialized matrix.
            let v: Vec<f64> = (0..n * l).map(|k| (k as f64).cos()).collect();
            let mut out = vec![0.0; d.n_records()];
            design.apply(&v, &mut out);
            let dense = &h * DVector::from_vec(v);
            for (a, b) in out.iter().zip(dense.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let y: Vec<f64> = (0..d.n_records()).map(|k| k as f64 - 3.0).collect();
            let mut back = vec![0.0; n * l];
            design.apply_t(&y, &mut back);
            let dense_t = h.transpose() * DVector::from_vec(y);
            for (a, b) in back.iter().zip(dense_t.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn truncation_only_zeroes(seed in 0u64..1000, counts in counts(), z_g in 0.0f64..0.9) {
            let d = ragged(seed, &counts);
            let full = SparseDesign::build(&d, &small_hp(4)).unwrap().to_csr().to_dense();
            let hp = KrsfdHyperparams { truncation: true, z_g, ..small_hp(4) };
            let cut = SparseDesign::build(&d, &hp).unwrap().to_csr().to_dense();
            for (a, b) in cut.iter().zip(full.iter()) {
                prop_assert!(*a == 0.0 || a == b);
            }
        }

        #[test]
        fn shared_grid_design_is_kronecker(seed in 0u64..1000, n in 1usize..6, l in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let centers = even_grid(l, 0.0, 2.0);
            let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
            let y = DMatrix::from_fn(n, l, |_, _| rng.random_range(-1.0..1.0));
            let dense = crate::data::DenseFunctionalDataset::new(x, centers.clone(), y).unwrap();
            let hp = KrsfdHyperparams { centers: centers.clone(), ..small_hp(l) };
            let h = SparseDesign::build(&dense.to_sparse(), &hp).unwrap().to_csr().to_dense();
            let g = gram(&hp.kernel_g, &dense.x, &dense.x).unwrap().values;
            let t = gram(&hp.kernel_t, &centers, &centers).unwrap().values;
            prop_assert_eq!(h, kron(&g, &t));
        }

        #[test]
        fn sigma2_matches_raw_residual(seed in 0u64..1000, counts in counts(), l in 1usize..6) {
            let d = ragged(seed, &counts);
            let hp = KrsfdHyperparams { cg: CgOptions::default(), ..small_hp(l) };
            let m = KrsfdModel::fit(&d, &hp).unwrap();
            let h = m.design().to_csr().to_dense();
            let r = &d.y - h * DVector::from_column_slice(m.theta());
            let expected = (2.0 * hp.beta + r.norm_squared()) / (2.0 * hp.alpha + 2.0 + d.n_records() as f64);
            prop_assert!((m.sigma2() - expected).abs() <= 1e-12 * expected);
            prop_assert!(m.sigma2() > 0.0);
            prop_assert!(m.cg_report().residual_mse <= hp.cg.tol_mse || m.cg_report().truncated);
        }
    }

    #[test]
    fn joint_zero_fraction_near_target() {
        let counts: Vec<usize> = (0..40).map(|i| 2 + i % 19).collect();
        let d = ragged(3, &counts);
        let hp = KrsfdHyperparams {
            z_g: 0.0,
            truncation: true,
            ..KrsfdHyperparams::benchmark(30, 0.0, 2.0)
        };
        let design = SparseDesign::build(&d, &hp).unwrap();
        let zf = design.zero_fraction();
        assert!((zf - 0.9).abs() < 0.01, "zero fraction {zf}");
        let h = design.to_csr();
        assert_eq!(h.nnz(), design.nnz());
    }

    #[test]
    fn zero_targets_give_zero_theta() {
        let mut d = ragged(4, &[3, 2, 4]);
        d.y.fill(0.0);
        let hp = small_hp(3);
        let m = KrsfdModel::fit(&d, &hp).unwrap();
        assert!(m.theta().iter().all(|&v| v == 0.0));
        let expected = 2.0 * hp.beta / (2.0 * hp.alpha + 2.0 + 9.0);
        assert_eq!(m.sigma2(), expected);
    }

    #[test]
    fn cg_matches_direct_solve() {
        let d = ragged(5, &[4, 4, 4]);
        let hp = small_hp(4);
        let m = KrsfdModel::fit(&d, &hp).unwrap();
        let h = m.design().to_csr().to_dense();
        let a = h.transpose() * &h + DMatrix::identity(12, 12) * hp.lambda;
        let b = h.transpose() * &d.y;
        let direct = sym_solve(&a, &DMatrix::from_column_slice(12, 1, b.as_slice())).unwrap();
        let got = DVector::from_column_slice(m.theta());
        let err = (&got - direct.column(0)).norm() / direct.norm();
        assert!(err < 1e-4, "{err}");

        // Matrix-free path gives the same answer.
        let mf = KrsfdModel::fit(&d, &KrsfdHyperparams { dense_threshold: 0, covariance: CovarianceMode::Skip, ..hp })
            .unwrap();
        let err2 = (DVector::from_column_slice(mf.theta()) - direct.column(0)).norm() / direct.norm();
        assert!(err2 < 1e-4);
        assert!(mf.predict(&[0.0, 0.0], &[1.0]).is_err());
        assert!(mf.predict_mean(&[0.0, 0.0], &[1.0]).is_ok());
    }

    #[test]
    fn prediction_mean_matches_design_and_far_query_vanishes() {
        let d = ragged(7, &[3, 3]);
        let hp = KrsfdHyperparams { truncation: true, z_g: 0.3, ..small_hp(4) };
        let m = KrsfdModel::fit(&d, &hp).unwrap();
        let mut fitted = vec![0.0; d.n_records()];
        m.design().apply(m.theta(), &mut fitted);
        for i in 0..2 {
            let xi: Vec<f64> = d.x.row(i).iter().copied().collect();
            for r in d.records_of(i) {
                let p = m.predict(&xi, &[d.t[(r, 0)]]).unwrap();
                assert!((p.mean - fitted[r]).abs() < 1e-12);
                assert!(p.variance >= 0.0);
            }
        }
        let far = m.predict(&[50.0, 50.0], &[1.0]).unwrap();
        assert_eq!((far.mean, far.variance), (0.0, 0.0));
    }

    #[test]
    fn ilu_variance_close_to_exact() {
        let d = ragged(8, &[5, 6, 4, 7, 5]);
        let hp = small_hp(5);
        let exact = KrsfdModel::fit(&d, &hp).unwrap();
        let ilu = KrsfdModel::fit(&d, &KrsfdHyperparams { covariance: CovarianceMode::Ilu, ..hp }).unwrap();
        assert_eq!(ilu.variance_mode(), Some(VarianceMode::IluApproximate));
        for (x, t) in [([0.1, -0.2], 0.4), ([0.5, 0.5], 1.7), ([-0.8, 0.3], 1.0)] {
            let a = exact.predict(&x, &[t]).unwrap().variance;
            let b = ilu.predict(&x, &[t]).unwrap().variance;
            assert!((a - b).abs() <= 0.1 * a, "{a} vs {b}");
        }
    }

    #[test]
    fn sampling_zero_noise_and_determinism() {
        let d = ragged(9, &[3, 4]);
        let mut m = KrsfdModel::fit(&d, &small_hp(3)).unwrap();
        let grid = even_grid(5, 0.0, 2.0);
        let a = m.sample_functions(&[0.2, 0.1], &grid, 4, 11).unwrap();
        assert_eq!(a, m.sample_functions(&[0.2, 0.1], &grid, 4, 11).unwrap());
        m.set_sigma2(0.0);
        let flat = m.sample_functions(&[0.2, 0.1], &grid, 2, 3).unwrap();
        let mean = m.predict_mean_curve(&[0.2, 0.1], &grid).unwrap();
        for s in 0..2 {
            for j in 0..5 {
                assert!((flat[(s, j)] - mean[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_duplicate_centers_and_empty_inputs() {
        let d = ragged(10, &[2, 2]);
        let hp = KrsfdHyperparams { centers: DMatrix::from_row_slice(2, 1, &[0.5, 0.5]), ..small_hp(2) };
        assert!(KrsfdModel::fit(&d, &hp).is_err());
        let empty = ragged(11, &[2, 0]);
        assert!(KrsfdModel::fit(&empty, &small_hp(2)).is_err());
    }
}
