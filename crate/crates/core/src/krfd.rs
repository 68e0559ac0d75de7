//! Dense-grid kernel regression for functional data.
//!
//! The latent surface is `f(X, t) = Σ_n Σ_l k_G(X, X_n) Θ_nl k_T(t, t_l)` plus an optional
//! t-independent offset `μ(X) = Σ_m c_m k_M(X, X_m)`. With Gaussian noise and the separable
//! prior on `Θ`, the joint MAP estimate and the predictive distribution are closed form and
//! only need `N × N` and `L × L` factorizations.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::DenseFunctionalDataset;
use crate::error::{input_err, Error, Result};
use crate::kernel::{gram_square, KernelConfig, KernelKind};
use crate::linalg::{eig_sym, SymFactor};

/// Relative floor applied to the eigenvalues of `K² + λK` before inverting them.
pub const EIGEN_CLIP: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KrfdHyperparams {
    pub lambda_g: f64,
    pub lambda_t: f64,
    pub lambda_m: f64,
    pub kernel_g: KernelConfig,
    pub kernel_t: KernelConfig,
    pub kernel_m: KernelConfig,
    /// Inverse-gamma shape of the noise-variance prior.
    pub alpha: f64,
    /// Inverse-gamma scale of the noise-variance prior.
    pub beta: f64,
    pub include_mu: bool,
}

impl Default for KrfdHyperparams {
    /// Best configuration found for the sine-plus-line benchmark.
    fn default() -> Self {
        Self {
            lambda_g: 1.725e-4,
            lambda_t: 0.052,
            lambda_m: 1.5e-5,
            kernel_g: KernelConfig { kind: KernelKind::Gaussian, scale: 1.963 },
            kernel_t: KernelConfig { kind: KernelKind::Gaussian, scale: 0.466 },
            kernel_m: KernelConfig { kind: KernelKind::Gaussian, scale: 13.026 },
            alpha: 1e-3,
            beta: 1e-3,
            include_mu: true,
        }
    }
}

impl KrfdHyperparams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_g", self.lambda_g),
            ("lambda_t", self.lambda_t),
            ("lambda_m", self.lambda_m),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return input_err(format!("{name} must be positive and finite, got {v}"));
            }
        }
        self.kernel_g.validate()?;
        self.kernel_t.validate()?;
        self.kernel_m.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// Closed form or exact dense inverse.
    Exact,
    /// Incomplete-LU approximate inverse.
    IluApproximate,
}

/// Gaussian predictive distribution at one `(X, t)` query.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub mean: f64,
    pub variance: f64,
    pub variance_mode: VarianceMode,
}

impl PredictiveDistribution {
    pub fn std(&self) -> f64 {
        self.variance.max(0.0).sqrt()
    }
}

/// `P` with `P Pᵀ = (K² + λK)⁻¹`, from the eigendecomposition of `K`.
#[derive(Clone, Debug)]
struct PosteriorFactor {
    proj: DMatrix<f64>,
}

impl PosteriorFactor {
    fn new(gram: &DMatrix<f64>, lambda: f64) -> Result<Self> {
        let eig = eig_sym(gram)?;
        let d: Vec<f64> = eig.values.iter().map(|e| e * (e + lambda)).collect();
        let d_max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(d_max > 0.0 && d_max.is_finite()) {
            return Err(Error::Numerical("posterior covariance factor is not PSD".into()));
        }
        let floor = EIGEN_CLIP * d_max;
        let n = gram.nrows();
        let proj = DMatrix::from_fn(n, n, |i, k| eig.vectors[(i, k)] / d[k].max(floor).sqrt());
        Ok(Self { proj })
    }

    /// `Pᵀ v`
    fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        self.proj.tr_mul(v)
    }

    /// `vᵀ (K² + λK)⁻¹ v`
    fn quad(&self, v: &DVector<f64>) -> f64 {
        self.project(v).norm_squared()
    }
}

/// Fitted dense model.
#[derive(Clone, Debug)]
pub struct KrfdModel {
    hp: KrfdHyperparams,
    x_train: DMatrix<f64>,
    t_train: DMatrix<f64>,
    theta: DMatrix<f64>,
    c: DVector<f64>,
    sigma2: f64,
    training_sse: f64,
    g_cov: PosteriorFactor,
    t_cov: PosteriorFactor,
    m_cov: Option<PosteriorFactor>,
}

impl KrfdModel {
    /// Joint MAP fit of `(Θ, c)` followed by the MAP noise variance.
    pub fn fit(data: &DenseFunctionalDataset, hp: &KrfdHyperparams) -> Result<Self> {
        hp.validate()?;
        let (n, l) = data.y.shape();
        let y = &data.y;
        let g = gram_square(&hp.kernel_g, &data.x)?.values;
        let t = gram_square(&hp.kernel_t, &data.t)?.values;
        let fg = SymFactor::new(&shifted(&g, hp.lambda_g))?;
        let ft = SymFactor::new(&shifted(&t, hp.lambda_t))?;

        let (c, mc) = if hp.include_mu {
            let m = gram_square(&hp.kernel_m, &data.x)?.values;
            let fm = SymFactor::new(&shifted(&m, hp.lambda_m))?;
            // A = G (G + λ_G I)⁻¹, B = (T + λ_T I)⁻¹ T, C = (M + λ_M I)⁻¹ / L.
            let a = fg.solve(&g).transpose();
            let b = ft.solve(&t);
            let b_sum = b.sum();
            let z = y - &a * y * &b;
            let z_rows = DVector::from_iterator(n, z.row_iter().map(|r| r.sum()));
            let rhs = fm.solve_vec(&z_rows) / l as f64;
            let cam = fm.solve(&(&a * &m)) * (b_sum / l as f64);
            let system = DMatrix::identity(n, n) - cam;
            let c = system
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Singular("offset coefficient system is singular".into()))?;
            let mc = &m * &c;
            (c, mc)
        } else {
            (DVector::zeros(n), DVector::zeros(n))
        };
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("offset coefficients are not finite".into()));
        }

        let r = DMatrix::from_fn(n, l, |i, j| y[(i, j)] - mc[i]);
        let theta = ft.solve(&fg.solve(&r).transpose()).transpose();
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("Θ is not finite".into()));
        }
        let fitted = &g * &theta * &t;
        let sse: f64 = (0..n)
            .flat_map(|i| (0..l).map(move |j| (i, j)))
            .map(|(i, j)| (y[(i, j)] - fitted[(i, j)] - mc[i]).powi(2))
            .sum();
        let sigma2 = sigma2_map(hp.alpha, hp.beta, sse, n * l);

        Self::assemble(*hp, data.x.clone(), data.t.clone(), theta, c, sigma2, sse, &g, &t)
    }

    /// Rebuild a model from stored parameters; Gram factors are recomputed from the training
    /// points.
    pub fn from_parts(
        hp: KrfdHyperparams,
        x_train: DMatrix<f64>,
        t_train: DMatrix<f64>,
        theta: DMatrix<f64>,
        c: DVector<f64>,
        sigma2: f64,
        training_sse: f64,
    ) -> Result<Self> {
        hp.validate()?;
        if theta.shape() != (x_train.nrows(), t_train.nrows()) || c.len() != x_train.nrows() {
            return input_err("stored parameters do not match the training point sets");
        }
        if !(sigma2 >= 0.0) {
            return input_err("sigma2 must be non-negative");
        }
        let g = gram_square(&hp.kernel_g, &x_train)?.values;
        let t = gram_square(&hp.kernel_t, &t_train)?.values;
        Self::assemble(hp, x_train, t_train, theta, c, sigma2, training_sse, &g, &t)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        hp: KrfdHyperparams,
        x_train: DMatrix<f64>,
        t_train: DMatrix<f64>,
        theta: DMatrix<f64>,
        c: DVector<f64>,
        sigma2: f64,
        training_sse: f64,
        g: &DMatrix<f64>,
        t: &DMatrix<f64>,
    ) -> Result<Self> {
        let g_cov = PosteriorFactor::new(g, hp.lambda_g)?;
        let t_cov = PosteriorFactor::new(t, hp.lambda_t)?;
        let m_cov = if hp.include_mu {
            let m = gram_square(&hp.kernel_m, &x_train)?.values;
            Some(PosteriorFactor::new(&m, hp.lambda_m)?)
        } else {
            None
        };
        Ok(Self { hp, x_train, t_train, theta, c, sigma2, training_sse, g_cov, t_cov, m_cov })
    }

    pub fn hyperparams(&self) -> &KrfdHyperparams {
        &self.hp
    }

    /// `Θ_MAP`, row `n` ↔ training input `n`, column `l` ↔ grid point `l`.
    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// Override the noise variance (e.g. to inspect the zero-noise limit).
    pub fn set_sigma2(&mut self, sigma2: f64) {
        self.sigma2 = sigma2.max(0.0);
    }

    pub fn training_sse(&self) -> f64 {
        self.training_sse
    }

    pub fn x_train(&self) -> &DMatrix<f64> {
        &self.x_train
    }

    pub fn t_train(&self) -> &DMatrix<f64> {
        &self.t_train
    }

    pub fn n_points(&self) -> usize {
        self.t_train.nrows()
    }

    /// `G Θ T + (M c) 1ᵀ` on the training inputs and grid.
    pub fn fitted_surface(&self) -> Result<DMatrix<f64>> {
        let g = gram_square(&self.hp.kernel_g, &self.x_train)?.values;
        let t = gram_square(&self.hp.kernel_t, &self.t_train)?.values;
        let mut f = g * &self.theta * t;
        if self.hp.include_mu {
            let m = gram_square(&self.hp.kernel_m, &self.x_train)?.values;
            let mc = m * &self.c;
            for (i, mut row) in f.row_iter_mut().enumerate() {
                row.add_scalar_mut(mc[i]);
            }
        }
        Ok(f)
    }

    fn check_dims(&self, x_new: &[f64], t_dim: usize) -> Result<()> {
        if x_new.len() != self.x_train.ncols() {
            return input_err(format!(
                "query input has dimension {}, model expects {}",
                x_new.len(),
                self.x_train.ncols()
            ));
        }
        if t_dim != self.t_train.ncols() {
            return input_err(format!(
                "query t has dimension {t_dim}, model expects {}",
                self.t_train.ncols()
            ));
        }
        Ok(())
    }

    fn input_terms(&self, x_new: &[f64]) -> Result<InputTerms> {
        let g = DVector::from_vec(self.hp.kernel_g.vector(x_new, &self.x_train)?);
        let g_theta = self.theta.tr_mul(&g);
        let (offset, m_quad, m_proj) = match &self.m_cov {
            Some(mf) => {
                let m = DVector::from_vec(self.hp.kernel_m.vector(x_new, &self.x_train)?);
                (m.dot(&self.c), mf.quad(&m), Some(mf.project(&m)))
            }
            None => (0.0, 0.0, None),
        };
        let g_proj = self.g_cov.project(&g);
        Ok(InputTerms { g_theta, offset, g_quad: g_proj.norm_squared(), g_proj, m_quad, m_proj })
    }

    fn at(&self, terms: &InputTerms, t_new: &[f64]) -> Result<PredictiveDistribution> {
        let tv = DVector::from_vec(self.hp.kernel_t.vector(t_new, &self.t_train)?);
        let mean = terms.g_theta.dot(&tv) + terms.offset;
        let l = self.n_points() as f64;
        let variance =
            self.sigma2 * terms.g_quad * self.t_cov.quad(&tv) + self.sigma2 / l * terms.m_quad;
        Ok(PredictiveDistribution { mean, variance, variance_mode: VarianceMode::Exact })
    }

    /// Predictive distribution of the latent function at `(x_new, t_new)`.
    pub fn predict(&self, x_new: &[f64], t_new: &[f64]) -> Result<PredictiveDistribution> {
        self.check_dims(x_new, t_new.len())?;
        let terms = self.input_terms(x_new)?;
        self.at(&terms, t_new)
    }

    /// [`KrfdModel::predict`] over every row of `t_grid`, sharing the input-side work.
    pub fn predict_curve(
        &self,
        x_new: &[f64],
        t_grid: &DMatrix<f64>,
    ) -> Result<Vec<PredictiveDistribution>> {
        self.check_dims(x_new, t_grid.ncols())?;
        if t_grid.nrows() == 0 {
            return Ok(Vec::new());
        }
        let terms = self.input_terms(x_new)?;
        (0..t_grid.nrows())
            .map(|k| {
                let tk: Vec<f64> = t_grid.row(k).iter().copied().collect();
                self.at(&terms, &tk)
            })
            .collect()
    }

    /// Predictive means only.
    pub fn predict_mean_curve(&self, x_new: &[f64], t_grid: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.check_dims(x_new, t_grid.ncols())?;
        let g = DVector::from_vec(self.hp.kernel_g.vector(x_new, &self.x_train)?);
        let g_theta = self.theta.tr_mul(&g);
        let offset = if self.hp.include_mu {
            DVector::from_vec(self.hp.kernel_m.vector(x_new, &self.x_train)?).dot(&self.c)
        } else {
            0.0
        };
        let tk = crate::kernel::gram(&self.hp.kernel_t, t_grid, &self.t_train)?.values;
        Ok((tk * g_theta).iter().map(|v| v + offset).collect())
    }

    /// Draw latent curves on `t_grid` from the parameter posterior.
    ///
    /// Each sample draws `Θ ~ N(Θ_MAP, Σ_θ)` through the Kronecker factorization
    /// `Σ_θ = σ² P_G P_Gᵀ ⊗ P_T P_Tᵀ` (so `Θ = Θ_MAP + σ P_G Z P_Tᵀ` with `Z` an `N × L`
    /// standard-normal matrix) and `c ~ N(c_MAP, σ²/L · P_M P_Mᵀ)`. No observation noise is
    /// added. Output is `n_samples × |t_grid|`.
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
        self.check_dims(x_new, t_grid.ncols())?;
        let terms = self.input_terms(x_new)?;
        let k = t_grid.nrows();
        let (n, l) = self.theta.shape();
        let mut means = Vec::with_capacity(k);
        let mut b_cols = DMatrix::zeros(l, k);
        for j in 0..k {
            let tj: Vec<f64> = t_grid.row(j).iter().copied().collect();
            let tv = DVector::from_vec(self.hp.kernel_t.vector(&tj, &self.t_train)?);
            means.push(terms.g_theta.dot(&tv) + terms.offset);
            b_cols.set_column(j, &self.t_cov.project(&tv));
        }
        let sigma = self.sigma2.sqrt();
        let offset_scale = sigma / (l as f64).sqrt();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut out = DMatrix::zeros(n_samples, k);
        let mut u = DVector::zeros(l);
        for s in 0..n_samples {
            // u = Zᵀ (P_Gᵀ g), drawing Z row by row.
            u.fill(0.0);
            for i in 0..n {
                let a = terms.g_proj[i];
                for ul in u.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *ul += a * z;
                }
            }
            let mut shift = 0.0;
            if let Some(mp) = &terms.m_proj {
                for i in 0..n {
                    let z: f64 = rng.sample(StandardNormal);
                    shift += mp[i] * z;
                }
            }
            let theta_part = b_cols.tr_mul(&u);
            for j in 0..k {
                out[(s, j)] = means[j] + sigma * theta_part[j] + offset_scale * shift;
            }
        }
        Ok(out)
    }
}

struct InputTerms {
    /// `Θᵀ g_new`
    g_theta: DVector<f64>,
    offset: f64,
    g_proj: DVector<f64>,
    g_quad: f64,
    m_quad: f64,
    m_proj: Option<DVector<f64>>,
}

fn shifted(m: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let mut s = m.clone();
    for i in 0..s.nrows() {
        s[(i, i)] += lambda;
    }
    s
}

/// Mode of the inverse-gamma conditional of the noise variance.
pub fn sigma2_map(alpha: f64, beta: f64, sse: f64, n_obs: usize) -> f64 {
    (2.0 * beta + sse) / (2.0 * alpha + 2.0 + n_obs as f64)
}
