//! Metrics, K-fold splits and seeded random hyperparameter search.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{flm_fit, krr_bank_fit_dense, FlmModel, FlmOptions, KrrBankModel, KrrParams};
use crate::data::{DenseFunctionalDataset, FunctionalDataset};
use crate::datagen::shuffle;
use crate::error::{input_err, Error, Result};
use crate::kernel::{gram_square, KernelConfig, KernelKind};
use crate::krfd::{KrfdHyperparams, KrfdModel};
use crate::krsfd::{even_grid, CovarianceMode, KrsfdHyperparams, KrsfdModel, DEFAULT_DENSE_THRESHOLD};
use crate::linalg::{CgOptions, SymFactor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
    pub mean_r: f64,
    pub n_points: usize,
    /// Curves left out of `mean_r` because one side has zero variance.
    pub n_curves_skipped: usize,
    pub per_curve_r: Vec<Option<f64>>,
}

/// Pooled MAE/RMSE/R² plus the mean per-curve Pearson correlation.
pub fn metrics(pred: &[Vec<f64>], obs: &[Vec<f64>]) -> Result<MetricReport> {
    if pred.len() != obs.len() {
        return input_err(format!("{} predicted curves vs {} observed", pred.len(), obs.len()));
    }
    for (i, (p, o)) in pred.iter().zip(obs).enumerate() {
        if p.len() != o.len() {
            return input_err(format!("curve {i}: {} predictions vs {} observations", p.len(), o.len()));
        }
        if o.is_empty() {
            return input_err(format!("curve {i} is empty"));
        }
    }
    let n: usize = obs.iter().map(Vec::len).sum();
    if n == 0 {
        return input_err("no observations");
    }
    let pairs = || pred.iter().flatten().zip(obs.iter().flatten());
    let nf = n as f64;
    let mae = pairs().map(|(p, o)| (p - o).abs()).sum::<f64>() / nf;
    let ss_res: f64 = pairs().map(|(p, o)| (p - o) * (p - o)).sum();
    let rmse = (ss_res / nf).sqrt();
    let mean_obs = obs.iter().flatten().sum::<f64>() / nf;
    let ss_tot: f64 = obs.iter().flatten().map(|o| (o - mean_obs) * (o - mean_obs)).sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    let per_curve_r: Vec<Option<f64>> = pred.iter().zip(obs).map(|(p, o)| pearson(p, o)).collect();
    let kept: Vec<f64> = per_curve_r.iter().flatten().copied().collect();
    let mean_r = if kept.is_empty() { f64::NAN } else { kept.iter().sum::<f64>() / kept.len() as f64 };
    Ok(MetricReport {
        mae,
        rmse,
        r2,
        mean_r,
        n_points: n,
        n_curves_skipped: per_curve_r.len() - kept.len(),
        per_curve_r,
    })
}

/// Pearson correlation; `None` when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if a.is_empty() || constant(a) || constant(b) {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let r = sab / (saa * sbb).sqrt();
    r.is_finite().then(|| r.clamp(-1.0, 1.0))
}

/// One `(train, validation)` pair of input indices.
pub type Fold = (Vec<usize>, Vec<usize>);

/// Shuffle the inputs, then cut them into `k` contiguous folds whose sizes differ by at most 1.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return input_err("k must be at least 2");
    }
    if k > n {
        return input_err(format!("k = {k} exceeds the {n} inputs"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle(&mut idx, seed);
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let val = idx[start..start + len].to_vec();
        let train = idx[..start].iter().chain(&idx[start + len..]).copied().collect();
        folds.push((train, val));
        start += len;
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Real(f64),
    Choice(String),
}

impl std::fmt::Display for ParamValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Real(v) => write!(f, "{v}"),
            Self::Choice(s) => f.write_str(s),
        }
    }
}

pub type Config = BTreeMap<String, ParamValue>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Domain {
    LogUniform { lo: f64, hi: f64 },
    Uniform { lo: f64, hi: f64 },
    Categorical { choices: Vec<String> },
}

impl Domain {
    fn validate(&self, name: &str) -> Result<()> {
        let ok = match self {
            Self::LogUniform { lo, hi } => *lo > 0.0 && lo <= hi && hi.is_finite(),
            Self::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
            Self::Categorical { choices } => !choices.is_empty(),
        };
        if ok {
            Ok(())
        } else {
            input_err(format!("search domain for '{name}' is invalid"))
        }
    }

    fn sample(&self, rng: &mut ChaCha20Rng) -> ParamValue {
        match self {
            Self::LogUniform { lo, hi } => {
                let u: f64 = rng.random();
                if lo == hi {
                    ParamValue::Real(*lo)
                } else {
                    ParamValue::Real((lo.ln() + (hi.ln() - lo.ln()) * u).exp().clamp(*lo, *hi))
                }
            }
            Self::Uniform { lo, hi } => {
                let u: f64 = rng.random();
                ParamValue::Real(if lo == hi { *lo } else { lo + (hi - lo) * u })
            }
            Self::Categorical { choices } => {
                ParamValue::Choice(choices[rng.random_range(0..choices.len())].clone())
            }
        }
    }
}

/// Ordered list of named domains; sampling order follows the list.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub params: Vec<(String, Domain)>,
}

impl SearchSpace {
    pub fn with(mut self, name: &str, domain: Domain) -> Self {
        self.params.retain(|(n, _)| n != name);
        self.params.push((name.to_string(), domain));
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.params.iter().try_for_each(|(n, d)| d.validate(n))
    }

    pub fn sample(&self, rng: &mut ChaCha20Rng) -> Config {
        self.params.iter().map(|(n, d)| (n.clone(), d.sample(rng))).collect()
    }

    /// Default space for each model family.
    pub fn default_for(kind: ModelKind) -> Self {
        let lam = || Domain::LogUniform { lo: 1e-6, hi: 1.0 };
        let sig = || Domain::LogUniform { lo: 0.1, hi: 100.0 };
        let ker = || Domain::Categorical { choices: vec!["gaussian".into(), "laplacian".into()] };
        let s = Self::default();
        match kind {
            ModelKind::Krfd => s
                .with("lambda_g", lam())
                .with("lambda_t", lam())
                .with("lambda_m", lam())
                .with("sigma_g", sig())
                .with("sigma_t", sig())
                .with("sigma_m", sig())
                .with("kernel_x", ker())
                .with("kernel_t", ker()),
            ModelKind::Krsfd => s
                .with("lambda", lam())
                .with("sigma_g", sig())
                .with("sigma_t", sig())
                .with("z_g", Domain::Uniform { lo: 0.1, hi: 0.9 })
                .with("kernel_x", ker())
                .with("kernel_t", ker()),
            ModelKind::Flm => s.with("lambda", lam()).with("sigma", sig()).with("kernel_t", ker()),
            ModelKind::Krr => s
                .with("alpha", lam())
                .with("gamma", Domain::LogUniform { lo: 1e-6, hi: 1.0 })
                .with("kernel_x", ker()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Rmse,
    Mae,
    R2,
    MeanR,
}

impl Objective {
    pub fn of(&self, m: &MetricReport) -> f64 {
        match self {
            Self::Rmse => m.rmse,
            Self::Mae => m.mae,
            Self::R2 => m.r2,
            Self::MeanR => m.mean_r,
        }
    }

    pub fn minimize(&self) -> bool {
        matches!(self, Self::Rmse | Self::Mae)
    }

    /// Strictly better, NaN never wins.
    pub fn better(&self, a: f64, b: f64) -> bool {
        if a.is_nan() {
            return false;
        }
        if b.is_nan() {
            return true;
        }
        if self.minimize() {
            a < b
        } else {
            a > b
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rmse" => Ok(Self::Rmse),
            "mae" => Ok(Self::Mae),
            "r2" => Ok(Self::R2),
            "mean_r" => Ok(Self::MeanR),
            other => input_err(format!("unknown objective '{other}' (rmse, mae, r2, mean_r)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub config: Config,
    pub fold_scores: Vec<f64>,
    /// Mean over folds; absent when the trial failed.
    pub mean: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best_index: usize,
    pub best_config: Config,
    pub best_score: f64,
    pub trials: Vec<TrialRecord>,
}

/// Sample `n_trials` configurations and score each with `evaluate` on every fold.
///
/// The configuration stream depends only on `seed`, so a longer search extends a shorter one.
/// Ties keep the earliest trial.
pub fn random_search_with(
    space: &SearchSpace,
    folds: &[Fold],
    n_trials: usize,
    seed: u64,
    objective: Objective,
    mut evaluate: impl FnMut(&Config, &Fold) -> Result<f64>,
) -> Result<SearchResult> {
    if n_trials == 0 {
        return input_err("n_trials must be at least 1");
    }
    space.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(n_trials);
    let mut best: Option<(usize, f64)> = None;
    for index in 0..n_trials {
        let config = space.sample(&mut rng);
        let mut fold_scores = Vec::with_capacity(folds.len());
        let mut error = None;
        for fold in folds {
            match evaluate(&config, fold) {
                Ok(s) if s.is_finite() => fold_scores.push(s),
                Ok(s) => {
                    error = Some(format!("non-finite score {s}"));
                    break;
                }
                Err(e) => {
                    error = Some(e.to_string());
                    break;
                }
            }
        }
        let mean = if error.is_none() && !fold_scores.is_empty() {
            Some(fold_scores.iter().sum::<f64>() / fold_scores.len() as f64)
        } else {
            None
        };
        log::debug!("trial {index}: {mean:?}");
        if let Some(m) = mean {
            if best.is_none_or(|(_, b)| objective.better(m, b)) {
                best = Some((index, m));
            }
        }
        trials.push(TrialRecord { index, config, fold_scores, mean, error });
    }
    match best {
        Some((i, s)) => Ok(SearchResult {
            best_index: i,
            best_config: trials[i].config.clone(),
            best_score: s,
            trials,
        }),
        None => Err(Error::SearchFailed(trials)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Krfd,
    Krsfd,
    Flm,
    Krr,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Krfd => "krfd",
            Self::Krsfd => "krsfd",
            Self::Flm => "flm",
            Self::Krr => "krr",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "krfd" => Ok(Self::Krfd),
            "krsfd" => Ok(Self::Krsfd),
            "flm" => Ok(Self::Flm),
            "krr" | "krrs" => Ok(Self::Krr),
            other => input_err(format!("unknown model kind '{other}' (krfd, krsfd, flm, krr)")),
        }
    }
}

/// Settings that are not searched over.
#[derive(Clone, Debug, PartialEq)]
pub struct FitSettings {
    /// Center grid for krsfd and for flm on sparse data; `None` uses `n_centers` evenly spaced
    /// points over the observed t range.
    pub centers: Option<DMatrix<f64>>,
    pub n_centers: usize,
    pub alpha: f64,
    pub beta: f64,
    pub include_mu: bool,
    pub covariance: CovarianceMode,
    pub dense_threshold: usize,
    pub cg: CgOptions,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            centers: None,
            n_centers: 30,
            alpha: 1e-3,
            beta: 1e-3,
            include_mu: true,
            covariance: CovarianceMode::Auto,
            dense_threshold: DEFAULT_DENSE_THRESHOLD,
            cg: CgOptions::default(),
        }
    }
}

impl FitSettings {
    /// Explicit centers, or an even grid over the observed range of the first t coordinate.
    pub fn resolve_centers(&self, data: &FunctionalDataset) -> Result<DMatrix<f64>> {
        if let Some(c) = &self.centers {
            return Ok(c.clone());
        }
        let t = match data {
            FunctionalDataset::Dense(d) => &d.t,
            FunctionalDataset::Sparse(s) => &s.t,
        };
        if t.ncols() != 1 {
            return input_err("automatic centers need one-dimensional t; supply a center grid");
        }
        let lo = t.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if self.n_centers == 0 {
            return input_err("n_centers must be at least 1");
        }
        Ok(even_grid(self.n_centers, lo, hi))
    }
}

fn real(cfg: &Config, key: &str, default: f64) -> Result<f64> {
    match cfg.get(key) {
        None => Ok(default),
        Some(ParamValue::Real(v)) => Ok(*v),
        Some(ParamValue::Choice(s)) => s
            .parse()
            .map_err(|_| Error::Input(format!("'{key}' must be a number, got '{s}'"))),
    }
}

fn kind(cfg: &Config, key: &str, default: KernelKind) -> Result<KernelKind> {
    match cfg.get(key) {
        None => Ok(default),
        Some(ParamValue::Choice(s)) => s.parse().map_err(Error::Input),
        Some(ParamValue::Real(v)) => input_err(format!("'{key}' must be a kernel name, got {v}")),
    }
}

fn check_keys(cfg: &Config, allowed: &[&str]) -> Result<()> {
    match cfg.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => input_err(format!("unknown hyperparameter '{k}' (allowed: {})", allowed.join(", "))),
        None => Ok(()),
    }
}

pub const KRFD_KEYS: &[&str] =
    &["lambda_g", "lambda_t", "lambda_m", "sigma_g", "sigma_t", "sigma_m", "kernel_x", "kernel_t"];
pub const KRSFD_KEYS: &[&str] = &["lambda", "sigma_g", "sigma_t", "z_g", "kernel_x", "kernel_t"];
pub const FLM_KEYS: &[&str] = &["lambda", "sigma", "kernel_t"];
pub const KRR_KEYS: &[&str] = &["alpha", "gamma", "kernel_x"];

/// Missing keys fall back to the benchmark defaults.
pub fn krfd_hyperparams(cfg: &Config, s: &FitSettings) -> Result<KrfdHyperparams> {
    check_keys(cfg, KRFD_KEYS)?;
    let d = KrfdHyperparams::default();
    let kx = kind(cfg, "kernel_x", d.kernel_g.kind)?;
    Ok(KrfdHyperparams {
        lambda_g: real(cfg, "lambda_g", d.lambda_g)?,
        lambda_t: real(cfg, "lambda_t", d.lambda_t)?,
        lambda_m: real(cfg, "lambda_m", d.lambda_m)?,
        kernel_g: KernelConfig::new(kx, real(cfg, "sigma_g", d.kernel_g.scale)?)?,
        kernel_t: KernelConfig::new(kind(cfg, "kernel_t", d.kernel_t.kind)?, real(cfg, "sigma_t", d.kernel_t.scale)?)?,
        kernel_m: KernelConfig::new(kx, real(cfg, "sigma_m", d.kernel_m.scale)?)?,
        alpha: s.alpha,
        beta: s.beta,
        include_mu: s.include_mu,
    })
}

pub fn krsfd_hyperparams(cfg: &Config, s: &FitSettings, centers: DMatrix<f64>) -> Result<KrsfdHyperparams> {
    check_keys(cfg, KRSFD_KEYS)?;
    let d = KrsfdHyperparams::benchmark(1, 0.0, 1.0);
    Ok(KrsfdHyperparams {
        lambda: real(cfg, "lambda", d.lambda)?,
        kernel_g: KernelConfig::new(kind(cfg, "kernel_x", d.kernel_g.kind)?, real(cfg, "sigma_g", d.kernel_g.scale)?)?,
        kernel_t: KernelConfig::new(kind(cfg, "kernel_t", d.kernel_t.kind)?, real(cfg, "sigma_t", d.kernel_t.scale)?)?,
        z_g: real(cfg, "z_g", d.z_g)?,
        centers,
        alpha: s.alpha,
        beta: s.beta,
        cg: s.cg,
        dense_threshold: s.dense_threshold,
        covariance: s.covariance,
        ..d
    })
}

pub fn flm_options(cfg: &Config, centers: Option<DMatrix<f64>>) -> Result<FlmOptions> {
    check_keys(cfg, FLM_KEYS)?;
    let kt = KernelConfig::new(kind(cfg, "kernel_t", KernelKind::Gaussian)?, real(cfg, "sigma", 0.532)?)?;
    let mut o = FlmOptions::new(real(cfg, "lambda", 0.044)?, kt);
    o.centers = centers;
    Ok(o)
}

pub fn krr_params(cfg: &Config) -> Result<KrrParams> {
    check_keys(cfg, KRR_KEYS)?;
    KrrParams::from_gamma(
        kind(cfg, "kernel_x", KernelKind::Gaussian)?,
        real(cfg, "gamma", 0.1)?,
        real(cfg, "alpha", 1e-3)?,
    )
}

/// Any fitted model.
#[derive(Clone, Debug)]
pub enum FittedModel {
    Krfd(KrfdModel),
    Krsfd(KrsfdModel),
    Flm(FlmModel),
    Krr(KrrBankModel),
}

impl FittedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Krfd(_) => ModelKind::Krfd,
            Self::Krsfd(_) => ModelKind::Krsfd,
            Self::Flm(_) => ModelKind::Flm,
            Self::Krr(_) => ModelKind::Krr,
        }
    }

    /// Mean prediction of the latent curve of `x` at every row of `t`.
    pub fn predict_mean_curve(&self, x: &[f64], t: &DMatrix<f64>) -> Result<Vec<f64>> {
        match self {
            Self::Krfd(m) => m.predict_mean_curve(x, t),
            Self::Krsfd(m) => m.predict_mean_curve(x, t),
            Self::Flm(m) => m.predict_curve(x, t),
            Self::Krr(m) => {
                let all = m.predict(x)?;
                if t.nrows() != all.len() {
                    return Err(Error::Unsupported(
                        "per-point KRR predicts only on its training grid".into(),
                    ));
                }
                Ok(all)
            }
        }
    }

    /// Mean predictions at every observed location of `data`, grouped by input.
    pub fn predict_observations(&self, data: &FunctionalDataset) -> Result<Vec<Vec<f64>>> {
        match data {
            FunctionalDataset::Dense(d) => (0..d.n_inputs())
                .map(|i| {
                    let xi: Vec<f64> = d.x.row(i).iter().copied().collect();
                    self.predict_mean_curve(&xi, &d.t)
                })
                .collect(),
            FunctionalDataset::Sparse(s) => (0..s.n_inputs())
                .map(|i| {
                    let xi: Vec<f64> = s.x.row(i).iter().copied().collect();
                    let r = s.records_of(i);
                    let ti = s.t.rows(r.start, r.len()).into_owned();
                    self.predict_mean_curve(&xi, &ti)
                })
                .collect(),
        }
    }

    pub fn evaluate(&self, data: &FunctionalDataset) -> Result<MetricReport> {
        metrics(&self.predict_observations(data)?, &data.observations())
    }
}

/// Fit `kind` with hyperparameters from `cfg` (missing keys take benchmark defaults).
pub fn fit_model(kind: ModelKind, cfg: &Config, data: &FunctionalDataset, s: &FitSettings) -> Result<FittedModel> {
    match kind {
        ModelKind::Krfd => match data {
            FunctionalDataset::Dense(d) => Ok(FittedModel::Krfd(KrfdModel::fit(d, &krfd_hyperparams(cfg, s)?)?)),
            FunctionalDataset::Sparse(_) => Err(Error::Unsupported(
                "krfd needs a dense grid shared by all inputs; use krsfd for ragged records".into(),
            )),
        },
        ModelKind::Krsfd => {
            let hp = krsfd_hyperparams(cfg, s, s.resolve_centers(data)?)?;
            Ok(FittedModel::Krsfd(KrsfdModel::fit(&data.as_sparse(), &hp)?))
        }
        ModelKind::Flm => {
            let centers = match data {
                FunctionalDataset::Dense(_) => s.centers.clone(),
                FunctionalDataset::Sparse(_) => Some(s.resolve_centers(data)?),
            };
            Ok(FittedModel::Flm(flm_fit(data, &flm_options(cfg, centers)?)?))
        }
        ModelKind::Krr => match data {
            FunctionalDataset::Dense(d) => {
                let params = krr_columns_from_config(cfg, d.n_points())?;
                Ok(FittedModel::Krr(krr_bank_fit_dense(d, &params)?))
            }
            FunctionalDataset::Sparse(_) => Err(Error::Unsupported(
                "per-point KRR needs every input measured at the same grid points; sparse records \
                 have no shared grid, use krsfd or flm instead"
                    .into(),
            )),
        },
    }
}

/// KRR configs are either one shared config or keys suffixed `_<column>` per grid point
/// (`alpha_0`, `gamma_0`, `kernel_x_0`, …).
pub fn krr_columns_from_config(cfg: &Config, l: usize) -> Result<Vec<KrrParams>> {
    if cfg.keys().all(|k| KRR_KEYS.contains(&k.as_str())) {
        return Ok(vec![krr_params(cfg)?]);
    }
    (0..l)
        .map(|j| {
            let suffix = format!("_{j}");
            let sub: Config = cfg
                .iter()
                .filter_map(|(k, v)| k.strip_suffix(&suffix).map(|b| (b.to_string(), v.clone())))
                .filter(|(k, _)| KRR_KEYS.contains(&k.as_str()))
                .collect();
            if sub.is_empty() {
                return input_err(format!("no KRR hyperparameters for column {j}"));
            }
            krr_params(&sub)
        })
        .collect()
}

/// Flatten per-column KRR params into a suffixed config.
pub fn krr_columns_to_config(cols: &[KrrParams]) -> Config {
    let mut cfg = Config::new();
    for (j, p) in cols.iter().enumerate() {
        let gamma = match p.kernel.kind {
            KernelKind::Gaussian => 1.0 / (2.0 * p.kernel.scale * p.kernel.scale),
            KernelKind::Laplacian => 1.0 / p.kernel.scale,
        };
        cfg.insert(format!("alpha_{j}"), ParamValue::Real(p.alpha));
        cfg.insert(format!("gamma_{j}"), ParamValue::Real(gamma));
        cfg.insert(format!("kernel_x_{j}"), ParamValue::Choice(p.kernel.kind.to_string()));
    }
    cfg
}

/// Cross-validated random search for one model family.
#[allow(clippy::too_many_arguments)]
pub fn random_search(
    kind: ModelKind,
    space: &SearchSpace,
    data: &FunctionalDataset,
    k: usize,
    n_trials: usize,
    seed: u64,
    objective: Objective,
    settings: &FitSettings,
) -> Result<SearchResult> {
    let folds = kfold(data.n_inputs(), k, seed)?;
    let mut settings = settings.clone();
    if kind == ModelKind::Krsfd || (kind == ModelKind::Flm && matches!(data, FunctionalDataset::Sparse(_))) {
        // Fix the center grid on the full training set so every fold shares it.
        settings.centers = Some(settings.resolve_centers(data)?);
    }
    if kind == ModelKind::Krsfd {
        settings.covariance = CovarianceMode::Skip;
    }
    let splits: Vec<(FunctionalDataset, FunctionalDataset)> =
        folds.iter().map(|(tr, va)| (data.subset(tr), data.subset(va))).collect();
    random_search_with(space, &folds, n_trials, seed.wrapping_add(1), objective, |cfg, fold| {
        let pos = folds.iter().position(|f| std::ptr::eq(f, fold)).expect("fold from list");
        let (train, val) = &splits[pos];
        let model = fit_model(kind, cfg, train, &settings)?;
        Ok(objective.of(&model.evaluate(val)?))
    })
}

/// Per-column result of [`tune_krr_columns`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KrrColumnSearch {
    /// Best trial per grid column.
    pub best_trial: Vec<usize>,
    pub best_score: Vec<f64>,
    pub params: Vec<KrrParams>,
    /// Per trial: config and per-column mean validation score (NaN when failed).
    pub trials: Vec<(Config, Vec<f64>)>,
}

/// Independent search per grid column with a shared configuration stream.
///
/// Every trial configuration is scored on all columns at once (one factorization per trial
/// and fold), and each column keeps its own best trial.
pub fn tune_krr_columns(
    data: &DenseFunctionalDataset,
    space: &SearchSpace,
    k: usize,
    n_trials: usize,
    seed: u64,
    objective: Objective,
) -> Result<KrrColumnSearch> {
    if n_trials == 0 {
        return input_err("n_trials must be at least 1");
    }
    space.validate()?;
    let l = data.n_points();
    let folds = kfold(data.n_inputs(), k, seed)?;
    let splits: Vec<_> = folds.iter().map(|(tr, va)| (data.subset(tr), data.subset(va))).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(1));
    let mut trials = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let cfg = space.sample(&mut rng);
        let scores = krr_trial(&cfg, &splits, objective).unwrap_or_else(|e| {
            log::debug!("KRR trial failed: {e}");
            vec![f64::NAN; l]
        });
        trials.push((cfg, scores));
    }
    let mut best_trial = vec![usize::MAX; l];
    let mut best_score = vec![f64::NAN; l];
    for (t, (_, scores)) in trials.iter().enumerate() {
        for j in 0..l {
            if best_trial[j] == usize::MAX && !scores[j].is_nan() || objective.better(scores[j], best_score[j]) {
                best_trial[j] = t;
                best_score[j] = scores[j];
            }
        }
    }
    if best_trial.contains(&usize::MAX) {
        return Err(Error::SearchFailed(
            trials
                .iter()
                .enumerate()
                .map(|(i, (c, _))| TrialRecord {
                    index: i,
                    config: c.clone(),
                    fold_scores: vec![],
                    mean: None,
                    error: Some("failed on every column".into()),
                })
                .collect(),
        ));
    }
    let params = best_trial.iter().map(|&t| krr_params(&trials[t].0)).collect::<Result<_>>()?;
    Ok(KrrColumnSearch { best_trial, best_score, params, trials })
}

fn krr_trial(
    cfg: &Config,
    splits: &[(DenseFunctionalDataset, DenseFunctionalDataset)],
    objective: Objective,
) -> Result<Vec<f64>> {
    let p = krr_params(cfg)?;
    let l = splits[0].0.n_points();
    let mut sums = vec![0.0; l];
    for (train, val) in splits {
        let mut g = gram_square(&p.kernel, &train.x)?.values;
        for i in 0..g.nrows() {
            g[(i, i)] += p.alpha;
        }
        let coef = SymFactor::new(&g)?.solve(&train.y);
        let kv = crate::kernel::gram(&p.kernel, &val.x, &train.x)?.values;
        let pred = kv * coef;
        for j in 0..l {
            let pc: Vec<Vec<f64>> = (0..val.n_inputs()).map(|i| vec![pred[(i, j)]]).collect();
            let oc: Vec<Vec<f64>> = (0..val.n_inputs()).map(|i| vec![val.y[(i, j)]]).collect();
            let s = objective.of(&metrics(&pc, &oc)?);
            sums[j] += s;
        }
    }
    Ok(sums.into_iter().map(|s| s / splits.len() as f64).collect())
}
