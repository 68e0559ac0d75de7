//! Command-line front end.
//!
//! Every command reads its settings from an optional TOML run config, then applies
//! `--set section.key=value` overrides, then explicit flags. Unknown config keys are rejected.
//! All outputs are written under `--out` (default `out`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::FunctionalDataset;
use crate::datagen::{self, CoefficientRanges, DenseSpec, SparseSpec};
use crate::error::{input_err, Error, Result};
use crate::eval::{
    fit_model, krr_columns_to_config, metrics, random_search, tune_krr_columns, Config, Domain,
    FitSettings, FittedModel, MetricReport, ModelKind, Objective, ParamValue, SearchSpace,
};
use crate::io;
use crate::kernel::KernelKind;
use crate::krsfd::CovarianceMode;
use crate::linalg::{CgOptions, CgReport};

#[derive(Debug, Parser)]
#[command(name = "krfd", version, about = "Kernel regression for functional data")]
pub struct Cli {
    /// Seed for data generation, splits, folds, search and sampling [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML run config
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory [default: out]
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Config override, e.g. `--set fit.covariance=skip` (repeatable)
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic benchmark dataset
    Datagen(DatagenArgs),
    /// Cross-validated random hyperparameter search
    Tune(TuneArgs),
    /// Fit a model and write it with a fit report
    Fit(FitArgs),
    /// Predictive mean and standard deviation on a query grid
    Predict(PredictArgs),
    /// Posterior draws of the latent curve on a query grid
    Sample(SampleArgs),
    /// Metrics of a model or a predictions file against a dataset
    Evaluate(EvaluateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    Dense,
    Sparse,
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    #[arg(value_enum)]
    pub kind: DataKind,
    /// Number of inputs
    #[arg(long)]
    pub n: Option<usize>,
    /// Grid points (dense)
    #[arg(long)]
    pub l: Option<usize>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
    #[arg(long)]
    pub t_lo: Option<f64>,
    #[arg(long)]
    pub t_hi: Option<f64>,
    /// Fewest records per input (sparse)
    #[arg(long)]
    pub min_records: Option<usize>,
    /// Most records per input (sparse)
    #[arg(long)]
    pub max_records: Option<usize>,
    /// Points of the evaluation grid for sparse truth curves
    #[arg(long)]
    pub eval_points: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DataSelection {
    /// Dataset directory (X.csv with t.csv/Y.csv, or with records.csv)
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Split inputs with this training fraction; tune/fit use the training part, evaluate the rest
    #[arg(long)]
    pub train_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    /// krfd, krsfd, flm or krr
    #[arg(long)]
    pub model: Option<String>,
    #[command(flatten)]
    pub data: DataSelection,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// rmse, mae, r2 or mean_r
    #[arg(long)]
    pub objective: Option<String>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub model: Option<String>,
    #[command(flatten)]
    pub data: DataSelection,
    /// TOML file whose [hyperparams] table (and `model`) override the run config, e.g. best.toml
    #[arg(long, value_name = "FILE")]
    pub params: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Model file written by `fit`
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Query inputs, one per row
    #[arg(long, value_name = "FILE")]
    pub x: PathBuf,
    /// Query grid
    #[arg(long, value_name = "FILE")]
    pub t: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub x: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub t: PathBuf,
    #[arg(long)]
    pub n_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataSelection,
    /// Model file to predict with
    #[arg(long, value_name = "FILE", conflicts_with = "predictions", required_unless_present = "predictions")]
    pub model: Option<PathBuf>,
    /// predictions.csv aligned with the dataset's observations
    #[arg(long, value_name = "FILE")]
    pub predictions: Option<PathBuf>,
    /// Histogram bins over [-1, 1] for per-curve R
    #[arg(long)]
    pub bins: Option<usize>,
}

/// Settings file layout. Every field has a default; unknown keys are errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub model: Option<String>,
    pub datagen: DatagenConfig,
    pub split: SplitConfig,
    pub fit: FitConfig,
    pub tune: TuneConfig,
    pub sample: SampleConfig,
    pub evaluate: EvaluateConfig,
    /// Model hyperparameters by name (see `eval::KRFD_KEYS` and friends). Missing keys take
    /// the benchmark defaults.
    pub hyperparams: Config,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenConfig {
    /// 1000
    pub n_inputs: usize,
    /// 51
    pub n_points: usize,
    /// 0
    pub t_lo: f64,
    /// 2
    pub t_hi: f64,
    /// 0.2
    pub noise_sd: f64,
    /// 2
    pub min_records: usize,
    /// 20
    pub max_records: usize,
    /// 101
    pub eval_points: usize,
    pub coefficients: CoefficientRanges,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        let d = DenseSpec::default();
        let s = SparseSpec::default();
        Self {
            n_inputs: d.n_inputs,
            n_points: d.n_points,
            t_lo: d.t_lo,
            t_hi: d.t_hi,
            noise_sd: d.noise_sd,
            min_records: s.min_records,
            max_records: s.max_records,
            eval_points: 101,
            coefficients: d.coefficients,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// No split when absent.
    pub train_fraction: Option<f64>,
    /// Defaults to the run seed. Fixing it lets tuning on one split be reused on others.
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    /// Noise prior shape, 1e-3
    pub alpha: f64,
    /// Noise prior scale, 1e-3
    pub beta: f64,
    /// Mean-offset term of krfd, true
    pub include_mu: bool,
    /// Evenly spaced centers for krsfd and sparse flm, 30
    pub n_centers: usize,
    /// Explicit 1-D centers; overrides `n_centers`
    pub centers: Option<Vec<f64>>,
    /// auto, exact, ilu or skip
    pub covariance: String,
    /// Largest parameter count solved with dense normal equations, 4000
    pub dense_threshold: usize,
    /// CG stopping level on the mean squared residual, 1e-3
    pub cg_tol_mse: f64,
    /// 500
    pub cg_max_iters: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        let s = FitSettings::default();
        Self {
            alpha: s.alpha,
            beta: s.beta,
            include_mu: s.include_mu,
            n_centers: s.n_centers,
            centers: None,
            covariance: "auto".into(),
            dense_threshold: s.dense_threshold,
            cg_tol_mse: s.cg.tol_mse,
            cg_max_iters: s.cg.max_iters,
        }
    }
}

impl FitConfig {
    pub fn settings(&self) -> Result<FitSettings> {
        Ok(FitSettings {
            centers: self.centers.as_ref().map(|c| DMatrix::from_column_slice(c.len(), 1, c)),
            n_centers: self.n_centers,
            alpha: self.alpha,
            beta: self.beta,
            include_mu: self.include_mu,
            covariance: self.covariance.parse::<CovarianceMode>()?,
            dense_threshold: self.dense_threshold,
            cg: CgOptions { tol_mse: self.cg_tol_mse, max_iters: self.cg_max_iters },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneConfig {
    /// 300, or 30 for krr
    pub trials: Option<usize>,
    /// 5
    pub folds: usize,
    /// rmse
    pub objective: String,
    /// Domains added to or replacing the default space, e.g.
    /// `[tune.space.lambda_g]` with `type = "log_uniform"`, `lo`, `hi`.
    pub space: BTreeMap<String, Domain>,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self { trials: None, folds: 5, objective: "rmse".into(), space: BTreeMap::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    /// 300
    pub n_samples: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { n_samples: 300 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    /// 20
    pub bins: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self { bins: 20 }
    }
}

impl RunConfig {
    /// Parse TOML text and apply `section.key=value` overrides.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Input(format!("config: {}", e.message())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Input(format!("config: {}", e.message())))
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p)
                .map_err(|e| Error::Input(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }
}

fn apply_override(table: &mut toml::Table, o: &str) -> Result<()> {
    let Some((path, raw)) = o.split_once('=') else {
        return input_err(format!("override '{o}' is not of the form key=value"));
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return input_err(format!("override '{o}' has an empty key"));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return input_err(format!("override '{o}': '{k}' is not a table")),
        };
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Process exit code for an error: 2 usage/input, 3 data format or I/O, 4 numerical.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Input(_) | Error::Unsupported(_) | Error::Capacity(_) => 2,
        Error::Format(_) | Error::Io(_) => 3,
        Error::Singular(_)
        | Error::Numerical(_)
        | Error::CgBreakdown(_)
        | Error::ZeroPivot { .. }
        | Error::SearchFailed(_) => 4,
    }
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out)?;
    let ctx = Ctx { cfg, seed, out };
    match cli.command {
        Command::Datagen(a) => cmd_datagen(&ctx, a),
        Command::Tune(a) => cmd_tune(&ctx, a),
        Command::Fit(a) => cmd_fit(&ctx, a),
        Command::Predict(a) => cmd_predict(&ctx, a),
        Command::Sample(a) => cmd_sample(&ctx, a),
        Command::Evaluate(a) => cmd_evaluate(&ctx, a),
    }
}

#[derive(Serialize)]
struct Manifest<'a, S: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    spec: S,
    files: Vec<&'a str>,
}

fn write_manifest<S: Serialize>(ctx: &Ctx, command: &str, spec: S, files: Vec<&str>) -> Result<()> {
    io::write_json(
        &ctx.file("manifest.json"),
        &Manifest { tool: "krfd", version: env!("CARGO_PKG_VERSION"), command, seed: ctx.seed, spec, files },
    )
}

fn cmd_datagen(ctx: &Ctx, a: DatagenArgs) -> Result<()> {
    let d = &ctx.cfg.datagen;
    let n = a.n.unwrap_or(d.n_inputs);
    let t_lo = a.t_lo.unwrap_or(d.t_lo);
    let t_hi = a.t_hi.unwrap_or(d.t_hi);
    let noise_sd = a.noise_sd.unwrap_or(d.noise_sd);
    match a.kind {
        DataKind::Dense => {
            let spec = DenseSpec {
                n_inputs: n,
                n_points: a.l.unwrap_or(d.n_points),
                t_lo,
                t_hi,
                noise_sd,
                coefficients: d.coefficients,
                seed: ctx.seed,
            };
            let b = datagen::gen_dense(&spec)?;
            io::write_dense_dataset(&ctx.out, &b.data)?;
            io::write_matrix(&ctx.file("truth_Y.csv"), &io::indexed_header("y", spec.n_points), &b.truth)?;
            write_manifest(ctx, "datagen dense", spec, vec!["X.csv", "t.csv", "Y.csv", "truth_Y.csv"])
        }
        DataKind::Sparse => {
            let spec = SparseSpec {
                n_inputs: n,
                min_records: a.min_records.unwrap_or(d.min_records),
                max_records: a.max_records.unwrap_or(d.max_records),
                t_lo,
                t_hi,
                noise_sd,
                coefficients: d.coefficients,
                seed: ctx.seed,
            };
            let b = datagen::gen_sparse(&spec)?;
            io::write_sparse_dataset(&ctx.out, &b.data)?;
            let k = a.eval_points.unwrap_or(d.eval_points);
            if k < 2 {
                return input_err("eval_points must be at least 2");
            }
            let grid = datagen::linspace(k, t_lo, t_hi);
            write_long(&ctx.file("truth_curves.csv"), &grid, &[("y", &b.truth_on(&grid))])?;
            #[derive(Serialize)]
            struct SparseManifestSpec {
                #[serde(flatten)]
                spec: SparseSpec,
                eval_points: usize,
                n_records: usize,
            }
            let ms = SparseManifestSpec { spec, eval_points: k, n_records: b.data.n_records() };
            write_manifest(ctx, "datagen sparse", ms, vec!["X.csv", "records.csv", "truth_curves.csv"])
        }
    }
}

/// Long CSV: `input_id, t_0.., <name>..` with one row per (input, grid point). Each value
/// matrix is inputs × grid points.
fn write_long(path: &Path, grid: &DMatrix<f64>, values: &[(&str, &DMatrix<f64>)]) -> Result<()> {
    let mut header = vec!["input_id".to_string()];
    header.extend(io::indexed_header("t", grid.ncols()));
    header.extend(values.iter().map(|(n, _)| n.to_string()));
    let n = values.first().map_or(0, |(_, m)| m.nrows());
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    for i in 0..n {
        for k in 0..grid.nrows() {
            let mut rec = vec![i.to_string()];
            rec.extend(grid.row(k).iter().map(|v| v.to_string()));
            rec.extend(values.iter().map(|(_, m)| fmt_opt(m[(i, k)])));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// NaN marks a missing value and is written as an empty field.
fn fmt_opt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

fn resolve_kind(flag: Option<&str>, cfg: &RunConfig) -> Result<ModelKind> {
    match flag.or(cfg.model.as_deref()) {
        Some(s) => s.parse(),
        None => input_err("no model kind given (use --model or `model` in the config)"),
    }
}

/// The dataset, or its training or test part when a split is configured.
fn load_data(ctx: &Ctx, sel: &DataSelection, test_part: bool) -> Result<FunctionalDataset> {
    let data = io::read_dataset_dir(&sel.data)?;
    match sel.train_fraction.or(ctx.cfg.split.train_fraction) {
        None => Ok(data),
        Some(f) => {
            let seed = ctx.cfg.split.seed.unwrap_or(ctx.seed);
            let (train, test) = datagen::split_indices(data.n_inputs(), f, seed)?;
            Ok(data.subset(if test_part { &test } else { &train }))
        }
    }
}

fn cmd_tune(ctx: &Ctx, a: TuneArgs) -> Result<()> {
    let kind = resolve_kind(a.model.as_deref(), &ctx.cfg)?;
    let data = load_data(ctx, &a.data, false)?;
    let tc = &ctx.cfg.tune;
    let n_trials = a.trials.or(tc.trials).unwrap_or(if kind == ModelKind::Krr { 30 } else { 300 });
    let k = a.folds.unwrap_or(tc.folds);
    let objective: Objective = a.objective.as_deref().unwrap_or(&tc.objective).parse()?;
    let mut space = SearchSpace::default_for(kind);
    for (name, dom) in &tc.space {
        space = space.with(name, dom.clone());
    }
    let settings = ctx.cfg.fit.settings()?;

    #[derive(Serialize)]
    struct Summary<S: Serialize> {
        model: String,
        objective: Objective,
        n_trials: usize,
        folds: usize,
        n_inputs: usize,
        #[serde(flatten)]
        best: S,
    }

    let best_cfg = if kind == ModelKind::Krr {
        let FunctionalDataset::Dense(d) = &data else {
            return Err(Error::Unsupported(
                "per-point KRR needs every input measured on one shared grid; use krsfd or flm for sparse records".into(),
            ));
        };
        let res = tune_krr_columns(d, &space, k, n_trials, ctx.seed, objective)?;
        #[derive(Serialize)]
        struct KrrTrialLine<'a> {
            index: usize,
            config: &'a Config,
            column_scores: Vec<Option<f64>>,
        }
        let lines: Vec<String> = res
            .trials
            .iter()
            .enumerate()
            .map(|(index, (config, s))| {
                let column_scores = s.iter().map(|v| (!v.is_nan()).then_some(*v)).collect();
                serde_json::to_string(&KrrTrialLine { index, config, column_scores })
            })
            .collect::<std::result::Result<_, _>>()?;
        write_lines(&ctx.file("trials.jsonl"), &lines)?;
        #[derive(Serialize)]
        struct KrrBest<'a> {
            best_trial: &'a [usize],
            best_score: &'a [f64],
        }
        io::write_json(
            &ctx.file("tune_summary.json"),
            &Summary {
                model: kind.to_string(),
                objective,
                n_trials,
                folds: k,
                n_inputs: data.n_inputs(),
                best: KrrBest { best_trial: &res.best_trial, best_score: &res.best_score },
            },
        )?;
        krr_columns_to_config(&res.params)
    } else {
        let res = random_search(kind, &space, &data, k, n_trials, ctx.seed, objective, &settings)?;
        let lines: Vec<String> =
            res.trials.iter().map(serde_json::to_string).collect::<std::result::Result<_, _>>()?;
        write_lines(&ctx.file("trials.jsonl"), &lines)?;
        #[derive(Serialize)]
        struct Best {
            best_index: usize,
            best_score: f64,
        }
        io::write_json(
            &ctx.file("tune_summary.json"),
            &Summary {
                model: kind.to_string(),
                objective,
                n_trials,
                folds: k,
                n_inputs: data.n_inputs(),
                best: Best { best_index: res.best_index, best_score: res.best_score },
            },
        )?;
        res.best_config
    };
    write_best_toml(&ctx.file("best.toml"), kind, &best_cfg)?;
    write_manifest(ctx, "tune", &ctx.cfg, vec!["trials.jsonl", "tune_summary.json", "best.toml"])
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut s = String::new();
    for l in lines {
        s.push_str(l);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// A run config holding just the model kind and hyperparameters, usable as `--config` or `--params`.
fn write_best_toml(path: &Path, kind: ModelKind, cfg: &Config) -> Result<()> {
    let mut hp = toml::Table::new();
    for (k, v) in cfg {
        let v = match v {
            ParamValue::Real(x) => toml::Value::Float(*x),
            ParamValue::Choice(s) => toml::Value::String(s.clone()),
        };
        hp.insert(k.clone(), v);
    }
    let mut root = toml::Table::new();
    root.insert("model".into(), toml::Value::String(kind.to_string()));
    root.insert("hyperparams".into(), toml::Value::Table(hp));
    let text = toml::to_string(&root).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct ParamsFile {
    model: Option<String>,
    hyperparams: Config,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricSummary {
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
    pub mean_r: f64,
    pub n_points: usize,
    pub n_curves_skipped: usize,
}

impl From<&MetricReport> for MetricSummary {
    fn from(m: &MetricReport) -> Self {
        Self {
            mae: m.mae,
            rmse: m.rmse,
            r2: m.r2,
            mean_r: m.mean_r,
            n_points: m.n_points,
            n_curves_skipped: m.n_curves_skipped,
        }
    }
}

#[derive(Serialize)]
struct Sparsity {
    zero_fraction_g: f64,
    zero_fraction_t: f64,
    zero_fraction_h: f64,
    nnz_h: usize,
}

#[derive(Serialize)]
struct FitReport {
    model: String,
    n_inputs: usize,
    n_observations: usize,
    hyperparams: Config,
    sigma2_map: Option<f64>,
    /// Sum of squared residuals of the mean prediction at every training observation.
    training_sse: f64,
    training_metrics: MetricSummary,
    cg: Option<CgReport>,
    sparsity: Option<Sparsity>,
    variance_mode: Option<String>,
}

/// Hyperparameters actually used, defaults included.
pub fn effective_config(m: &FittedModel) -> Config {
    fn real(c: &mut Config, k: &str, v: f64) {
        c.insert(k.into(), ParamValue::Real(v));
    }
    fn kind(c: &mut Config, k: &str, v: KernelKind) {
        c.insert(k.into(), ParamValue::Choice(v.to_string()));
    }
    let mut c = Config::new();
    match m {
        FittedModel::Krfd(m) => {
            let h = m.hyperparams();
            real(&mut c, "lambda_g", h.lambda_g);
            real(&mut c, "lambda_t", h.lambda_t);
            real(&mut c, "lambda_m", h.lambda_m);
            real(&mut c, "sigma_g", h.kernel_g.scale);
            real(&mut c, "sigma_t", h.kernel_t.scale);
            real(&mut c, "sigma_m", h.kernel_m.scale);
            kind(&mut c, "kernel_x", h.kernel_g.kind);
            kind(&mut c, "kernel_t", h.kernel_t.kind);
        }
        FittedModel::Krsfd(m) => {
            let h = m.hyperparams();
            real(&mut c, "lambda", h.lambda);
            real(&mut c, "sigma_g", h.kernel_g.scale);
            real(&mut c, "sigma_t", h.kernel_t.scale);
            real(&mut c, "z_g", h.z_g);
            kind(&mut c, "kernel_x", h.kernel_g.kind);
            kind(&mut c, "kernel_t", h.kernel_t.kind);
        }
        FittedModel::Flm(m) => {
            real(&mut c, "lambda", m.lambda);
            real(&mut c, "sigma", m.kernel_t.scale);
            kind(&mut c, "kernel_t", m.kernel_t.kind);
        }
        FittedModel::Krr(m) => {
            let params: Vec<_> = m.columns.iter().map(|col| col.params).collect();
            c = krr_columns_to_config(&params);
        }
    }
    c
}

fn sse(pred: &[Vec<f64>], obs: &[Vec<f64>]) -> f64 {
    pred.iter().flatten().zip(obs.iter().flatten()).map(|(p, o)| (p - o) * (p - o)).sum()
}

fn cmd_fit(ctx: &Ctx, a: FitArgs) -> Result<()> {
    let mut hyper = ctx.cfg.hyperparams.clone();
    let mut model_name = ctx.cfg.model.clone();
    if let Some(p) = &a.params {
        let text = fs::read_to_string(p)
            .map_err(|e| Error::Input(format!("cannot read params {}: {e}", p.display())))?;
        let pf: ParamsFile =
            toml::from_str(&text).map_err(|e| Error::Input(format!("params: {}", e.message())))?;
        hyper.extend(pf.hyperparams);
        model_name = pf.model.or(model_name);
    }
    let kind = match a.model.as_deref().or(model_name.as_deref()) {
        Some(s) => s.parse()?,
        None => return input_err("no model kind given (use --model or `model` in the config)"),
    };
    let data = load_data(ctx, &a.data, false)?;
    let settings = ctx.cfg.fit.settings()?;

    let start = Instant::now();
    let model = fit_model(kind, &hyper, &data, &settings)?;
    eprintln!("fit {kind}: {:.3} s", start.elapsed().as_secs_f64());

    let grid = match &data {
        FunctionalDataset::Dense(d) => Some(d.t.clone()),
        FunctionalDataset::Sparse(_) => None,
    };
    io::save_model(&ctx.file("model.json"), &model, grid.as_ref())?;

    let obs = data.observations();
    let pred = model.predict_observations(&data)?;
    let report = FitReport {
        model: kind.to_string(),
        n_inputs: data.n_inputs(),
        n_observations: data.n_observations(),
        hyperparams: effective_config(&model),
        sigma2_map: match &model {
            FittedModel::Krfd(m) => Some(m.sigma2()),
            FittedModel::Krsfd(m) => Some(m.sigma2()),
            _ => None,
        },
        training_sse: sse(&pred, &obs),
        training_metrics: (&metrics(&pred, &obs)?).into(),
        cg: match &model {
            FittedModel::Krsfd(m) => Some(*m.cg_report()),
            _ => None,
        },
        sparsity: match &model {
            FittedModel::Krsfd(m) => {
                let d = m.design();
                Some(Sparsity {
                    zero_fraction_g: d.g.zero_fraction,
                    zero_fraction_t: d.t.zero_fraction,
                    zero_fraction_h: d.zero_fraction(),
                    nnz_h: d.nnz(),
                })
            }
            _ => None,
        },
        variance_mode: match &model {
            FittedModel::Krfd(_) => Some("exact".into()),
            FittedModel::Krsfd(m) => m.variance_mode().map(|v| format!("{v:?}").to_lowercase()),
            _ => None,
        },
    };
    io::write_json(&ctx.file("fit_report.json"), &report)?;
    write_manifest(ctx, "fit", &ctx.cfg, vec!["model.json", "fit_report.json"])
}

fn read_queries(x: &Path, t: &Path) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (_, xm) = io::read_matrix(x)?;
    let (_, tm) = io::read_matrix(t)?;
    if tm.nrows() == 0 || tm.ncols() == 0 {
        return Err(Error::Format(format!("{}: empty query grid", t.display())));
    }
    Ok((xm, tm))
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

fn cmd_predict(ctx: &Ctx, a: PredictArgs) -> Result<()> {
    let (model, _) = io::load_model(&a.model)?;
    let (x, t) = read_queries(&a.x, &a.t)?;
    let n = x.nrows();
    let mut mean = DMatrix::from_element(n, t.nrows(), f64::NAN);
    let mut std = mean.clone();
    for i in 0..n {
        let xi = row(&x, i);
        let dist = match &model {
            FittedModel::Krfd(m) => Some(m.predict_curve(&xi, &t)?),
            FittedModel::Krsfd(m) if m.variance_mode().is_some() => Some(m.predict_curve(&xi, &t)?),
            _ => None,
        };
        match dist {
            Some(d) => {
                for (k, p) in d.iter().enumerate() {
                    mean[(i, k)] = p.mean;
                    std[(i, k)] = p.std();
                }
            }
            None => {
                for (k, v) in model.predict_mean_curve(&xi, &t)?.into_iter().enumerate() {
                    mean[(i, k)] = v;
                }
            }
        }
    }
    write_long(&ctx.file("predictions.csv"), &t, &[("mean", &mean), ("std", &std)])
}

fn cmd_sample(ctx: &Ctx, a: SampleArgs) -> Result<()> {
    let (model, _) = io::load_model(&a.model)?;
    let (x, t) = read_queries(&a.x, &a.t)?;
    let n_samples = a.n_samples.unwrap_or(ctx.cfg.sample.n_samples);
    let mut header = vec!["input_id".to_string()];
    header.extend(io::indexed_header("t", t.ncols()));
    header.extend(io::indexed_header("s", n_samples));
    let mut w = csv::Writer::from_path(ctx.file("samples.csv"))?;
    w.write_record(&header)?;
    for i in 0..x.nrows() {
        let xi = row(&x, i);
        // One stream per query input so results do not depend on how many inputs are queried.
        let seed = ctx.seed.wrapping_add(i as u64);
        let draws = match &model {
            FittedModel::Krfd(m) => m.sample_functions(&xi, &t, n_samples, seed)?,
            FittedModel::Krsfd(m) => m.sample_functions(&xi, &t, n_samples, seed)?,
            other => {
                return Err(Error::Unsupported(format!(
                    "{} has no parameter posterior to sample from",
                    other.kind()
                )))
            }
        };
        for k in 0..t.nrows() {
            let mut rec = vec![i.to_string()];
            rec.extend(t.row(k).iter().map(|v| v.to_string()));
            rec.extend(draws.column(k).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Predictions file grouped by `input_id`, in file order.
fn read_prediction_groups(path: &Path, n_inputs: usize) -> Result<Vec<Vec<f64>>> {
    let (header, m) = io::read_matrix(path).or_else(|_| read_with_blanks(path))?;
    if header.first().map(String::as_str) != Some("input_id") {
        return Err(Error::Format(format!("{}: first column must be input_id", path.display())));
    }
    let Some(mean_col) = header.iter().position(|h| h == "mean") else {
        return Err(Error::Format(format!("{}: no 'mean' column", path.display())));
    };
    let mut groups = vec![Vec::new(); n_inputs];
    for r in 0..m.nrows() {
        let id = m[(r, 0)];
        if id < 0.0 || id.fract() != 0.0 || id as usize >= n_inputs {
            return Err(Error::Format(format!("{}: row {} has input_id {id} outside 0..{n_inputs}", path.display(), r + 1)));
        }
        groups[id as usize].push(m[(r, mean_col)]);
    }
    Ok(groups)
}

/// Like `io::read_matrix` but empty fields (missing std) read as NaN.
fn read_with_blanks(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        for f in rec.iter() {
            let f = f.trim();
            data.push(if f.is_empty() {
                f64::NAN
            } else {
                f.parse().map_err(|_| Error::Format(format!("{}: '{f}' is not a number", path.display())))?
            });
        }
        rows += 1;
    }
    Ok((header.clone(), DMatrix::from_row_slice(rows, header.len(), &data)))
}

fn cmd_evaluate(ctx: &Ctx, a: EvaluateArgs) -> Result<()> {
    let data = load_data(ctx, &a.data, true)?;
    let obs = data.observations();
    let pred = match (&a.model, &a.predictions) {
        (Some(m), _) => io::load_model(m)?.0.predict_observations(&data)?,
        (None, Some(p)) => {
            let g = read_prediction_groups(p, obs.len())?;
            for (i, (pg, og)) in g.iter().zip(&obs).enumerate() {
                if pg.len() != og.len() {
                    return Err(Error::Format(format!(
                        "input {i}: {} predictions for {} observations",
                        pg.len(),
                        og.len()
                    )));
                }
            }
            g
        }
        (None, None) => return input_err("evaluate needs --model or --predictions"),
    };
    let report = metrics(&pred, &obs)?;
    io::write_json(&ctx.file("metrics.json"), &MetricSummary::from(&report))?;

    let mut w = csv::Writer::from_path(ctx.file("per_curve_r.csv"))?;
    w.write_record(["input_id", "r"])?;
    for (i, r) in report.per_curve_r.iter().enumerate() {
        w.write_record([i.to_string(), r.map(|v| v.to_string()).unwrap_or_default()])?;
    }
    w.flush()?;

    let bins = a.bins.unwrap_or(ctx.cfg.evaluate.bins);
    let counts = r_histogram(&report.per_curve_r, bins)?;
    let mut w = csv::Writer::from_path(ctx.file("r_histogram.csv"))?;
    w.write_record(["bin_lo", "bin_hi", "count"])?;
    let edge = |b: usize| (2.0 * b as f64 - bins as f64) / bins as f64;
    for (b, c) in counts.iter().enumerate() {
        let (lo, hi) = (edge(b), edge(b + 1));
        w.write_record([lo.to_string(), hi.to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Counts of per-curve R over `bins` equal bins of [-1, 1]; R = 1 falls in the last bin.
pub fn r_histogram(rs: &[Option<f64>], bins: usize) -> Result<Vec<usize>> {
    if bins == 0 {
        return input_err("bins must be at least 1");
    }
    let mut counts = vec![0; bins];
    for r in rs.iter().flatten() {
        let b = (((r + 1.0) / 2.0) * bins as f64).floor();
        counts[(b.max(0.0) as usize).min(bins - 1)] += 1;
    }
    Ok(counts)
}
