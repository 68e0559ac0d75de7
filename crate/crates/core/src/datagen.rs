//! Seeded synthetic benchmarks: noisy `a sin(bt + c) + dt + e` curves.
//!
//! Random streams (ChaCha20, one seed, separate stream ids):
//! - stream 0: curve coefficients, one `(a, b, c, d, e)` tuple per input in order;
//! - stream 1: observation noise, in output order;
//! - stream 2: sparse record counts and locations, per input.
//!
//! Dense and sparse generation from the same seed therefore share the covariates.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{DenseFunctionalDataset, FunctionalDataset, SparseFunctionalDataset};
use crate::error::{input_err, Result};

const STREAM_COEF: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_RECORDS: u64 = 2;

/// Closed interval; `lo == hi` pins the value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) {
            return input_err(format!("range {name} = [{}, {}] is invalid", self.lo, self.hi));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha20Rng) -> f64 {
        let u: f64 = rng.random();
        if self.lo == self.hi {
            self.lo
        } else {
            self.lo + (self.hi - self.lo) * u
        }
    }
}

/// Coefficients of one curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineLineParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
}

impl SineLineParams {
    pub fn value(&self, t: f64) -> f64 {
        self.a * (self.b * t + self.c).sin() + self.d * t + self.e
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.a, self.b, self.c, self.d, self.e]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientRanges {
    pub a: Range,
    pub b: Range,
    pub c: Range,
    pub d: Range,
    pub e: Range,
}

impl Default for CoefficientRanges {
    fn default() -> Self {
        Self {
            a: Range::new(1.0, 5.0),
            b: Range::new(1.0, 5.0),
            c: Range::new(0.0, 3.0),
            d: Range::new(-2.0, 2.0),
            e: Range::new(-3.0, 3.0),
        }
    }
}

impl CoefficientRanges {
    fn validate(&self) -> Result<()> {
        for (n, r) in [("a", self.a), ("b", self.b), ("c", self.c), ("d", self.d), ("e", self.e)] {
            r.validate(n)?;
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha20Rng) -> SineLineParams {
        SineLineParams {
            a: self.a.sample(rng),
            b: self.b.sample(rng),
            c: self.c.sample(rng),
            d: self.d.sample(rng),
            e: self.e.sample(rng),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseSpec {
    pub n_inputs: usize,
    pub n_points: usize,
    pub t_lo: f64,
    pub t_hi: f64,
    pub noise_sd: f64,
    pub coefficients: CoefficientRanges,
    pub seed: u64,
}

impl Default for DenseSpec {
    fn default() -> Self {
        Self {
            n_inputs: 1000,
            n_points: 51,
            t_lo: 0.0,
            t_hi: 2.0,
            noise_sd: 0.2,
            coefficients: CoefficientRanges::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparseSpec {
    pub n_inputs: usize,
    /// Records per input are uniform on `min_records..=max_records`.
    pub min_records: usize,
    pub max_records: usize,
    pub t_lo: f64,
    pub t_hi: f64,
    pub noise_sd: f64,
    pub coefficients: CoefficientRanges,
    pub seed: u64,
}

impl Default for SparseSpec {
    fn default() -> Self {
        Self {
            n_inputs: 1000,
            min_records: 2,
            max_records: 20,
            t_lo: 0.0,
            t_hi: 2.0,
            noise_sd: 0.2,
            coefficients: CoefficientRanges::default(),
            seed: 0,
        }
    }
}

fn check_common(n: usize, t_lo: f64, t_hi: f64, noise_sd: f64, coef: &CoefficientRanges) -> Result<()> {
    if n == 0 {
        return input_err("n_inputs must be at least 1");
    }
    if !(t_lo.is_finite() && t_hi.is_finite() && t_lo < t_hi) {
        return input_err(format!("t range [{t_lo}, {t_hi}] is invalid"));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return input_err(format!("noise_sd must be >= 0, got {noise_sd}"));
    }
    coef.validate()
}

fn rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn draw_params(n: usize, coef: &CoefficientRanges, seed: u64) -> Vec<SineLineParams> {
    let mut r = rng(seed, STREAM_COEF);
    (0..n).map(|_| coef.sample(&mut r)).collect()
}

fn params_matrix(params: &[SineLineParams]) -> DMatrix<f64> {
    DMatrix::from_fn(params.len(), 5, |i, j| params[i].as_array()[j])
}

/// Evenly spaced `l × 1` grid on `[lo, hi]` including both ends.
pub fn linspace(l: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    crate::krsfd::even_grid(l, lo, hi)
}

#[derive(Clone, Debug)]
pub struct DenseBenchmark {
    pub data: DenseFunctionalDataset,
    /// Noiseless values, N × L.
    pub truth: DMatrix<f64>,
    /// Noise draws, N × L; `data.y = truth + noise`.
    pub noise: DMatrix<f64>,
    pub params: Vec<SineLineParams>,
}

pub fn gen_dense(spec: &DenseSpec) -> Result<DenseBenchmark> {
    check_common(spec.n_inputs, spec.t_lo, spec.t_hi, spec.noise_sd, &spec.coefficients)?;
    if spec.n_points < 2 {
        return input_err("dense grids need at least 2 points");
    }
    let (n, l) = (spec.n_inputs, spec.n_points);
    let params = draw_params(n, &spec.coefficients, spec.seed);
    let t = linspace(l, spec.t_lo, spec.t_hi);
    let truth = DMatrix::from_fn(n, l, |i, j| params[i].value(t[(j, 0)]));
    let mut nr = rng(spec.seed, STREAM_NOISE);
    let mut noise = DMatrix::zeros(n, l);
    for i in 0..n {
        for j in 0..l {
            let z: f64 = nr.sample(StandardNormal);
            noise[(i, j)] = spec.noise_sd * z;
        }
    }
    let y = &truth + &noise;
    let data = DenseFunctionalDataset::new(params_matrix(&params), t, y)?;
    Ok(DenseBenchmark { data, truth, noise, params })
}

#[derive(Clone, Debug)]
pub struct SparseBenchmark {
    pub data: SparseFunctionalDataset,
    /// Noiseless value of every record.
    pub truth: DVector<f64>,
    pub noise: DVector<f64>,
    pub params: Vec<SineLineParams>,
}

impl SparseBenchmark {
    /// Noiseless curves of every input on `grid` (`N × |grid|`).
    pub fn truth_on(&self, grid: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.params.len(), grid.nrows(), |i, j| self.params[i].value(grid[(j, 0)]))
    }
}

pub fn gen_sparse(spec: &SparseSpec) -> Result<SparseBenchmark> {
    check_common(spec.n_inputs, spec.t_lo, spec.t_hi, spec.noise_sd, &spec.coefficients)?;
    if spec.min_records < 1 || spec.min_records > spec.max_records {
        return input_err(format!(
            "record count range {}..={} is invalid",
            spec.min_records, spec.max_records
        ));
    }
    let n = spec.n_inputs;
    let params = draw_params(n, &spec.coefficients, spec.seed);
    let mut rr = rng(spec.seed, STREAM_RECORDS);
    let mut offsets = vec![0usize];
    let mut ts = Vec::new();
    for _ in 0..n {
        let k = rr.random_range(spec.min_records..=spec.max_records);
        for _ in 0..k {
            let u: f64 = rr.random();
            ts.push(spec.t_lo + (spec.t_hi - spec.t_lo) * u);
        }
        offsets.push(ts.len());
    }
    let s = ts.len();
    let mut truth = DVector::zeros(s);
    for i in 0..n {
        for r in offsets[i]..offsets[i + 1] {
            truth[r] = params[i].value(ts[r]);
        }
    }
    let mut nr = rng(spec.seed, STREAM_NOISE);
    let noise = DVector::from_fn(s, |_, _| spec.noise_sd * nr.sample::<f64, _>(StandardNormal));
    let y = &truth + &noise;
    let data = SparseFunctionalDataset::from_grouped(
        params_matrix(&params),
        DMatrix::from_column_slice(s, 1, &ts),
        y,
        offsets,
    )?;
    Ok(SparseBenchmark { data, truth, noise, params })
}

/// Input-level shuffle split: the first `round(N · train_fraction)` shuffled inputs train.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return input_err(format!("train fraction must lie in (0, 1), got {train_fraction}"));
    }
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return input_err(format!("split of {n} inputs at {train_fraction} leaves one side empty"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle(&mut idx, seed);
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

pub fn split(
    data: &FunctionalDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(FunctionalDataset, FunctionalDataset)> {
    let (a, b) = split_indices(data.n_inputs(), train_fraction, seed)?;
    Ok((data.subset(&a), data.subset(&b)))
}

/// Seeded Fisher–Yates shuffle.
pub fn shuffle(v: &mut [usize], seed: u64) {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    for i in (1..v.len()).rev() {
        let j = r.random_range(0..=i);
        v.swap(i, j);
    }
}
