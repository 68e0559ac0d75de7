//! Functional datasets: a shared measurement grid (dense) or ragged per-input records (sparse).

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{input_err, Result};

/// Every input observed on the same grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseFunctionalDataset {
    /// Covariates, N × p.
    pub x: DMatrix<f64>,
    /// Measurement grid, L × q.
    pub t: DMatrix<f64>,
    /// Observations, N × L.
    pub y: DMatrix<f64>,
}

impl DenseFunctionalDataset {
    pub fn new(x: DMatrix<f64>, t: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.nrows() == 0 || t.nrows() == 0 {
            return input_err("dataset needs at least one input and one grid point");
        }
        if y.shape() != (x.nrows(), t.nrows()) {
            return input_err(format!(
                "Y is {}x{} but X has {} rows and t has {} points",
                y.nrows(),
                y.ncols(),
                x.nrows(),
                t.nrows()
            ));
        }
        if t.ncols() == 0 {
            return input_err("grid points need at least one coordinate");
        }
        check_finite("X", x.iter())?;
        check_finite("t", t.iter())?;
        check_finite("Y", y.iter())?;
        Ok(Self { x, t, y })
    }

    pub fn n_inputs(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_points(&self) -> usize {
        self.t.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn grid_dim(&self) -> usize {
        self.t.ncols()
    }

    /// Row-major `vec(Yᵀ)`: grouped by input, contiguous over the grid.
    pub fn y_vec(&self) -> Vec<f64> {
        crate::linalg::dense_row_major(&self.y)
    }

    pub fn subset(&self, inputs: &[usize]) -> Self {
        Self {
            x: select_rows(&self.x, inputs),
            t: self.t.clone(),
            y: select_rows(&self.y, inputs),
        }
    }

    /// Keep only the listed grid columns.
    pub fn subset_grid(&self, points: &[usize]) -> Self {
        Self {
            x: self.x.clone(),
            t: select_rows(&self.t, points),
            y: DMatrix::from_fn(self.y.nrows(), points.len(), |i, j| self.y[(i, points[j])]),
        }
    }

    pub fn to_sparse(&self) -> SparseFunctionalDataset {
        let (n, l) = self.y.shape();
        let q = self.t.ncols();
        let t = DMatrix::from_fn(n * l, q, |r, k| self.t[(r % l, k)]);
        let y = DVector::from_iterator(n * l, self.y_vec());
        let offsets = (0..=n).map(|i| i * l).collect();
        SparseFunctionalDataset { x: self.x.clone(), t, y, offsets }
    }
}

/// Ragged records: input `i` owns records `offsets[i]..offsets[i+1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseFunctionalDataset {
    /// Covariates, N × p.
    pub x: DMatrix<f64>,
    /// Record locations, S × q, grouped by input.
    pub t: DMatrix<f64>,
    /// Record values, length S.
    pub y: DVector<f64>,
    offsets: Vec<usize>,
}

impl SparseFunctionalDataset {
    /// Build from unordered `(input index, t, y)` records; the order within an input is kept.
    pub fn from_records(
        x: DMatrix<f64>,
        input_index: &[usize],
        t: DMatrix<f64>,
        y: &[f64],
    ) -> Result<Self> {
        let s = input_index.len();
        if t.nrows() != s || y.len() != s {
            return input_err(format!(
                "record arrays differ in length (ids {s}, t {}, y {})",
                t.nrows(),
                y.len()
            ));
        }
        let n = x.nrows();
        if n == 0 {
            return input_err("dataset has no inputs");
        }
        if let Some(bad) = input_index.iter().find(|&&i| i >= n) {
            return input_err(format!("record refers to input {bad} but only {n} inputs exist"));
        }
        let mut order: Vec<usize> = (0..s).collect();
        order.sort_by_key(|&r| input_index[r]);
        let mut counts = vec![0usize; n + 1];
        for &i in input_index {
            counts[i + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let t_sorted = DMatrix::from_fn(s, t.ncols(), |r, k| t[(order[r], k)]);
        let y_sorted = DVector::from_iterator(s, order.iter().map(|&r| y[r]));
        Self::from_grouped(x, t_sorted, y_sorted, counts)
    }

    /// Build from records already grouped by input.
    pub fn from_grouped(
        x: DMatrix<f64>,
        t: DMatrix<f64>,
        y: DVector<f64>,
        offsets: Vec<usize>,
    ) -> Result<Self> {
        let n = x.nrows();
        if offsets.len() != n + 1 || offsets[0] != 0 || offsets.windows(2).any(|w| w[0] > w[1]) {
            return input_err("record offsets are malformed");
        }
        if offsets[n] != y.len() || t.nrows() != y.len() {
            return input_err("record offsets do not cover the records");
        }
        if y.is_empty() {
            return input_err("dataset has no records");
        }
        if t.ncols() == 0 {
            return input_err("record locations need at least one coordinate");
        }
        check_finite("X", x.iter())?;
        check_finite("t", t.iter())?;
        check_finite("y", y.iter())?;
        Ok(Self { x, t, y, offsets })
    }

    pub fn n_inputs(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_records(&self) -> usize {
        self.y.len()
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn grid_dim(&self) -> usize {
        self.t.ncols()
    }

    pub fn records_of(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn record_counts(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn subset(&self, inputs: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(inputs.len() + 1);
        offsets.push(0);
        let mut rows = Vec::new();
        for &i in inputs {
            rows.extend(self.records_of(i));
            offsets.push(rows.len());
        }
        Self {
            x: select_rows(&self.x, inputs),
            t: select_rows(&self.t, &rows),
            y: DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.y[r])),
            offsets,
        }
    }
}

/// Either dataset flavour, for routines that accept both.
#[derive(Clone, Debug, PartialEq)]
pub enum FunctionalDataset {
    Dense(DenseFunctionalDataset),
    Sparse(SparseFunctionalDataset),
}

impl FunctionalDataset {
    pub fn n_inputs(&self) -> usize {
        match self {
            Self::Dense(d) => d.n_inputs(),
            Self::Sparse(s) => s.n_inputs(),
        }
    }

    pub fn n_observations(&self) -> usize {
        match self {
            Self::Dense(d) => d.y.len(),
            Self::Sparse(s) => s.n_records(),
        }
    }

    pub fn subset(&self, inputs: &[usize]) -> Self {
        match self {
            Self::Dense(d) => Self::Dense(d.subset(inputs)),
            Self::Sparse(s) => Self::Sparse(s.subset(inputs)),
        }
    }

    /// Observed values grouped by input.
    pub fn observations(&self) -> Vec<Vec<f64>> {
        match self {
            Self::Dense(d) => (0..d.n_inputs()).map(|i| d.y.row(i).iter().copied().collect()).collect(),
            Self::Sparse(s) => (0..s.n_inputs())
                .map(|i| s.records_of(i).map(|r| s.y[r]).collect())
                .collect(),
        }
    }

    pub fn as_sparse(&self) -> SparseFunctionalDataset {
        match self {
            Self::Dense(d) => d.to_sparse(),
            Self::Sparse(s) => s.clone(),
        }
    }
}

impl From<DenseFunctionalDataset> for FunctionalDataset {
    fn from(d: DenseFunctionalDataset) -> Self {
        Self::Dense(d)
    }
}

impl From<SparseFunctionalDataset> for FunctionalDataset {
    fn from(s: SparseFunctionalDataset) -> Self {
        Self::Sparse(s)
    }
}

pub(crate) fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

fn check_finite<'a>(name: &str, mut it: impl Iterator<Item = &'a f64>) -> Result<()> {
    if it.any(|v| !v.is_finite()) {
        return input_err(format!("{name} contains non-finite values"));
    }
    Ok(())
}
