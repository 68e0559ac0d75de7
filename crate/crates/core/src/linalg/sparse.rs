use nalgebra::DMatrix;

use crate::error::{input_err, Result};

/// Compressed sparse row matrix.
///
/// Column indices are strictly increasing within each row and explicit zeros are never stored.
/// Indices are `u32` to halve the footprint of large design matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn from_csr(
        nrows: usize,
        ncols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<u32>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if ncols > u32::MAX as usize {
            return input_err(format!("{ncols} columns exceed the u32 index range"));
        }
        if row_ptr.len() != nrows + 1 || row_ptr[0] != 0 || *row_ptr.last().unwrap() != values.len()
        {
            return input_err("malformed CSR row pointer");
        }
        if col_idx.len() != values.len() {
            return input_err("CSR column and value arrays differ in length");
        }
        for i in 0..nrows {
            let (s, e) = (row_ptr[i], row_ptr[i + 1]);
            if s > e {
                return input_err("CSR row pointer is not monotone");
            }
            let cols = &col_idx[s..e];
            if cols.windows(2).any(|w| w[0] >= w[1]) || cols.iter().any(|&c| c as usize >= ncols) {
                return input_err(format!("row {i} has unsorted or out-of-range columns"));
            }
            if values[s..e].contains(&0.0) {
                return input_err(format!("row {i} stores an explicit zero"));
            }
        }
        Ok(Self { nrows, ncols, row_ptr, col_idx, values })
    }

    /// Build from a dense matrix, skipping exact zeros.
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut b = SparseBuilder::new(m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                b.push(j, m[(i, j)]);
            }
            b.finish_row();
        }
        b.build()
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n as u32).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nrows, self.ncols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn zero_fraction(&self) -> f64 {
        let total = self.nrows * self.ncols;
        if total == 0 {
            return 0.0;
        }
        (total - self.nnz()) as f64 / total as f64
    }

    #[inline]
    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[s..e], &self.values[s..e])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&(j as u32)) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    /// `out = A x`
    pub fn mul_vec_into(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(out.len(), self.nrows);
        for (i, o) in out.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            *o = cols.iter().zip(vals).map(|(&c, &v)| v * x[c as usize]).sum();
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.nrows];
        self.mul_vec_into(x, &mut out);
        out
    }

    /// `out = Aᵀ x`
    pub fn mul_t_vec_into(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.nrows);
        assert_eq!(out.len(), self.ncols);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                out[c as usize] += v * xi;
            }
        }
    }

    pub fn mul_t_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols];
        self.mul_t_vec_into(x, &mut out);
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                m[(i, c as usize)] = v;
            }
        }
        m
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.ncols + 1];
        for &c in &self.col_idx {
            counts[c as usize + 1] += 1;
        }
        for j in 0..self.ncols {
            counts[j + 1] += counts[j];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_idx = vec![0u32; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                let slot = next[c as usize];
                col_idx[slot] = i as u32;
                values[slot] = v;
                next[c as usize] += 1;
            }
        }
        Self { nrows: self.ncols, ncols: self.nrows, row_ptr, col_idx, values }
    }

    /// Sparse `AᵀA + shift·I`.
    pub fn gram_ata(&self, shift: f64) -> Self {
        let at = self.transpose();
        let n = self.ncols;
        let mut acc = vec![0.0; n];
        let mut mark = vec![false; n];
        let mut pattern: Vec<usize> = Vec::new();
        let mut b = SparseBuilder::new(n);
        for i in 0..n {
            let (krows, kvals) = at.row(i);
            for (&k, &aki) in krows.iter().zip(kvals) {
                let (cols, vals) = self.row(k as usize);
                for (&j, &akj) in cols.iter().zip(vals) {
                    let j = j as usize;
                    if !mark[j] {
                        mark[j] = true;
                        pattern.push(j);
                    }
                    acc[j] += aki * akj;
                }
            }
            if !mark[i] {
                mark[i] = true;
                pattern.push(i);
            }
            acc[i] += shift;
            pattern.sort_unstable();
            for &j in &pattern {
                b.push(j, acc[j]);
                acc[j] = 0.0;
                mark[j] = false;
            }
            pattern.clear();
            b.finish_row();
        }
        b.build()
    }

    /// Dense `AᵀA + shift·I`, accumulated row by row.
    pub fn dense_gram_ata(&self, shift: f64) -> DMatrix<f64> {
        let n = self.ncols;
        let mut m = DMatrix::zeros(n, n);
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (a, (&ca, &va)) in cols.iter().zip(vals).enumerate() {
                let ca = ca as usize;
                for (&cb, &vb) in cols[a..].iter().zip(&vals[a..]) {
                    m[(ca, cb as usize)] += va * vb;
                }
            }
        }
        for i in 0..n {
            m[(i, i)] += shift;
            for j in 0..i {
                m[(i, j)] = m[(j, i)];
            }
        }
        m
    }
}

/// Row-by-row CSR builder. Columns must be pushed in increasing order within a row.
pub(crate) struct SparseBuilder {
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
}

impl SparseBuilder {
    pub fn new(ncols: usize) -> Self {
        Self { ncols, row_ptr: vec![0], col_idx: Vec::new(), values: Vec::new() }
    }

    pub fn with_capacity(ncols: usize, rows: usize, nnz: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(rows + 1);
        row_ptr.push(0);
        Self {
            ncols,
            row_ptr,
            col_idx: Vec::with_capacity(nnz),
            values: Vec::with_capacity(nnz),
        }
    }

    #[inline]
    pub fn push(&mut self, col: usize, value: f64) {
        if value != 0.0 {
            debug_assert!(col < self.ncols);
            self.col_idx.push(col as u32);
            self.values.push(value);
        }
    }

    pub fn finish_row(&mut self) {
        self.row_ptr.push(self.values.len());
    }

    pub fn build(self) -> SparseMatrix {
        SparseMatrix {
            nrows: self.row_ptr.len() - 1,
            ncols: self.ncols,
            row_ptr: self.row_ptr,
            col_idx: self.col_idx,
            values: self.values,
        }
    }
}
