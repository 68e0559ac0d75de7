//! CSV datasets and JSON model documents.
//!
//! Numbers are written in shortest round-trip decimal form, so identical values always give
//! identical bytes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::baselines::{FlmModel, KrrBankModel, KrrColumn, KrrParams};
use crate::data::{DenseFunctionalDataset, FunctionalDataset, SparseFunctionalDataset};
use crate::error::{Error, Result};
use crate::eval::FittedModel;
use crate::kernel::KernelConfig;
use crate::krfd::{KrfdHyperparams, KrfdModel};
use crate::krsfd::{CovarianceMode, KrsfdHyperparams, KrsfdModel};
use crate::linalg::{CgOptions, CgReport};

pub const MODEL_FORMAT_VERSION: u32 = 1;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

/// Header `{prefix}_0 .. {prefix}_{n-1}`.
pub fn indexed_header(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}_{i}")).collect()
}

pub fn write_matrix(path: &Path, header: &[String], m: &DMatrix<f64>) -> Result<()> {
    if header.len() != m.ncols() {
        return Err(Error::Input("header length does not match matrix width".into()));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Numeric CSV with a header row.
pub fn read_matrix(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return format_err(format!("{}: row {} has {} fields, header has {}", path.display(), k + 1, rec.len(), header.len()));
        }
        for f in rec.iter() {
            let v: f64 = f.trim().parse().map_err(|_| {
                Error::Format(format!("{}: row {}: '{f}' is not a number", path.display(), k + 1))
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Ok((header.clone(), DMatrix::from_row_slice(rows, header.len(), &data)))
}

pub fn write_dense_dataset(dir: &Path, d: &DenseFunctionalDataset) -> Result<()> {
    write_matrix(&dir.join("X.csv"), &indexed_header("x", d.input_dim()), &d.x)?;
    write_matrix(&dir.join("t.csv"), &indexed_header("t", d.grid_dim()), &d.t)?;
    write_matrix(&dir.join("Y.csv"), &indexed_header("y", d.n_points()), &d.y)
}

pub fn read_dense_dataset(x: &Path, t: &Path, y: &Path) -> Result<DenseFunctionalDataset> {
    let (_, xm) = read_matrix(x)?;
    let (_, tm) = read_matrix(t)?;
    let (_, ym) = read_matrix(y)?;
    if ym.nrows() != xm.nrows() {
        return format_err(format!("Y has {} rows but X has {}", ym.nrows(), xm.nrows()));
    }
    if ym.ncols() != tm.nrows() {
        return format_err(format!("Y has {} columns but t has {} points", ym.ncols(), tm.nrows()));
    }
    DenseFunctionalDataset::new(xm, tm, ym).map_err(|e| Error::Format(e.to_string()))
}

/// `records.csv`: `input_id, t_0.., y`.
pub fn write_records(path: &Path, s: &SparseFunctionalDataset) -> Result<()> {
    let q = s.grid_dim();
    let mut header = vec!["input_id".to_string()];
    header.extend(indexed_header("t", q));
    header.push("y".into());
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    for i in 0..s.n_inputs() {
        for r in s.records_of(i) {
            let mut rec = vec![i.to_string()];
            rec.extend(s.t.row(r).iter().map(|v| v.to_string()));
            rec.push(s.y[r].to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_sparse_dataset(dir: &Path, s: &SparseFunctionalDataset) -> Result<()> {
    write_matrix(&dir.join("X.csv"), &indexed_header("x", s.input_dim()), &s.x)?;
    write_records(&dir.join("records.csv"), s)
}

pub fn read_sparse_dataset(x: &Path, records: &Path) -> Result<SparseFunctionalDataset> {
    let (_, xm) = read_matrix(x)?;
    let (header, rm) = read_matrix(records)?;
    if header.len() < 3 || header[0] != "input_id" || header.last().map(String::as_str) != Some("y") {
        return format_err("records.csv needs columns input_id, t_0.., y");
    }
    let q = header.len() - 2;
    let mut ids = Vec::with_capacity(rm.nrows());
    for r in 0..rm.nrows() {
        let v = rm[(r, 0)];
        if v < 0.0 || v.fract() != 0.0 {
            return format_err(format!("records.csv row {}: input_id {v} is not a non-negative integer", r + 1));
        }
        ids.push(v as usize);
    }
    let t = rm.columns(1, q).into_owned();
    let y: Vec<f64> = rm.column(q + 1).iter().copied().collect();
    SparseFunctionalDataset::from_records(xm, &ids, t, &y).map_err(|e| Error::Format(e.to_string()))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn from_rows(r: &[Vec<f64>], ncols_if_empty: usize) -> Result<DMatrix<f64>> {
    let nc = r.first().map_or(ncols_if_empty, Vec::len);
    if r.iter().any(|row| row.len() != nc) {
        return format_err("ragged matrix in model document");
    }
    Ok(DMatrix::from_row_iterator(r.len(), nc, r.iter().flatten().copied()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KrfdDocument {
    pub hyperparams: KrfdHyperparams,
    pub x_train: Vec<Vec<f64>>,
    pub t_train: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub sigma2: f64,
    pub training_sse: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KrsfdHyperparamsDocument {
    pub lambda: f64,
    pub kernel_g: KernelConfig,
    pub kernel_t: KernelConfig,
    pub z_g: f64,
    pub truncation: bool,
    pub centers: Vec<Vec<f64>>,
    pub alpha: f64,
    pub beta: f64,
    pub cg: CgOptions,
    pub dense_threshold: usize,
    pub covariance: CovarianceMode,
    pub ilu_drop_tolerance: f64,
    pub ilu_fill_factor: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KrsfdDocument {
    pub hyperparams: KrsfdHyperparamsDocument,
    pub x_train: Vec<Vec<f64>>,
    pub record_t: Vec<Vec<f64>>,
    pub record_y: Vec<f64>,
    pub offsets: Vec<usize>,
    pub theta: Vec<f64>,
    pub sigma2: f64,
    pub cg_report: CgReport,
    /// Achieved zero fractions of G, T and H (informational).
    pub zero_fraction_g: f64,
    pub zero_fraction_t: f64,
    pub zero_fraction_h: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlmDocument {
    pub theta: Vec<f64>,
    pub kernel_t: KernelConfig,
    pub centers: Vec<Vec<f64>>,
    pub lambda: f64,
    pub input_dim: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KrrColumnDocument {
    pub params: KrrParams,
    pub coef: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KrrDocument {
    pub x_train: Vec<Vec<f64>>,
    /// Grid the bank was trained on, one row per column.
    pub t_grid: Vec<Vec<f64>>,
    pub columns: Vec<KrrColumnDocument>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelDocument {
    Krfd(KrfdDocument),
    Krsfd(KrsfdDocument),
    Flm(FlmDocument),
    Krr(KrrDocument),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    #[serde(flatten)]
    pub model: ModelDocument,
}

impl ModelDocument {
    /// `t_grid` is only needed (and stored) for the KRR bank.
    pub fn from_model(m: &FittedModel, t_grid: Option<&DMatrix<f64>>) -> Result<Self> {
        Ok(match m {
            FittedModel::Krfd(k) => Self::Krfd(KrfdDocument {
                hyperparams: *k.hyperparams(),
                x_train: rows(k.x_train()),
                t_train: rows(k.t_train()),
                theta: rows(k.theta()),
                c: k.c().iter().copied().collect(),
                sigma2: k.sigma2(),
                training_sse: k.training_sse(),
            }),
            FittedModel::Krsfd(k) => {
                let hp = k.hyperparams();
                let d = k.training_data();
                Self::Krsfd(KrsfdDocument {
                    hyperparams: KrsfdHyperparamsDocument {
                        lambda: hp.lambda,
                        kernel_g: hp.kernel_g,
                        kernel_t: hp.kernel_t,
                        z_g: hp.z_g,
                        truncation: hp.truncation,
                        centers: rows(&hp.centers),
                        alpha: hp.alpha,
                        beta: hp.beta,
                        cg: hp.cg,
                        dense_threshold: hp.dense_threshold,
                        covariance: hp.covariance,
                        ilu_drop_tolerance: hp.ilu_drop_tolerance,
                        ilu_fill_factor: hp.ilu_fill_factor,
                    },
                    x_train: rows(&d.x),
                    record_t: rows(&d.t),
                    record_y: d.y.iter().copied().collect(),
                    offsets: d.offsets().to_vec(),
                    theta: k.theta().to_vec(),
                    sigma2: k.sigma2(),
                    cg_report: *k.cg_report(),
                    zero_fraction_g: k.design().g.zero_fraction,
                    zero_fraction_t: k.design().t.zero_fraction,
                    zero_fraction_h: k.design().zero_fraction(),
                })
            }
            FittedModel::Flm(f) => Self::Flm(FlmDocument {
                theta: f.theta.clone(),
                kernel_t: f.kernel_t,
                centers: rows(&f.centers),
                lambda: f.lambda,
                input_dim: f.input_dim,
            }),
            FittedModel::Krr(b) => {
                let grid = t_grid.ok_or_else(|| Error::Input("KRR documents need the training grid".into()))?;
                Self::Krr(KrrDocument {
                    x_train: rows(&b.x_train),
                    t_grid: rows(grid),
                    columns: b
                        .columns
                        .iter()
                        .map(|c| KrrColumnDocument { params: c.params, coef: c.coef.clone() })
                        .collect(),
                })
            }
        })
    }

    /// Rebuild the model; returns the KRR training grid alongside when present.
    pub fn into_model(self) -> Result<(FittedModel, Option<DMatrix<f64>>)> {
        let wrap = |e: Error| match e {
            Error::Input(m) => Error::Format(format!("inconsistent model document: {m}")),
            other => other,
        };
        Ok(match self {
            Self::Krfd(d) => {
                let x = from_rows(&d.x_train, 0)?;
                let t = from_rows(&d.t_train, 0)?;
                let theta = from_rows(&d.theta, t.nrows())?;
                let m = KrfdModel::from_parts(
                    d.hyperparams,
                    x,
                    t,
                    theta,
                    DVector::from_vec(d.c),
                    d.sigma2,
                    d.training_sse,
                )
                .map_err(wrap)?;
                (FittedModel::Krfd(m), None)
            }
            Self::Krsfd(d) => {
                let h = d.hyperparams;
                let hp = KrsfdHyperparams {
                    lambda: h.lambda,
                    kernel_g: h.kernel_g,
                    kernel_t: h.kernel_t,
                    z_g: h.z_g,
                    truncation: h.truncation,
                    centers: from_rows(&h.centers, 0)?,
                    alpha: h.alpha,
                    beta: h.beta,
                    cg: h.cg,
                    dense_threshold: h.dense_threshold,
                    covariance: h.covariance,
                    ilu_drop_tolerance: h.ilu_drop_tolerance,
                    ilu_fill_factor: h.ilu_fill_factor,
                };
                let q = hp.centers.ncols();
                let train = SparseFunctionalDataset::from_grouped(
                    from_rows(&d.x_train, 0)?,
                    from_rows(&d.record_t, q)?,
                    DVector::from_vec(d.record_y),
                    d.offsets,
                )
                .map_err(wrap)?;
                let m = KrsfdModel::from_parts(hp, train, d.theta, d.sigma2, d.cg_report).map_err(wrap)?;
                (FittedModel::Krsfd(m), None)
            }
            Self::Flm(d) => {
                let centers = from_rows(&d.centers, 0)?;
                if d.theta.len() != (d.input_dim + 1) * centers.nrows() {
                    return format_err("FLM θ length does not match (p+1)·L");
                }
                (
                    FittedModel::Flm(FlmModel {
                        theta: d.theta,
                        kernel_t: d.kernel_t,
                        centers,
                        lambda: d.lambda,
                        input_dim: d.input_dim,
                    }),
                    None,
                )
            }
            Self::Krr(d) => {
                let x = from_rows(&d.x_train, 0)?;
                if d.columns.iter().any(|c| c.coef.len() != x.nrows()) {
                    return format_err("KRR coefficient length does not match the training inputs");
                }
                let grid = from_rows(&d.t_grid, 1)?;
                if grid.nrows() != d.columns.len() {
                    return format_err("KRR grid length does not match the number of columns");
                }
                let columns = d.columns.into_iter().map(|c| KrrColumn { params: c.params, coef: c.coef }).collect();
                (FittedModel::Krr(KrrBankModel { x_train: x, columns }), Some(grid))
            }
        })
    }
}

pub fn save_model(path: &Path, m: &FittedModel, t_grid: Option<&DMatrix<f64>>) -> Result<()> {
    let file = ModelFile { format_version: MODEL_FORMAT_VERSION, model: ModelDocument::from_model(m, t_grid)? };
    write_json(path, &file)
}

pub fn load_model(path: &Path) -> Result<(FittedModel, Option<DMatrix<f64>>)> {
    let text = std::fs::read_to_string(path)?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    match v.get("format_version").and_then(|x| x.as_u64()) {
        Some(x) if x == MODEL_FORMAT_VERSION as u64 => {}
        Some(x) => return format_err(format!("model format version {x} is not supported (expected {MODEL_FORMAT_VERSION})")),
        None => return format_err("model file has no format_version"),
    }
    let file: ModelFile = serde_json::from_value(v)?;
    file.model.into_model()
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Both dataset kinds from a directory written by [`write_dense_dataset`] or
/// [`write_sparse_dataset`].
pub fn read_dataset_dir(dir: &Path) -> Result<FunctionalDataset> {
    if dir.join("records.csv").exists() {
        Ok(read_sparse_dataset(&dir.join("X.csv"), &dir.join("records.csv"))?.into())
    } else {
        Ok(read_dense_dataset(&dir.join("X.csv"), &dir.join("t.csv"), &dir.join("Y.csv"))?.into())
    }
}
