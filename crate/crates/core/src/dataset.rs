//! In-memory dataset and its on-disk directory format.
//!
//! ```text
//! DIR/meta.json         schema version, sizes, b-value, directions, dtype, provenance
//! DIR/bvecs             directions as three text rows
//! DIR/coords.<dt>       [N, D] voxel coordinates
//! DIR/signals.<dt>      [N, M] signals, row-major
//! DIR/b0.<dt>           [N, p] optional b=0 volumes
//! DIR/truth.<dt>        [N, K_total] optional ground-truth signal coefficients
//! DIR/labels.u8         [N] optional region codes
//! ```
//!
//! `<dt>` is `f64` or `f32`, little-endian.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, NodfError, Result};
use crate::phantom::{GroundTruthField, Region};
use crate::sphere::{format_bvec, Direction};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

impl Dtype {
    fn ext(self) -> &'static str {
        match self {
            Dtype::F64 => "f64",
            Dtype::F32 => "f32",
        }
    }
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub source: String,
    pub seed: Option<u64>,
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// N x D voxel coordinates in [-1, 1]^D.
    pub coords: DMatrix<f64>,
    /// M x N signals, one column per voxel.
    pub signals: DMatrix<f64>,
    pub directions: Vec<Direction>,
    pub b_value: f64,
    /// N x p b=0 volumes.
    pub b0: Option<DMatrix<f64>>,
    pub truth: Option<GroundTruthField>,
    pub labels: Option<Vec<Region>>,
    /// Grid shape when the voxels form a full grid (x fastest).
    pub grid: Option<Vec<usize>>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(coords: DMatrix<f64>, signals: DMatrix<f64>, directions: Vec<Direction>, b_value: f64) -> Result<Self> {
        let ds = Self {
            coords,
            signals,
            directions,
            b_value,
            b0: None,
            truth: None,
            labels: None,
            grid: None,
            provenance: Provenance::default(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n_voxels(&self) -> usize {
        self.coords.nrows()
    }

    pub fn n_directions(&self) -> usize {
        self.directions.len()
    }

    pub fn dim(&self) -> usize {
        self.coords.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.coords.nrows();
        if self.signals.nrows() != self.directions.len() {
            return Err(NodfError::ShapeMismatch(format!(
                "{} signal rows for {} directions",
                self.signals.nrows(),
                self.directions.len()
            )));
        }
        if self.signals.ncols() != n {
            return Err(NodfError::ShapeMismatch(format!("{} signal columns for {n} voxels", self.signals.ncols())));
        }
        if let Some(b0) = &self.b0 {
            if b0.nrows() != n {
                return Err(NodfError::ShapeMismatch(format!("{} b0 rows for {n} voxels", b0.nrows())));
            }
        }
        if let Some(t) = &self.truth {
            if t.len() != n {
                return Err(NodfError::ShapeMismatch(format!("{} truth columns for {n} voxels", t.len())));
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(NodfError::ShapeMismatch(format!("{} labels for {n} voxels", l.len())));
            }
        }
        let mut rows: Vec<Vec<u64>> = (0..n)
            .map(|i| self.coords.row(i).iter().map(|x| x.to_bits()).collect())
            .collect();
        rows.sort_unstable();
        if rows.windows(2).any(|w| w[0] == w[1]) {
            return invalid("voxel coordinates must be unique");
        }
        Ok(())
    }

    /// Voxel subset in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let coords = self.coords.select_rows(idx);
        let signals = self.signals.select_columns(idx);
        Dataset {
            coords,
            signals,
            directions: self.directions.clone(),
            b_value: self.b_value,
            b0: self.b0.as_ref().map(|b| b.select_rows(idx)),
            truth: self.truth.as_ref().map(|t| GroundTruthField {
                l_max: t.l_max,
                signal: t.signal.select_columns(idx),
                odf: t.odf.select_columns(idx),
            }),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            grid: None,
            provenance: self.provenance.clone(),
        }
    }

    pub fn coord(&self, i: usize) -> Vec<f64> {
        self.coords.row(i).iter().copied().collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    schema_version: u32,
    n_voxels: usize,
    n_directions: usize,
    dim: usize,
    b_value: f64,
    directions: Vec<[f64; 3]>,
    dtype: Dtype,
    b0_volumes: Option<usize>,
    truth_l_max: Option<usize>,
    has_labels: bool,
    grid: Option<Vec<usize>>,
    provenance: Provenance,
}

fn write_tensor(path: &Path, rows: usize, cols: usize, at: impl Fn(usize, usize) -> f64, dtype: Dtype) -> Result<()> {
    let width = if dtype == Dtype::F64 { 8 } else { 4 };
    let mut bytes = Vec::with_capacity(rows * cols * width);
    for i in 0..rows {
        for j in 0..cols {
            let x = at(i, j);
            match dtype {
                Dtype::F64 => bytes.extend_from_slice(&x.to_le_bytes()),
                Dtype::F32 => bytes.extend_from_slice(&(x as f32).to_le_bytes()),
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a row-major [rows, cols] tensor into a rows x cols matrix.
fn read_tensor(path: &Path, rows: usize, cols: usize, dtype: Dtype) -> Result<DMatrix<f64>> {
    if !path.exists() {
        return Err(NodfError::MissingComponent(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let width = if dtype == Dtype::F64 { 8 } else { 4 };
    if bytes.len() != rows * cols * width {
        return Err(NodfError::Parse(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            rows * cols * width
        )));
    }
    let values: Vec<f64> = match dtype {
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn write_dataset(ds: &Dataset, dir: &Path, dtype: Dtype) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir)?;
    let ext = dtype.ext();
    let n = ds.n_voxels();
    let meta = Meta {
        schema_version: SCHEMA_VERSION,
        n_voxels: n,
        n_directions: ds.n_directions(),
        dim: ds.dim(),
        b_value: ds.b_value,
        directions: ds.directions.iter().map(|d| [d.vector().x, d.vector().y, d.vector().z]).collect(),
        dtype,
        b0_volumes: ds.b0.as_ref().map(|b| b.ncols()),
        truth_l_max: ds.truth.as_ref().map(|t| t.l_max),
        has_labels: ds.labels.is_some(),
        grid: ds.grid.clone(),
        provenance: ds.provenance.clone(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    fs::write(dir.join("bvecs"), format_bvec(&ds.directions))?;
    write_tensor(&dir.join(format!("coords.{ext}")), n, ds.dim(), |i, j| ds.coords[(i, j)], dtype)?;
    write_tensor(&dir.join(format!("signals.{ext}")), n, ds.n_directions(), |i, j| ds.signals[(j, i)], dtype)?;
    if let Some(b0) = &ds.b0 {
        write_tensor(&dir.join(format!("b0.{ext}")), n, b0.ncols(), |i, j| b0[(i, j)], dtype)?;
    }
    if let Some(t) = &ds.truth {
        write_tensor(&dir.join(format!("truth.{ext}")), n, t.signal.nrows(), |i, j| t.signal[(j, i)], dtype)?;
    }
    if let Some(l) = &ds.labels {
        fs::write(dir.join("labels.u8"), l.iter().map(|r| r.code()).collect::<Vec<u8>>())?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(NodfError::MissingComponent(meta_path));
    }
    let raw: serde_json::Value = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
    let found = raw.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != SCHEMA_VERSION {
        return Err(NodfError::SchemaVersion {
            found,
            expected: SCHEMA_VERSION,
        });
    }
    let meta: Meta = serde_json::from_value(raw)?;
    let ext = meta.dtype.ext();
    let n = meta.n_voxels;
    let directions = meta
        .directions
        .iter()
        .map(|d| Direction::normalize(Vector3::new(d[0], d[1], d[2])))
        .collect::<Result<Vec<_>>>()?;
    if directions.len() != meta.n_directions {
        return Err(NodfError::Parse("direction count disagrees with n_directions".into()));
    }
    let coords = read_tensor(&dir.join(format!("coords.{ext}")), n, meta.dim, meta.dtype)?;
    let signals = read_tensor(&dir.join(format!("signals.{ext}")), n, meta.n_directions, meta.dtype)?.transpose();
    let b0 = match meta.b0_volumes {
        Some(p) => Some(read_tensor(&dir.join(format!("b0.{ext}")), n, p, meta.dtype)?),
        None => None,
    };
    let truth = match meta.truth_l_max {
        Some(l) => {
            let k = crate::sphere::harmonic_count(l);
            let sig = read_tensor(&dir.join(format!("truth.{ext}")), n, k, meta.dtype)?.transpose();
            Some(GroundTruthField::from_signal(l, sig)?)
        }
        None => None,
    };
    let labels = if meta.has_labels {
        let path = dir.join("labels.u8");
        if !path.exists() {
            return Err(NodfError::MissingComponent(path));
        }
        let bytes = fs::read(&path)?;
        if bytes.len() != n {
            return Err(NodfError::Parse(format!("labels.u8 holds {} entries, expected {n}", bytes.len())));
        }
        Some(bytes.into_iter().map(Region::from_code).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let ds = Dataset {
        coords,
        signals,
        directions,
        b_value: meta.b_value,
        b0,
        truth,
        labels,
        grid: meta.grid,
        provenance: meta.provenance,
    };
    ds.validate()?;
    Ok(ds)
}
