//! Metrics, phantom dataset builders, Monte-Carlo experiment orchestration
//! and report files.

use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Provenance};
use crate::downstream::{
    angular_dispersion, deepest_min_distance, gfa, resample_curve, trace_streamline, BoxDomain, OdfField,
    Streamline, TraceConfig,
};
use crate::error::{invalid, NodfError, Result};
use crate::estimator::{fit_pipeline, interval_from_moments, EstimatorConfig, PosteriorState};
use crate::phantom::{
    ground_truth_coeffs, make_caduceus_3d, make_crossing_2d, sample_b0, sample_noisy, CaduceusGeometry,
    GroundTruthField, TensorSpec,
};
use crate::rng::derive_seed;
use crate::shls;
use crate::sphere::{electrostatic_directions, fibonacci_sphere, icosphere, Direction, HarmonicBasis, Icosphere};

/// Number of Fibonacci directions on which ODF metrics are evaluated.
pub const EVAL_DIRECTIONS: usize = 200;

pub fn evaluation_grid() -> Vec<Direction> {
    fibonacci_sphere(EVAL_DIRECTIONS).expect("fixed grid size is valid")
}

/// Normalized L2 error between coefficient vectors (equal to the function
/// L2 ratio because the basis is orthonormal).
pub fn l2_error(est: &[f64], truth: &[f64]) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(NodfError::ShapeMismatch(format!("{} vs {} coefficients", est.len(), truth.len())));
    }
    let norm = truth.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(NodfError::Undefined("L2 error against a zero truth".into()));
    }
    let diff = est.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(diff / norm)
}

/// Fraction of closed intervals containing the truth.
pub fn ecp(intervals: &[(f64, f64)], truth: &[f64]) -> Result<f64> {
    if intervals.len() != truth.len() {
        return Err(NodfError::ShapeMismatch(format!(
            "{} intervals vs {} truth values",
            intervals.len(),
            truth.len()
        )));
    }
    if intervals.is_empty() {
        return invalid("no intervals");
    }
    let hits = intervals.iter().zip(truth).filter(|((lo, hi), t)| lo <= t && *t <= hi).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Mean interval width.
pub fn interval_length(intervals: &[(f64, f64)]) -> Result<f64> {
    if intervals.is_empty() {
        return invalid("no intervals");
    }
    if let Some((lo, hi)) = intervals.iter().find(|(lo, hi)| !(lo <= hi)) {
        return invalid(format!("inverted interval ({lo}, {hi})"));
    }
    Ok(intervals.iter().map(|(lo, hi)| hi - lo).sum::<f64>() / intervals.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    #[value(name = "crossing2d")]
    Crossing2d,
    #[value(name = "caduceus3d")]
    Caduceus3d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub kind: PhantomKind,
    /// Grid size per axis (2 entries for the crossing, 3 for the caduceus).
    pub shape: Vec<usize>,
    pub bundle_width: f64,
    pub geometry: CaduceusGeometry,
    /// Use the literal eigenvalue set instead of the default.
    pub literal_eigenvalues: bool,
    pub n_directions: usize,
    pub snr: f64,
    /// Number of b=0 volumes per voxel.
    pub n_b0: usize,
    pub repulsion_iterations: usize,
    pub l_max: usize,
    /// Directions used to project the tensor signals onto the harmonic basis.
    pub n_dense: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            kind: PhantomKind::Crossing2d,
            shape: vec![16, 16],
            bundle_width: 2.0 / 3.0,
            geometry: CaduceusGeometry::default(),
            literal_eigenvalues: false,
            n_directions: 60,
            snr: 20.0,
            n_b0: 5,
            repulsion_iterations: 200,
            l_max: 8,
            n_dense: 2000,
        }
    }
}

impl PhantomConfig {
    pub fn caduceus(n: usize) -> Self {
        Self {
            kind: PhantomKind::Caduceus3d,
            shape: vec![n, n, n],
            ..Self::default()
        }
    }

    fn spec(&self) -> TensorSpec {
        if self.literal_eigenvalues {
            TensorSpec::literal()
        } else {
            TensorSpec::desk()
        }
    }
}

/// Noise-free truth of a phantom, reusable across noise replicates.
#[derive(Debug, Clone)]
pub struct PhantomTruth {
    pub config: PhantomConfig,
    pub coords: DMatrix<f64>,
    pub labels: Vec<crate::phantom::Region>,
    pub field: GroundTruthField,
    pub b_value: f64,
}

pub fn phantom_truth(cfg: &PhantomConfig) -> Result<PhantomTruth> {
    let spec = cfg.spec();
    let ph = match cfg.kind {
        PhantomKind::Crossing2d => {
            if cfg.shape.len() != 2 {
                return invalid(format!("crossing phantom needs a 2-entry shape, got {:?}", cfg.shape));
            }
            make_crossing_2d(cfg.shape[0], cfg.shape[1], cfg.bundle_width, spec)?
        }
        PhantomKind::Caduceus3d => {
            if cfg.shape.len() != 3 {
                return invalid(format!("caduceus phantom needs a 3-entry shape, got {:?}", cfg.shape));
            }
            make_caduceus_3d(cfg.shape[0], cfg.shape[1], cfg.shape[2], cfg.geometry, spec)?
        }
    };
    let field = ground_truth_coeffs(&ph, cfg.l_max, cfg.n_dense)?;
    Ok(PhantomTruth {
        config: cfg.clone(),
        coords: ph.coords,
        labels: ph.labels,
        field,
        b_value: spec.b_value,
    })
}

/// Noisy acquisition of `truth` with `n_directions` repulsion directions, noise
/// level `1 / snr`, and `n_b0` b=0 volumes.
pub fn simulate(truth: &PhantomTruth, n_directions: usize, snr: f64, seed: u64) -> Result<Dataset> {
    let cfg = &truth.config;
    if !(snr > 0.0) {
        return invalid(format!("SNR must be positive, got {snr}"));
    }
    let sigma_e = 1.0 / snr;
    let dirs = electrostatic_directions(n_directions, cfg.repulsion_iterations, derive_seed(seed, &[1]))?;
    let y = sample_noisy(&truth.field, &dirs, sigma_e, derive_seed(seed, &[2]))?;
    let mut ds = Dataset::new(truth.coords.clone(), y, dirs, truth.b_value)?;
    if cfg.n_b0 > 0 {
        ds.b0 = Some(sample_b0(truth.coords.nrows(), cfg.n_b0, sigma_e, derive_seed(seed, &[3]))?);
    }
    ds.truth = Some(truth.field.clone());
    ds.labels = Some(truth.labels.clone());
    ds.grid = Some(cfg.shape.clone());
    let mut params = serde_json::to_value(cfg)?;
    params["n_directions"] = n_directions.into();
    params["snr"] = snr.into();
    ds.provenance = Provenance {
        source: "phantom".into(),
        seed: Some(seed),
        params,
    };
    Ok(ds)
}

/// Builds a phantom dataset from scratch.
pub fn build_phantom_dataset(cfg: &PhantomConfig, seed: u64) -> Result<Dataset> {
    simulate(&phantom_truth(cfg)?, cfg.n_directions, cfg.snr, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Nodf,
    ShlsRaw,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Nodf => "nodf",
            Method::ShlsRaw => "shls_raw",
        }
    }
}

/// Averages over all voxels of one fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub l2: f64,
    pub ecp: f64,
    pub il: f64,
    /// Mean of estimated minus true GFA.
    pub gfa_bias: f64,
    pub gfa_abs: f64,
}

/// Per-voxel interval, point-estimate and truth on the evaluation grid.
struct VoxelEval {
    l2: f64,
    intervals: Vec<(f64, f64)>,
    est_values: Vec<f64>,
    truth_values: Vec<f64>,
}

fn aggregate(voxels: &[VoxelEval]) -> Result<Metrics> {
    let n = voxels.len() as f64;
    let mut m = Metrics {
        l2: 0.0,
        ecp: 0.0,
        il: 0.0,
        gfa_bias: 0.0,
        gfa_abs: 0.0,
    };
    for v in voxels {
        m.l2 += v.l2;
        m.ecp += ecp(&v.intervals, &v.truth_values)?;
        m.il += interval_length(&v.intervals)?;
        let d = gfa(&v.est_values)? - gfa(&v.truth_values)?;
        m.gfa_bias += d;
        m.gfa_abs += d.abs();
    }
    m.l2 /= n;
    m.ecp /= n;
    m.il /= n;
    m.gfa_bias /= n;
    m.gfa_abs /= n;
    Ok(m)
}

/// NODF metrics from credible intervals of the posterior at every voxel of `ds`.
pub fn evaluate_nodf(state: &PosteriorState, ds: &Dataset, grid: &[Direction], alpha: f64) -> Result<Metrics> {
    let truth = ds.truth.as_ref().ok_or_else(|| NodfError::InvalidArgument("dataset has no truth".into()))?;
    let phi_full = state.basis.matrix(grid);
    let phi_an = state.basis.anisotropic_matrix(grid);
    let voxels = (0..ds.n_voxels())
        .map(|v| {
            let coord = ds.coord(v);
            let xi = state.features_at(&coord)?;
            let est = state.mean_coeffs(&coord)?;
            let tr = truth.odf.column(v);
            let (means, vars) = state.odf_on_design(&xi, &phi_an);
            let intervals = means
                .iter()
                .zip(&vars)
                .map(|(m, s)| interval_from_moments(*m, *s, alpha))
                .collect::<Result<Vec<_>>>()?;
            Ok(VoxelEval {
                l2: l2_error(est.as_slice(), tr.as_slice())?,
                intervals,
                est_values: (&phi_full * &est).as_slice().to_vec(),
                truth_values: (&phi_full * tr).as_slice().to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(&voxels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShlsConfig {
    /// Fixed penalty; `None` selects it by GCV on `lambda_grid`.
    pub lambda: Option<f64>,
    pub lambda_grid: Vec<f64>,
    pub bootstrap_b: usize,
}

impl Default for ShlsConfig {
    fn default() -> Self {
        Self {
            lambda: None,
            lambda_grid: shls::default_lambda_grid(),
            bootstrap_b: 500,
        }
    }
}

/// SHLS point estimates with residual-bootstrap percentile intervals.
pub fn evaluate_shls(ds: &Dataset, cfg: &ShlsConfig, l_max: usize, grid: &[Direction], alpha: f64, seed: u64) -> Result<(Metrics, f64)> {
    let truth = ds.truth.as_ref().ok_or_else(|| NodfError::InvalidArgument("dataset has no truth".into()))?;
    let basis = HarmonicBasis::new(l_max)?;
    let phi = basis.matrix(&ds.directions);
    let lambda = match cfg.lambda {
        Some(l) => l,
        None => shls::gcv_select(&ds.signals, &basis, &phi, &cfg.lambda_grid)?,
    };
    let fit = shls::shls_fit(&ds.signals, &basis, &phi, lambda)?;
    let reps = shls::residual_bootstrap(&ds.signals, &basis, &phi, lambda, cfg.bootstrap_b, seed)?;
    let phi_full = basis.matrix(grid);
    let voxels = (0..ds.n_voxels())
        .map(|v| {
            let tr = truth.odf.column(v);
            let est = fit.odf_coeffs.column(v);
            Ok(VoxelEval {
                l2: l2_error(est.as_slice(), tr.as_slice())?,
                intervals: shls::bootstrap_intervals(&reps.voxel(v), &phi_full, alpha)?,
                est_values: (&phi_full * est).as_slice().to_vec(),
                truth_values: (&phi_full * tr).as_slice().to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((aggregate(&voxels)?, lambda))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Phantom geometry; `n_directions` and `snr` are overridden per cell.
    pub phantom: PhantomConfig,
    pub m_list: Vec<usize>,
    pub snr_list: Vec<f64>,
    pub replicates: usize,
    pub methods: Vec<Method>,
    pub estimator: EstimatorConfig,
    pub shls: ShlsConfig,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            m_list: vec![10, 60],
            snr_list: vec![20.0],
            replicates: 5,
            methods: vec![Method::Nodf, Method::ShlsRaw],
            estimator: EstimatorConfig::default(),
            shls: ShlsConfig::default(),
            alpha: 0.05,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_list.is_empty() || self.snr_list.is_empty() || self.methods.is_empty() {
            return invalid("experiment needs at least one M, one SNR and one method");
        }
        if self.replicates == 0 {
            return invalid("replicates must be >= 1");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return invalid(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        self.estimator.validate()
    }
}

/// One method fitted on one replicate dataset. Failed fits carry NaN metrics
/// and the error message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub method: Method,
    pub m: usize,
    pub snr: f64,
    pub replicate: usize,
    pub seed: u64,
    /// Selected penalty (lambda_c for NODF, lambda for SHLS).
    pub lambda: f64,
    pub l2: f64,
    pub ecp: f64,
    pub il: f64,
    pub gfa_bias: f64,
    pub gfa_abs: f64,
    pub error: String,
}

impl ReplicateRow {
    pub fn ok(&self) -> bool {
        self.error.is_empty()
    }
}

/// Mean and standard error (sd / sqrt(n), NaN for n < 2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub se: f64,
}

impl Stat {
    pub fn of(x: &[f64]) -> Stat {
        let n = x.len();
        if n == 0 {
            return Stat {
                mean: f64::NAN,
                se: f64::NAN,
            };
        }
        let mean = x.iter().sum::<f64>() / n as f64;
        let se = if n < 2 {
            f64::NAN
        } else {
            let var = x.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        };
        Stat { mean, se }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: Method,
    pub m: usize,
    pub snr: f64,
    /// Successful replicates.
    pub n: usize,
    pub failed: usize,
    pub l2: Stat,
    pub ecp: Stat,
    pub il: Stat,
    pub gfa_bias: Stat,
    pub gfa_abs: Stat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ReplicateRow>,
    pub cells: Vec<CellSummary>,
    /// Wall-clock seconds per row, kept out of the deterministic report files.
    pub wall_times: Vec<f64>,
}

impl ExperimentReport {
    pub fn cell(&self, method: Method, m: usize, snr: f64) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.method == method && c.m == m && c.snr == snr)
    }
}

/// Groups rows by (method, M, SNR) in first-appearance order.
pub fn summarize(rows: &[ReplicateRow]) -> Vec<CellSummary> {
    let mut keys: Vec<(Method, usize, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|k| *k == (r.method, r.m, r.snr)) {
            keys.push((r.method, r.m, r.snr));
        }
    }
    keys.into_iter()
        .map(|(method, m, snr)| {
            let cell: Vec<&ReplicateRow> = rows.iter().filter(|r| r.method == method && r.m == m && r.snr == snr).collect();
            let ok: Vec<&ReplicateRow> = cell.iter().copied().filter(|r| r.ok()).collect();
            let stat = |f: fn(&ReplicateRow) -> f64| Stat::of(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
            CellSummary {
                method,
                m,
                snr,
                n: ok.len(),
                failed: cell.len() - ok.len(),
                l2: stat(|r| r.l2),
                ecp: stat(|r| r.ecp),
                il: stat(|r| r.il),
                gfa_bias: stat(|r| r.gfa_bias),
                gfa_abs: stat(|r| r.gfa_abs),
            }
        })
        .collect()
}

fn failed_row(method: Method, m: usize, snr: f64, replicate: usize, seed: u64, e: &NodfError) -> ReplicateRow {
    log::warn!("{} M={m} SNR={snr} replicate {replicate} failed: {e}", method.name());
    ReplicateRow {
        method,
        m,
        snr,
        replicate,
        seed,
        lambda: f64::NAN,
        l2: f64::NAN,
        ecp: f64::NAN,
        il: f64::NAN,
        gfa_bias: f64::NAN,
        gfa_abs: f64::NAN,
        error: e.to_string(),
    }
}

fn run_replicate(cfg: &ExperimentConfig, truth: &PhantomTruth, m: usize, snr: f64, replicate: usize) -> Vec<(ReplicateRow, f64)> {
    let snr_key = snr.to_bits();
    let seed = derive_seed(cfg.seed, &[m as u64, snr_key, replicate as u64]);
    let grid = evaluation_grid();
    let ds = match simulate(truth, m, snr, seed) {
        Ok(ds) => ds,
        Err(e) => {
            return cfg.methods.iter().map(|&meth| (failed_row(meth, m, snr, replicate, seed, &e), 0.0)).collect();
        }
    };
    cfg.methods
        .iter()
        .map(|&method| {
            let t0 = Instant::now();
            let result = match method {
                Method::Nodf => fit_pipeline(&ds, &cfg.estimator, derive_seed(seed, &[100])).and_then(|out| {
                    Ok((evaluate_nodf(&out.state, &ds, &grid, cfg.alpha)?, out.lambda_c))
                }),
                Method::ShlsRaw => evaluate_shls(&ds, &cfg.shls, cfg.estimator.l_max, &grid, cfg.alpha, derive_seed(seed, &[200])),
            };
            let row = match result {
                Ok((mt, lambda)) => ReplicateRow {
                    method,
                    m,
                    snr,
                    replicate,
                    seed,
                    lambda,
                    l2: mt.l2,
                    ecp: mt.ecp,
                    il: mt.il,
                    gfa_bias: mt.gfa_bias,
                    gfa_abs: mt.gfa_abs,
                    error: String::new(),
                },
                Err(e) => failed_row(method, m, snr, replicate, seed, &e),
            };
            (row, t0.elapsed().as_secs_f64())
        })
        .collect()
}

/// Runs every (M, SNR, replicate) job in parallel; both methods see the same
/// simulated data within a job. Failures are recorded per row.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let truth = phantom_truth(&cfg.phantom)?;
    let mut jobs = Vec::new();
    for &m in &cfg.m_list {
        for &snr in &cfg.snr_list {
            for rep in 0..cfg.replicates {
                jobs.push((m, snr, rep));
            }
        }
    }
    let results: Vec<Vec<(ReplicateRow, f64)>> = jobs
        .par_iter()
        .map(|&(m, snr, rep)| run_replicate(cfg, &truth, m, snr, rep))
        .collect();
    let (rows, wall_times): (Vec<_>, Vec<_>) = results.into_iter().flatten().unzip();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    // Method-major ordering keeps each method's cells together in the report.
    order.sort_by_key(|&i| (rows[i].method, i));
    let rows: Vec<ReplicateRow> = order.iter().map(|&i| rows[i].clone()).collect();
    let wall_times = order.iter().map(|&i| wall_times[i]).collect();
    let cells = summarize(&rows);
    Ok(ExperimentReport { rows, cells, wall_times })
}

#[derive(Serialize, Deserialize)]
struct CellRecord {
    method: Method,
    m: usize,
    snr: f64,
    n: usize,
    failed: usize,
    l2_mean: f64,
    l2_se: f64,
    ecp_mean: f64,
    ecp_se: f64,
    il_mean: f64,
    il_se: f64,
    gfa_bias_mean: f64,
    gfa_bias_se: f64,
    gfa_abs_mean: f64,
    gfa_abs_se: f64,
}

impl From<&CellSummary> for CellRecord {
    fn from(c: &CellSummary) -> Self {
        Self {
            method: c.method,
            m: c.m,
            snr: c.snr,
            n: c.n,
            failed: c.failed,
            l2_mean: c.l2.mean,
            l2_se: c.l2.se,
            ecp_mean: c.ecp.mean,
            ecp_se: c.ecp.se,
            il_mean: c.il.mean,
            il_se: c.il.se,
            gfa_bias_mean: c.gfa_bias.mean,
            gfa_bias_se: c.gfa_bias.se,
            gfa_abs_mean: c.gfa_abs.mean,
            gfa_abs_se: c.gfa_abs.se,
        }
    }
}

impl From<CellRecord> for CellSummary {
    fn from(c: CellRecord) -> Self {
        let s = |mean, se| Stat { mean, se };
        Self {
            method: c.method,
            m: c.m,
            snr: c.snr,
            n: c.n,
            failed: c.failed,
            l2: s(c.l2_mean, c.l2_se),
            ecp: s(c.ecp_mean, c.ecp_se),
            il: s(c.il_mean, c.il_se),
            gfa_bias: s(c.gfa_bias_mean, c.gfa_bias_se),
            gfa_abs: s(c.gfa_abs_mean, c.gfa_abs_se),
        }
    }
}

fn csv_err(e: csv::Error) -> NodfError {
    NodfError::Parse(e.to_string())
}

fn write_csv<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(NodfError::MissingComponent(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|x| x.map_err(csv_err)).collect()
}

pub fn write_rows(path: &Path, rows: &[ReplicateRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_rows(path: &Path) -> Result<Vec<ReplicateRow>> {
    read_csv(path)
}

pub fn write_cells(path: &Path, cells: &[CellSummary]) -> Result<()> {
    write_csv(path, cells.iter().map(CellRecord::from))
}

pub fn read_cells(path: &Path) -> Result<Vec<CellSummary>> {
    Ok(read_csv::<CellRecord>(path)?.into_iter().map(CellSummary::from).collect())
}

/// Human-readable aligned table of cell summaries.
pub fn format_table(cells: &[CellSummary]) -> String {
    let mut out = format!(
        "{:<9} {:>4} {:>6} {:>3} {:>4}  {:>19}  {:>19}  {:>19}  {:>21}  {:>19}\n",
        "method", "M", "SNR", "n", "fail", "L2 (se)", "ECP (se)", "IL (se)", "GFA bias (se)", "GFA abs (se)"
    );
    let f = |s: &Stat| format!("{:.4} ({:.4})", s.mean, s.se);
    for c in cells {
        out.push_str(&format!(
            "{:<9} {:>4} {:>6} {:>3} {:>4}  {:>19}  {:>19}  {:>19}  {:>21}  {:>19}\n",
            c.method.name(),
            c.m,
            c.snr,
            c.n,
            c.failed,
            f(&c.l2),
            f(&c.ecp),
            f(&c.il),
            f(&c.gfa_bias),
            f(&c.gfa_abs)
        ));
    }
    out
}

/// Writes `replicates.csv`, `report.csv`, `report.txt` and `config.json`,
/// which depend only on the configuration, plus `timing.csv`.
pub fn write_report(report: &ExperimentReport, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_rows(&dir.join("replicates.csv"), &report.rows)?;
    write_cells(&dir.join("report.csv"), &report.cells)?;
    fs::write(dir.join("report.txt"), format_table(&report.cells))?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let timing = report.rows.iter().zip(&report.wall_times).map(|(r, t)| TimingRecord {
        method: r.method,
        m: r.m,
        snr: r.snr,
        replicate: r.replicate,
        wall_time_s: *t,
    });
    write_csv(&dir.join("timing.csv"), timing)
}

#[derive(Serialize, Deserialize)]
struct TimingRecord {
    method: Method,
    m: usize,
    snr: f64,
    replicate: usize,
    wall_time_s: f64,
}

/// Trilinear interpolation of per-voxel columns on a regular grid over [-1, 1]^3
/// (x fastest), for coordinates inside the grid.
pub fn trilinear(values: &DMatrix<f64>, shape: &[usize], x: &Vector3<f64>) -> Result<DVector<f64>> {
    if shape.len() != 3 || values.ncols() != shape.iter().product::<usize>() {
        return Err(NodfError::ShapeMismatch(format!(
            "{} columns do not match grid {shape:?}",
            values.ncols()
        )));
    }
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    for d in 0..3 {
        let n = shape[d];
        if n < 2 {
            return invalid("grid axes need at least 2 points");
        }
        let u = (x[d] + 1.0) / 2.0 * (n - 1) as f64;
        if !(u >= 0.0 && u <= (n - 1) as f64) {
            return invalid(format!("point {x:?} lies outside the grid"));
        }
        let i = (u.floor() as usize).min(n - 2);
        base[d] = i;
        frac[d] = u - i as f64;
    }
    let mut out = DVector::zeros(values.nrows());
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for d in 0..3 {
            let hi = (corner >> d) & 1 == 1;
            idx[d] = base[d] + hi as usize;
            w *= if hi { frac[d] } else { 1.0 - frac[d] };
        }
        if w != 0.0 {
            out.axpy(w, &values.column(idx[0] + shape[0] * (idx[1] + shape[1] * idx[2])), 1.0);
        }
    }
    Ok(out)
}

/// Resources shared by every tracing run on one harmonic basis.
pub struct TraceKit {
    pub basis: HarmonicBasis,
    pub sphere: Icosphere,
    /// Icosphere points x K_total.
    pub design: DMatrix<f64>,
    pub domain: BoxDomain,
}

impl TraceKit {
    pub fn new(l_max: usize, icosphere_level: usize) -> Result<Self> {
        let basis = HarmonicBasis::new(l_max)?;
        let sphere = icosphere(icosphere_level);
        let design = basis.matrix(&sphere.points);
        Ok(Self {
            basis,
            sphere,
            design,
            domain: BoxDomain {
                lo: -1.0,
                hi: 1.0,
                dim: 3,
            },
        })
    }

    /// Traces on a gridded coefficient field (K_total x N) with trilinear interpolation.
    pub fn trace_grid(
        &self,
        coeffs: &DMatrix<f64>,
        shape: &[usize],
        x0: Vector3<f64>,
        initial: Option<Vector3<f64>>,
        cfg: &TraceConfig,
    ) -> Result<Streamline> {
        let field = OdfField::new(&self.basis, &self.sphere, &self.design, self.domain, |x: &Vector3<f64>| {
            trilinear(coeffs, shape, x)
        });
        trace_streamline(&field, x0, initial, cfg)
    }

    /// Traces on the NODF field with head `w` (K x r), e.g. a posterior draw.
    /// The mean channel follows the trained head.
    pub fn trace_nodf(
        &self,
        state: &PosteriorState,
        w: &DMatrix<f64>,
        x0: Vector3<f64>,
        initial: Option<Vector3<f64>>,
        cfg: &TraceConfig,
    ) -> Result<Streamline> {
        let dim = state.params.d_in();
        let field = OdfField::new(&self.basis, &self.sphere, &self.design, self.domain, |x: &Vector3<f64>| {
            let xi = state.features_at(&x.as_slice()[..dim])?;
            Ok(state.full_coeffs(state.params.head_mu.dot(&xi), &(w * &xi)))
        });
        trace_streamline(&field, x0, initial, cfg)
    }
}

/// Streamlines from posterior field draws, each started at `x0` along `initial`.
pub fn posterior_streamlines(
    kit: &TraceKit,
    state: &PosteriorState,
    x0: Vector3<f64>,
    initial: Option<Vector3<f64>>,
    n_samples: usize,
    cfg: &TraceConfig,
    seed: u64,
) -> Result<Vec<Streamline>> {
    (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let w = state.sample_field(derive_seed(seed, &[s as u64]));
            kit.trace_nodf(state, &w, x0, initial, cfg)
        })
        .collect()
}

/// Streamline seed on a caduceus helix centerline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HelixSeed {
    pub helix: usize,
    /// Helix parameter (equal to z).
    pub t: f64,
    /// Start along the tangent towards +z, otherwise towards -z.
    pub upward: bool,
}

impl HelixSeed {
    pub fn point_and_direction(&self, g: &CaduceusGeometry) -> (Vector3<f64>, Vector3<f64>) {
        let d = g.tangent(self.helix, self.t);
        (g.centerline(self.helix, self.t), if self.upward { d } else { -d })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TractConfig {
    /// Grid points per axis of the caduceus phantom.
    pub grid: usize,
    pub snr: f64,
    pub m_low: usize,
    pub m_high: usize,
    pub runs: usize,
    pub n_samples: usize,
    /// Deepest curves considered by the distance summary.
    pub depth_k: usize,
    /// Points per resampled curve.
    pub n_resample: usize,
    /// Each seed runs through one crossing; distances are averaged over seeds.
    pub seeds: Vec<HelixSeed>,
    pub icosphere_level: usize,
    pub trace: TraceConfig,
    pub estimator: EstimatorConfig,
    pub seed: u64,
}

impl Default for TractConfig {
    fn default() -> Self {
        let mut estimator = EstimatorConfig::default();
        estimator.lambda_c = Some(1e-6);
        estimator.train.batch_size = Some(1024);
        estimator.train.iterations = 2000;
        estimator.network.encoding_scale = 10.0;
        let seed = |helix, t, upward| HelixSeed { helix, t, upward };
        Self {
            grid: 24,
            snr: 20.0,
            m_low: 20,
            m_high: 60,
            runs: 5,
            n_samples: 30,
            depth_k: 10,
            n_resample: 100,
            seeds: vec![seed(0, -0.5, true), seed(1, -0.5, true), seed(0, 0.5, false), seed(1, 0.5, false)],
            icosphere_level: 4,
            // Crossing voxels of the caduceus have GFA near 0.22.
            trace: TraceConfig {
                gfa_threshold: 0.1,
                ..TraceConfig::default()
            },
            estimator,
            seed: 0,
        }
    }
}

/// Ensemble summary of one fit, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TractSummary {
    pub m: usize,
    /// Per seed: minimum distance to the ground-truth streamline over the deepest curves.
    pub distances: Vec<f64>,
    pub distance: f64,
    /// Mean angular dispersion along the resampled curves (radians).
    pub mean_ad: f64,
    pub mean_points: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TractRun {
    pub run: usize,
    pub seed: u64,
    pub low: TractSummary,
    pub high: TractSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TractReport {
    /// Points of each ground-truth streamline.
    pub gt_points: Vec<usize>,
    pub runs: Vec<TractRun>,
}

impl TractReport {
    /// Runs in which the denser acquisition got strictly closer to the truth.
    pub fn improved_runs(&self) -> usize {
        self.runs
            .iter()
            .filter(|r| r.high.distance.is_finite() && r.high.distance < r.low.distance)
            .count()
    }
}

fn resample_all(lines: &[Streamline], n: usize) -> Vec<Vec<[f64; 3]>> {
    lines
        .iter()
        .filter_map(|s| match resample_curve(&s.points, n) {
            Ok(c) => Some(c),
            Err(e) => {
                log::debug!("streamline dropped: {e}");
                None
            }
        })
        .collect()
}

/// Deepest-curve distance, mean angular dispersion and mean point count of one ensemble.
fn ensemble_stats(gt: &[[f64; 3]], lines: &[Streamline], cfg: &TractConfig) -> Result<(f64, f64, f64)> {
    let curves = resample_all(lines, cfg.n_resample);
    let distance = if curves.is_empty() {
        f64::INFINITY
    } else {
        deepest_min_distance(gt, &curves, cfg.depth_k)?
    };
    let mean_ad = if curves.len() >= 2 {
        let ad = angular_dispersion(&curves)?;
        ad.iter().sum::<f64>() / ad.len() as f64
    } else {
        f64::NAN
    };
    let mean_points = lines.iter().map(|s| s.points.len() as f64).sum::<f64>() / lines.len().max(1) as f64;
    Ok((distance, mean_ad, mean_points))
}

/// Ground-truth streamlines, one per configured seed, on the interpolated truth field.
pub fn ground_truth_streamlines(kit: &TraceKit, truth: &PhantomTruth, cfg: &TractConfig) -> Result<Vec<Streamline>> {
    let g = truth.config.geometry;
    cfg.seeds
        .iter()
        .map(|s| {
            let (x0, d0) = s.point_and_direction(&g);
            kit.trace_grid(&truth.field.odf, &truth.config.shape, x0, Some(d0), &cfg.trace)
        })
        .collect()
}

/// Fits NODF at `m_low` and `m_high` directions on the caduceus phantom and
/// compares posterior streamline ensembles to the ground-truth streamlines.
pub fn run_tract_experiment(cfg: &TractConfig) -> Result<TractReport> {
    if cfg.runs == 0 || cfg.n_samples == 0 || cfg.seeds.is_empty() {
        return invalid("tract experiment needs runs, n_samples and seeds");
    }
    let pcfg = PhantomConfig {
        snr: cfg.snr,
        ..PhantomConfig::caduceus(cfg.grid)
    };
    let truth = phantom_truth(&pcfg)?;
    let geometry = pcfg.geometry;
    let kit = TraceKit::new(cfg.estimator.l_max, cfg.icosphere_level)?;
    let gt_lines = ground_truth_streamlines(&kit, &truth, cfg)?;
    let gts = gt_lines
        .iter()
        .map(|l| resample_curve(&l.points, cfg.n_resample))
        .collect::<Result<Vec<_>>>()?;
    let mut runs = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.runs {
        let seed = derive_seed(cfg.seed, &[run as u64]);
        let fit_one = |m: usize| -> Result<TractSummary> {
            let ds = simulate(&truth, m, cfg.snr, derive_seed(seed, &[m as u64]))?;
            let out = fit_pipeline(&ds, &cfg.estimator, derive_seed(seed, &[m as u64, 1]))?;
            let mut stats = Vec::with_capacity(cfg.seeds.len());
            for (i, (s, gt)) in cfg.seeds.iter().zip(&gts).enumerate() {
                let (x0, d0) = s.point_and_direction(&geometry);
                let sample_seed = derive_seed(seed, &[m as u64, 2, i as u64]);
                let lines = posterior_streamlines(&kit, &out.state, x0, Some(d0), cfg.n_samples, &cfg.trace, sample_seed)?;
                stats.push(ensemble_stats(gt, &lines, cfg)?);
            }
            let k = stats.len() as f64;
            let distances: Vec<f64> = stats.iter().map(|s| s.0).collect();
            Ok(TractSummary {
                m,
                distance: distances.iter().sum::<f64>() / k,
                distances,
                mean_ad: stats.iter().map(|s| s.1).sum::<f64>() / k,
                mean_points: stats.iter().map(|s| s.2).sum::<f64>() / k,
            })
        };
        let low = fit_one(cfg.m_low)?;
        let high = fit_one(cfg.m_high)?;
        log::info!(
            "tract run {run}: distance M={} {:.4}, M={} {:.4}",
            low.m,
            low.distance,
            high.m,
            high.distance
        );
        runs.push(TractRun { run, seed, low, high });
    }
    Ok(TractReport {
        gt_points: gt_lines.iter().map(|l| l.points.len()).collect(),
        runs,
    })
}
