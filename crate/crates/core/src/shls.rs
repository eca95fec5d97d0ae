//! Voxel-wise spherical-harmonic ridge baseline with Laplace-Beltrami
//! penalty, GCV, and a leverage-adjusted residual bootstrap.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blob::TensorBlob;
use crate::error::{invalid, NodfError, Result};
use crate::rng;
use crate::sphere::{FunkRadonSpectrum, HarmonicBasis};

/// `diag(l^2 (l+1)^2)` over the basis.
pub fn laplace_beltrami_penalty(basis: &HarmonicBasis) -> DVector<f64> {
    DVector::from_iterator(
        basis.len(),
        basis.degrees().iter().map(|&l| (l * l * (l + 1) * (l + 1)) as f64),
    )
}

#[derive(Debug, Clone)]
pub struct ShlsFit {
    pub lambda: f64,
    /// K_total x N signal coefficients.
    pub signal_coeffs: DMatrix<f64>,
    /// K_total x N ODF coefficients.
    pub odf_coeffs: DMatrix<f64>,
    /// `[(I - H)^2]_mm`, one per direction.
    pub leverage: DVector<f64>,
    /// M x N fitted signals.
    pub fitted: DMatrix<f64>,
}

/// The ridge solve operator `(Phi^T Phi + lambda L)^-1 Phi^T` (K x M).
pub fn solve_operator(phi: &DMatrix<f64>, penalty: &DVector<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if !(lambda >= 0.0) {
        return invalid(format!("lambda must be non-negative, got {lambda}"));
    }
    let (m, k) = phi.shape();
    if penalty.len() != k {
        return Err(NodfError::ShapeMismatch(format!("penalty has {} entries for {k} columns", penalty.len())));
    }
    let mut a = phi.transpose() * phi;
    for j in 0..k {
        a[(j, j)] += lambda * penalty[j];
    }
    let diag = a.diagonal();
    let ch = Cholesky::new(a).ok_or_else(|| NodfError::NumericalRank(format!("ridge normal matrix ({m} directions, {k} harmonics, lambda {lambda})")))?;
    // Reject numerically singular systems (e.g. M < K at lambda = 0).
    let degenerate = ch.l().diagonal().iter().zip(diag.iter()).any(|(p, d)| p * p < 1e-12 * d);
    if degenerate || (m < k && lambda == 0.0) {
        return Err(NodfError::NumericalRank(format!(
            "ridge normal matrix is singular ({m} directions, {k} harmonics, lambda {lambda})"
        )));
    }
    Ok(ch.solve(&phi.transpose()))
}

pub fn shls_fit(y: &DMatrix<f64>, basis: &HarmonicBasis, phi: &DMatrix<f64>, lambda: f64) -> Result<ShlsFit> {
    if y.nrows() != phi.nrows() {
        return Err(NodfError::ShapeMismatch(format!("Y has {} rows, Phi has {}", y.nrows(), phi.nrows())));
    }
    let pen = laplace_beltrami_penalty(basis);
    let op = solve_operator(phi, &pen, lambda)?;
    let signal_coeffs = &op * y;
    let fitted = phi * &signal_coeffs;
    let hat = phi * &op;
    let leverage = residual_leverage(&hat);
    let fr = FunkRadonSpectrum::new(basis);
    let mut odf_coeffs = signal_coeffs.clone();
    for (j, mut row) in odf_coeffs.row_iter_mut().enumerate() {
        row *= fr.forward[j];
    }
    Ok(ShlsFit {
        lambda,
        signal_coeffs,
        odf_coeffs,
        leverage,
        fitted,
    })
}

/// Diagonal of `(I - H)^2`.
pub fn residual_leverage(hat: &DMatrix<f64>) -> DVector<f64> {
    let m = hat.nrows();
    let ih = DMatrix::<f64>::identity(m, m) - hat;
    let sq = &ih * &ih;
    sq.diagonal()
}

/// Summed GCV score over voxels.
pub fn gcv_score(y: &DMatrix<f64>, phi: &DMatrix<f64>, penalty: &DVector<f64>, lambda: f64) -> Result<f64> {
    let m = phi.nrows() as f64;
    let op = solve_operator(phi, penalty, lambda)?;
    let hat = phi * op;
    let resid = y - &hat * y;
    let denom = ((m - hat.trace()) / m).powi(2);
    let rss_per_voxel = resid.norm_squared() / m;
    if denom <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(rss_per_voxel / denom)
}

/// Grid member minimizing the summed GCV score. Unsolvable grid points are skipped.
pub fn gcv_select(y: &DMatrix<f64>, basis: &HarmonicBasis, phi: &DMatrix<f64>, grid: &[f64]) -> Result<f64> {
    if grid.is_empty() {
        return invalid("GCV grid is empty");
    }
    let pen = laplace_beltrami_penalty(basis);
    let mut best = (f64::INFINITY, None);
    for &l in grid {
        let s = match gcv_score(y, phi, &pen, l) {
            Ok(s) => s,
            Err(NodfError::NumericalRank(_)) => continue,
            Err(e) => return Err(e),
        };
        if best.1.is_none() || s < best.0 {
            best = (s, Some(l));
        }
    }
    best.1.ok_or_else(|| NodfError::NumericalRank("no GCV grid point gives a solvable fit".into()))
}

/// Default GCV grid: 10^-6 .. 10^0 in 25 log steps.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..25).map(|i| 10f64.powf(-6.0 + 0.25 * i as f64)).collect()
}

/// Bootstrap replicates of the ODF coefficients, stored `[B, N, K_total]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Replicates {
    pub b: usize,
    pub n: usize,
    pub k: usize,
    pub data: Vec<f64>,
}

impl Replicates {
    pub fn coeffs(&self, b: usize, voxel: usize) -> &[f64] {
        let off = (b * self.n + voxel) * self.k;
        &self.data[off..off + self.k]
    }

    /// B x K matrix of one voxel's replicates.
    pub fn voxel(&self, voxel: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.b, self.k, |b, j| self.coeffs(b, voxel)[j])
    }

    pub fn save(&self, dir: &Path, lambda: f64, seed: u64) -> Result<()> {
        let mut blob = TensorBlob::new();
        blob.push("replicates", vec![self.b, self.n, self.k], self.data.clone());
        blob.meta = serde_json::to_value(ReplicateMeta { lambda, seed })?;
        blob.save(dir, "replicates")
    }

    pub fn load(dir: &Path) -> Result<(Self, f64, u64)> {
        let blob = TensorBlob::load(dir, "replicates")?;
        let (_, shape, data) = blob.get("replicates")?;
        if shape.len() != 3 {
            return Err(NodfError::Parse(format!("replicate tensor has rank {}", shape.len())));
        }
        let meta: ReplicateMeta = serde_json::from_value(blob.meta.clone())?;
        Ok((
            Self {
                b: shape[0],
                n: shape[1],
                k: shape[2],
                data: data.clone(),
            },
            meta.lambda,
            meta.seed,
        ))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ReplicateMeta {
    lambda: f64,
    seed: u64,
}

/// Residual bootstrap: pilot residuals scaled by `1/sqrt(d_m)`, resampled
/// with replacement within each voxel, added to the pilot fit and refit.
pub fn residual_bootstrap(
    y: &DMatrix<f64>,
    basis: &HarmonicBasis,
    phi: &DMatrix<f64>,
    lambda: f64,
    b: usize,
    seed: u64,
) -> Result<Replicates> {
    if b == 0 {
        return invalid("bootstrap needs B >= 1");
    }
    let pilot = shls_fit(y, basis, phi, lambda)?;
    let pen = laplace_beltrami_penalty(basis);
    let op = solve_operator(phi, &pen, lambda)?;
    let fr = FunkRadonSpectrum::new(basis);
    let (m, n) = y.shape();
    let k = basis.len();
    let mut scaled = y - &pilot.fitted;
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        let d = pilot.leverage[i];
        if d > 0.0 {
            row /= d.sqrt();
        }
    }
    let blocks: Vec<Vec<f64>> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let mut r = rng::stream(seed, bi as u64);
            let mut ystar = pilot.fitted.clone();
            for v in 0..n {
                for i in 0..m {
                    ystar[(i, v)] += scaled[(r.random_range(0..m), v)];
                }
            }
            let c = &op * ystar;
            let mut out = Vec::with_capacity(n * k);
            for v in 0..n {
                for j in 0..k {
                    out.push(c[(j, v)] * fr.forward[j]);
                }
            }
            out
        })
        .collect();
    Ok(Replicates {
        b,
        n,
        k,
        data: blocks.concat(),
    })
}

/// Quantile by linear interpolation of the empirical CDF: position `q n`
/// (1-based) between order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let h = (q * n as f64).clamp(1.0, n as f64);
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo >= n {
        return sorted[n - 1];
    }
    sorted[lo - 1] + frac * (sorted[lo] - sorted[lo - 1])
}

/// Per-direction `(alpha/2, 1 - alpha/2)` quantiles of replicate ODF values.
/// `replicates` is B x K, `design` is directions x K.
pub fn bootstrap_intervals(replicates: &DMatrix<f64>, design: &DMatrix<f64>, alpha: f64) -> Result<Vec<(f64, f64)>> {
    if replicates.nrows() < 2 {
        return invalid("bootstrap intervals need at least 2 replicates");
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    let values = design * replicates.transpose();
    Ok(values
        .row_iter()
        .map(|row| {
            let mut v: Vec<f64> = row.iter().copied().collect();
            v.sort_by(f64::total_cmp);
            (quantile_sorted(&v, alpha / 2.0), quantile_sorted(&v, 1.0 - alpha / 2.0))
        })
        .collect())
}
