//! Training driver, noise and variance estimation, and the closed-form
//! conditional posterior of the coefficient field.
//!
//! With `a = s_e^2 / s_w^2`, `S = Xi Xi^T` and `G = Phi_G^T Phi_G`, the
//! posterior precision of `vec(W)` is
//!
//! ```text
//! Lambda = (1/s_e^2) (a I_r (x) R + S (x) G)
//! ```
//!
//! The default solver diagonalizes it through `S = U D U^T` and
//! `R^-1/2 G R^-1/2 = V E V^T`, so the covariance of `c(v) = W xi(v)` is
//!
//! ```text
//! s_e^2 R^-1/2 V diag_k( sum_s eta_s^2 / (a + d_s e_k) ) V^T R^-1/2,   eta = U^T xi(v)
//! ```
//!
//! A dense Cholesky solver over the full `rK x rK` precision is also available.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::blob::TensorBlob;
use crate::dataset::Dataset;
use crate::error::{invalid, NodfError, Result};
use crate::field::{self, FieldArch, NeuralFieldParams, OptimizerState};
use crate::hyperopt::{self, HyperoptConfig, TrialRecord};
use crate::prior::{prior_precision, MaternParams, PriorPrecision};
use crate::rng;
use crate::sphere::{Direction, FunkRadonSpectrum, HarmonicBasis};

/// Funk-Radon eigenvalue of the constant harmonic: converts the signal mean
/// channel to the ODF mean channel.
pub const MEAN_CHANNEL_ODF_SCALE: f64 = 2.0 * PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceParams {
    pub sigma_e2: f64,
    pub sigma_w2: f64,
    pub sigma_mu2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorSolver {
    #[default]
    Kronecker,
    DenseCholesky,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Voxels per step; `None` trains full-batch.
    pub batch_size: Option<usize>,
    /// Learning rate at the last step as a fraction of the initial one
    /// (cosine decay; 1 keeps it constant).
    pub final_lr_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            learning_rate: 1e-3,
            batch_size: None,
            final_lr_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub layers: usize,
    pub width: usize,
    /// Encoding width; defaults to `width`.
    pub d0: Option<usize>,
    pub omega0: f64,
    pub encoding_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            width: 64,
            d0: None,
            omega0: 30.0,
            encoding_scale: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub l_max: usize,
    pub gamma: MaternParams,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// Fixed penalty weight; `None` selects it by Bayesian optimization.
    pub lambda_c: Option<f64>,
    /// Known noise variance; `None` estimates it from the b=0 volumes.
    pub sigma_e2: Option<f64>,
    pub n_calib: usize,
    /// Calibration grid for s_w^2, as multiples of the plug-in estimate
    /// `tr(W^T R W) / (K r)` of the trained head.
    pub sigma_w2_grid: Vec<f64>,
    /// Calibration grid for s_mu^2, as multiples of s_e^2.
    pub sigma_mu2_grid: Vec<f64>,
    pub solver: PosteriorSolver,
    pub hyperopt: HyperoptConfig,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            l_max: 8,
            gamma: MaternParams::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            lambda_c: None,
            sigma_e2: None,
            n_calib: 64,
            sigma_w2_grid: vec![1e-2, 1e-1, 1.0, 1e1, 1e2],
            sigma_mu2_grid: vec![1e-3, 1e-2, 1e-1, 1.0, 10.0],
            solver: PosteriorSolver::Kronecker,
            hyperopt: HyperoptConfig::default(),
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_max % 2 != 0 {
            return invalid(format!("l_max must be even, got {}", self.l_max));
        }
        self.gamma.validate()?;
        if self.train.iterations == 0 || !(self.train.learning_rate > 0.0) {
            return invalid("training needs iterations >= 1 and a positive learning rate");
        }
        if !(self.train.final_lr_fraction > 0.0 && self.train.final_lr_fraction <= 1.0) {
            return invalid(format!(
                "final_lr_fraction must lie in (0, 1], got {}",
                self.train.final_lr_fraction
            ));
        }
        if let Some(l) = self.lambda_c {
            if !(l >= 0.0) {
                return invalid(format!("lambda_c must be non-negative, got {l}"));
            }
        }
        if self.sigma_w2_grid.is_empty() || self.sigma_mu2_grid.is_empty() {
            return invalid("calibration grids must be non-empty");
        }
        Ok(())
    }

    pub fn arch(&self, d_in: usize) -> FieldArch {
        let k = crate::sphere::harmonic_count(self.l_max) - 1;
        FieldArch {
            d_in,
            d0: self.network.d0.unwrap_or(self.network.width),
            layers: self.network.layers,
            width: self.network.width,
            k,
            omega0: self.network.omega0,
            encoding_scale: self.network.encoding_scale,
        }
    }
}

/// `Phi G` restricted to the non-constant harmonics (M x K): maps ODF
/// coefficients to signal values.
pub fn phi_g(basis: &HarmonicBasis, directions: &[Direction]) -> DMatrix<f64> {
    let fr = FunkRadonSpectrum::new(basis);
    let mut m = basis.anisotropic_matrix(directions);
    for (k, mut col) in m.column_iter_mut().enumerate() {
        col *= fr.inverse[k + 1];
    }
    m
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: NeuralFieldParams,
    pub losses: Vec<f64>,
}

fn cosine_lr(lr0: f64, final_fraction: f64, step: usize, total: usize) -> f64 {
    if total < 2 {
        return lr0;
    }
    let t = step as f64 / (total - 1) as f64;
    lr0 * (final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + (PI * t).cos()))
}

/// Minimizes the penalized objective with Adam.
pub fn train(dataset: &Dataset, config: &EstimatorConfig, lambda_c: f64, seed: u64) -> Result<TrainResult> {
    config.validate()?;
    if dataset.n_voxels() == 0 {
        return invalid("cannot train on an empty dataset");
    }
    let basis = HarmonicBasis::new(config.l_max)?;
    let pg = phi_g(&basis, &dataset.directions);
    let r = prior_precision(&basis, &config.gamma)?;
    let arch = config.arch(dataset.dim());
    let mut params = field::init_params(&arch, rng::derive_seed(seed, &[1]))?;
    let mut opt = OptimizerState::new(params.num_params(), config.train.learning_rate);
    let n = dataset.n_voxels();
    let batch = config.train.batch_size.unwrap_or(n).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = rng::stream(seed, 2);
    let mut cursor = n;
    let mut losses = Vec::with_capacity(config.train.iterations);
    let full = batch == n;
    for step in 0..config.train.iterations {
        let (loss, grad) = if full {
            field::loss_and_grad(&params, &dataset.coords, &dataset.signals, &pg, &r, lambda_c)
        } else {
            if cursor + batch > n {
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + batch];
            cursor += batch;
            let coords = dataset.coords.select_rows(idx);
            let y = dataset.signals.select_columns(idx);
            field::loss_and_grad(&params, &coords, &y, &pg, &r, lambda_c)
        }
        .map_err(|e| match e {
            NodfError::Diverged { loss, .. } => NodfError::Diverged { step, loss },
            other => other,
        })?;
        losses.push(loss.total);
        opt.lr = cosine_lr(config.train.learning_rate, config.train.final_lr_fraction, step, config.train.iterations);
        field::adam_step(&mut opt, &mut params, &grad);
        if !params.is_finite() {
            return Err(NodfError::Diverged { step, loss: f64::NAN });
        }
        if step % 100 == 0 {
            log::debug!("step {step}: loss {:.6e} (data {:.6e})", loss.total, loss.data);
        }
    }
    Ok(TrainResult { params, losses })
}

/// Mean over voxels of the per-voxel sample variance of the b=0 volumes.
pub fn estimate_sigma_e(b0: &DMatrix<f64>) -> Result<f64> {
    let p = b0.ncols();
    if p < 2 {
        return invalid(format!("need at least 2 b=0 volumes per voxel, got {p}"));
    }
    if b0.nrows() == 0 {
        return invalid("no voxels in b=0 data");
    }
    let total: f64 = b0
        .row_iter()
        .map(|row| {
            let m = row.mean();
            row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (p - 1) as f64
        })
        .sum();
    Ok(total / b0.nrows() as f64)
}

#[derive(Debug, Clone)]
enum Factors {
    Kronecker {
        rh_inv: DVector<f64>,
        v: DMatrix<f64>,
        e: DVector<f64>,
        u: DMatrix<f64>,
        d: DVector<f64>,
        /// V^T R^-1/2 X U with X = Phi_G^T Y_c Xi^T.
        xt: DMatrix<f64>,
    },
    Dense {
        /// Lower Cholesky factor of Lambda.
        l: DMatrix<f64>,
    },
}

/// Conditional posterior of the coefficient field given trained features.
#[derive(Debug, Clone)]
pub struct PosteriorState {
    pub params: NeuralFieldParams,
    pub basis: HarmonicBasis,
    /// M x K.
    pub phi_g: DMatrix<f64>,
    /// r x N training features.
    pub xi: DMatrix<f64>,
    /// M x N centered data.
    pub yc: DMatrix<f64>,
    pub prior: PriorPrecision,
    pub gamma: MaternParams,
    pub variances: VarianceParams,
    /// K x r posterior mean of W.
    pub w_bar: DMatrix<f64>,
    factors: Factors,
}

/// Training inputs for [`assemble_posterior`].
pub struct PosteriorInputs<'a> {
    pub params: &'a NeuralFieldParams,
    pub coords: &'a DMatrix<f64>,
    pub signals: &'a DMatrix<f64>,
    pub directions: &'a [Direction],
    pub l_max: usize,
}

impl<'a> PosteriorInputs<'a> {
    pub fn from_dataset(params: &'a NeuralFieldParams, ds: &'a Dataset, l_max: usize) -> Self {
        Self {
            params,
            coords: &ds.coords,
            signals: &ds.signals,
            directions: &ds.directions,
            l_max,
        }
    }
}

fn check_variances(v: &VarianceParams) -> Result<()> {
    if !(v.sigma_e2 > 0.0 && v.sigma_w2 > 0.0 && v.sigma_mu2 >= 0.0)
        || !(v.sigma_e2.is_finite() && v.sigma_w2.is_finite() && v.sigma_mu2.is_finite())
    {
        return invalid(format!("posterior needs s_e^2 > 0, s_w^2 > 0, s_mu^2 >= 0, got {v:?}"));
    }
    Ok(())
}

pub fn assemble_posterior(
    inputs: &PosteriorInputs,
    variances: VarianceParams,
    gamma: &MaternParams,
    solver: PosteriorSolver,
) -> Result<PosteriorState> {
    check_variances(&variances)?;
    let basis = HarmonicBasis::new(inputs.l_max)?;
    let pg = phi_g(&basis, inputs.directions);
    let prior = prior_precision(&basis, gamma)?;
    let xi = field::features(inputs.params, inputs.coords)?;
    assemble_from_parts(inputs.params.clone(), basis, pg, xi, inputs.signals, prior, *gamma, variances, solver)
}

/// Assembly from explicit matrices; `phi_g` may be any M x K design.
#[allow(clippy::too_many_arguments)]
pub fn assemble_from_parts(
    params: NeuralFieldParams,
    basis: HarmonicBasis,
    phi_g: DMatrix<f64>,
    xi: DMatrix<f64>,
    signals: &DMatrix<f64>,
    prior: PriorPrecision,
    gamma: MaternParams,
    variances: VarianceParams,
    solver: PosteriorSolver,
) -> Result<PosteriorState> {
    check_variances(&variances)?;
    let (m, k) = phi_g.shape();
    let r = xi.nrows();
    if signals.nrows() != m || signals.ncols() != xi.ncols() || prior.len() != k || params.width() != r {
        return Err(NodfError::ShapeMismatch(format!(
            "Y {}x{}, Phi_G {m}x{k}, Xi {r}x{}, R {}, network width {}",
            signals.nrows(),
            signals.ncols(),
            xi.ncols(),
            prior.len(),
            params.width()
        )));
    }
    let means = params.head_mu.transpose() * &xi;
    let mut yc = signals.clone();
    for (i, mut col) in yc.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[i]);
    }
    let factors = match solver {
        PosteriorSolver::Kronecker => kronecker_factors(&phi_g, &xi, &yc, &prior)?,
        PosteriorSolver::DenseCholesky => dense_factor(&phi_g, &xi, &prior, &variances)?,
    };
    let mut state = PosteriorState {
        params,
        basis,
        phi_g,
        xi,
        yc,
        prior,
        gamma,
        variances,
        w_bar: DMatrix::zeros(k, r),
        factors,
    };
    state.w_bar = state.compute_w_bar()?;
    Ok(state)
}

fn kronecker_factors(phi_g: &DMatrix<f64>, xi: &DMatrix<f64>, yc: &DMatrix<f64>, prior: &PriorPrecision) -> Result<Factors> {
    let rh_inv = DVector::from_iterator(prior.len(), prior.diag().iter().map(|x| 1.0 / x.sqrt()));
    let mut g = phi_g.transpose() * phi_g;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            g[(i, j)] *= rh_inv[i] * rh_inv[j];
        }
    }
    let ge = SymmetricEigen::new(g);
    let s = xi * xi.transpose();
    let se = SymmetricEigen::new(s);
    let e = ge.eigenvalues.map(|x| x.max(0.0));
    let d = se.eigenvalues.map(|x| x.max(0.0));
    let v = ge.eigenvectors;
    let u = se.eigenvectors;
    let mut x = phi_g.transpose() * yc * xi.transpose();
    for (i, mut row) in x.row_iter_mut().enumerate() {
        row *= rh_inv[i];
    }
    let xt = v.transpose() * x * &u;
    Ok(Factors::Kronecker { rh_inv, v, e, u, d, xt })
}

/// Explicit `rK x rK` precision (column-major vec of the K x r matrix W).
pub fn dense_precision(phi_g: &DMatrix<f64>, xi: &DMatrix<f64>, prior: &PriorPrecision, v: &VarianceParams) -> DMatrix<f64> {
    let k = phi_g.ncols();
    let r = xi.nrows();
    let g = phi_g.transpose() * phi_g;
    let s = xi * xi.transpose();
    let a = v.sigma_e2 / v.sigma_w2;
    let mut lam = DMatrix::zeros(r * k, r * k);
    for s1 in 0..r {
        for s2 in 0..r {
            for k1 in 0..k {
                for k2 in 0..k {
                    let mut val = s[(s1, s2)] * g[(k1, k2)];
                    if s1 == s2 && k1 == k2 {
                        val += a * prior.diag()[k1];
                    }
                    lam[(k1 + k * s1, k2 + k * s2)] = val / v.sigma_e2;
                }
            }
        }
    }
    lam
}

fn dense_factor(phi_g: &DMatrix<f64>, xi: &DMatrix<f64>, prior: &PriorPrecision, v: &VarianceParams) -> Result<Factors> {
    let lam = dense_precision(phi_g, xi, prior, v);
    let n = lam.nrows();
    if let Some(ch) = Cholesky::new(lam.clone()) {
        return Ok(Factors::Dense { l: ch.l() });
    }
    let jitter = 1e-10 * lam.trace() / n as f64;
    log::warn!("precision factorization failed; retrying with diagonal jitter {jitter:.3e}");
    let mut lj = lam.clone();
    for i in 0..n {
        lj[(i, i)] += jitter;
    }
    match Cholesky::new(lj) {
        Some(ch) => Ok(Factors::Dense { l: ch.l() }),
        None => {
            let diag = lam.diagonal();
            Err(NodfError::IllConditioned {
                reason: "Cholesky factorization of the posterior precision failed".into(),
                condition: diag.max() / diag.min().max(f64::MIN_POSITIVE),
            })
        }
    }
}

fn solve_lower_transpose(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    l.tr_solve_lower_triangular_mut(b);
}

fn solve_lower(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    l.solve_lower_triangular_mut(b);
}

/// Posterior of `c(v)` at one coordinate.
#[derive(Debug, Clone)]
pub struct CoeffPosterior {
    /// Features at v.
    pub xi: DVector<f64>,
    /// Signal mean channel `mu^T xi(v)`.
    pub mean_channel: f64,
    /// Posterior mean of the K non-constant ODF coefficients.
    pub mean: DVector<f64>,
    /// Posterior covariance (K x K).
    pub cov: DMatrix<f64>,
}

impl PosteriorState {
    pub fn k(&self) -> usize {
        self.phi_g.ncols()
    }

    pub fn r(&self) -> usize {
        self.xi.nrows()
    }

    pub fn solver(&self) -> PosteriorSolver {
        match self.factors {
            Factors::Kronecker { .. } => PosteriorSolver::Kronecker,
            Factors::Dense { .. } => PosteriorSolver::DenseCholesky,
        }
    }

    fn a(&self) -> f64 {
        self.variances.sigma_e2 / self.variances.sigma_w2
    }

    fn compute_w_bar(&self) -> Result<DMatrix<f64>> {
        let (k, r) = (self.k(), self.r());
        match &self.factors {
            Factors::Kronecker { rh_inv, v, e, u, d, xt } => {
                let a = self.a();
                let mut inner = xt.clone();
                for s in 0..r {
                    for kk in 0..k {
                        inner[(kk, s)] /= a + e[kk] * d[s];
                    }
                }
                let mut w = v * inner * u.transpose();
                for (i, mut row) in w.row_iter_mut().enumerate() {
                    row *= rh_inv[i];
                }
                Ok(w)
            }
            Factors::Dense { l } => {
                let x = self.phi_g.transpose() * &self.yc * self.xi.transpose() / self.variances.sigma_e2;
                let mut b = DMatrix::from_column_slice(k * r, 1, x.as_slice());
                solve_lower(l, &mut b);
                solve_lower_transpose(l, &mut b);
                Ok(DMatrix::from_column_slice(k, r, b.as_slice()))
            }
        }
    }

    /// Explicit posterior precision (small problems only).
    pub fn precision_matrix(&self) -> DMatrix<f64> {
        dense_precision(&self.phi_g, &self.xi, &self.prior, &self.variances)
    }

    /// Cached projection `Lambda^-1 [Xi^T (x) Phi_G]^T vec(Y_c)` (length rK).
    pub fn projection(&self) -> DVector<f64> {
        DVector::from_column_slice(self.w_bar.as_slice()) * self.variances.sigma_e2
    }

    /// The same posterior under different variance parameters. Cheap for the
    /// Kronecker solver; the dense solver refactorizes.
    pub fn with_variances(&self, variances: VarianceParams) -> Result<PosteriorState> {
        check_variances(&variances)?;
        let mut next = self.clone();
        next.variances = variances;
        if let Factors::Dense { .. } = next.factors {
            next.factors = dense_factor(&self.phi_g, &self.xi, &self.prior, &variances)?;
        }
        next.w_bar = next.compute_w_bar()?;
        Ok(next)
    }

    pub fn features_at(&self, v: &[f64]) -> Result<DVector<f64>> {
        field::feature_vector(&self.params, v)
    }

    /// Mean and covariance of the non-constant ODF coefficients at features `xi`.
    pub fn coeffs_from_features(&self, xi: &DVector<f64>) -> CoeffPosterior {
        let mean = &self.w_bar * xi;
        let mean_channel = self.params.head_mu.dot(xi);
        let cov = match &self.factors {
            Factors::Kronecker { .. } => {
                let (a_mat, w) = self.kron_cov_parts(xi);
                let mut scaled = a_mat.clone();
                for (k, mut col) in scaled.column_iter_mut().enumerate() {
                    col *= w[k];
                }
                let c = scaled * a_mat.transpose() * self.variances.sigma_e2;
                (&c + c.transpose()) * 0.5
            }
            Factors::Dense { l } => {
                let (k, r) = (self.k(), self.r());
                let mut b = DMatrix::zeros(k * r, k);
                for s in 0..r {
                    for kk in 0..k {
                        b[(kk + k * s, kk)] = xi[s];
                    }
                }
                solve_lower(l, &mut b);
                let c = b.transpose() * &b;
                (&c + c.transpose()) * 0.5
            }
        };
        CoeffPosterior {
            xi: xi.clone(),
            mean_channel,
            mean,
            cov,
        }
    }

    /// `(R^-1/2 V, w)` with `Cov = s_e^2 A diag(w) A^T`.
    fn kron_cov_parts(&self, xi: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        match &self.factors {
            Factors::Kronecker { rh_inv, v, e, u, d, .. } => {
                let a = self.a();
                let eta = u.transpose() * xi;
                let w = DVector::from_fn(self.k(), |k, _| {
                    (0..self.r()).map(|s| eta[s] * eta[s] / (a + d[s] * e[k])).sum::<f64>()
                });
                let mut am = v.clone();
                for (i, mut row) in am.row_iter_mut().enumerate() {
                    row *= rh_inv[i];
                }
                (am, w)
            }
            Factors::Dense { .. } => unreachable!("kron_cov_parts on dense factors"),
        }
    }

    pub fn posterior_coeffs(&self, v: &[f64]) -> Result<CoeffPosterior> {
        Ok(self.coeffs_from_features(&self.features_at(v)?))
    }

    /// Pointwise ODF posterior mean and variance at `directions`.
    pub fn posterior_odf(&self, v: &[f64], directions: &[Direction]) -> Result<(Vec<f64>, Vec<f64>)> {
        let phi = self.basis.anisotropic_matrix(directions);
        Ok(self.odf_on_design(&self.features_at(v)?, &phi))
    }

    /// As [`posterior_odf`](Self::posterior_odf) with a precomputed anisotropic design.
    pub fn odf_on_design(&self, xi: &DVector<f64>, phi: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
        let post = self.coeffs_from_features(xi);
        let base = MEAN_CHANNEL_ODF_SCALE * post.mean_channel;
        let mean = phi * &post.mean;
        let pc = phi * &post.cov;
        let mu_var = MEAN_CHANNEL_ODF_SCALE.powi(2) * self.variances.sigma_mu2;
        let means = mean.iter().map(|m| m + base).collect();
        let vars = (0..phi.nrows())
            .map(|i| mu_var + pc.row(i).dot(&phi.row(i)).max(0.0))
            .collect();
        (means, vars)
    }

    /// Full ODF coefficient vector (length K_total) for a mean-channel value and anisotropic part.
    pub fn full_coeffs(&self, mean_channel: f64, aniso: &DVector<f64>) -> DVector<f64> {
        let mut c = DVector::zeros(aniso.len() + 1);
        c[0] = MEAN_CHANNEL_ODF_SCALE * mean_channel * 2.0 * PI.sqrt();
        c.rows_mut(1, aniso.len()).copy_from(aniso);
        c
    }

    /// Posterior-mean ODF coefficients (length K_total) at `v`.
    pub fn mean_coeffs(&self, v: &[f64]) -> Result<DVector<f64>> {
        let xi = self.features_at(v)?;
        Ok(self.full_coeffs(self.params.head_mu.dot(&xi), &(&self.w_bar * &xi)))
    }

    /// Draws of the full ODF coefficient vector at `v`: the anisotropic part
    /// from the coefficient posterior, the mean channel from `N(mu^T xi, s_mu^2)`.
    pub fn sample_odf(&self, v: &[f64], n_samples: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
        if n_samples == 0 {
            return invalid("n_samples must be >= 1");
        }
        let post = self.posterior_coeffs(v)?;
        let k = self.k();
        let transform = match &self.factors {
            Factors::Kronecker { .. } => {
                let (mut a_mat, w) = self.kron_cov_parts(&post.xi);
                let se = self.variances.sigma_e2.sqrt();
                for (kk, mut col) in a_mat.column_iter_mut().enumerate() {
                    col *= se * w[kk].max(0.0).sqrt();
                }
                a_mat
            }
            Factors::Dense { .. } => {
                let eig = SymmetricEigen::new(post.cov.clone());
                let mut q = eig.eigenvectors;
                for (kk, mut col) in q.column_iter_mut().enumerate() {
                    col *= eig.eigenvalues[kk].max(0.0).sqrt();
                }
                q
            }
        };
        let mut r = rng::seeded(seed);
        let sd_mu = self.variances.sigma_mu2.sqrt();
        Ok((0..n_samples)
            .map(|_| {
                let z = DVector::from_fn(k, |_, _| StandardNormal.sample(&mut r));
                let zm: f64 = StandardNormal.sample(&mut r);
                let aniso = &post.mean + &transform * z;
                self.full_coeffs(post.mean_channel + sd_mu * zm, &aniso)
            })
            .collect())
    }

    /// One joint draw of the coefficient head `W` from its posterior (K x r).
    pub fn sample_field(&self, seed: u64) -> DMatrix<f64> {
        let (k, r) = (self.k(), self.r());
        let mut rg = rng::seeded(seed);
        let z = DMatrix::from_fn(k, r, |_, _| StandardNormal.sample(&mut rg));
        match &self.factors {
            Factors::Kronecker { rh_inv, v, e, u, d, .. } => {
                let a = self.a();
                let mut inner = z;
                for s in 0..r {
                    for kk in 0..k {
                        inner[(kk, s)] /= (a + e[kk] * d[s]).sqrt();
                    }
                }
                let mut w = v * inner * u.transpose() * self.variances.sigma_e2.sqrt();
                for (i, mut row) in w.row_iter_mut().enumerate() {
                    row *= rh_inv[i];
                }
                w + &self.w_bar
            }
            Factors::Dense { l } => {
                let mut b = DMatrix::from_column_slice(k * r, 1, z.as_slice());
                solve_lower_transpose(l, &mut b);
                DMatrix::from_column_slice(k, r, b.as_slice()) + &self.w_bar
            }
        }
    }

    /// Log density of signals `y` at `v` under the conditional posterior predictive.
    pub fn predictive_loglik(&self, y: &DVector<f64>, v: &[f64]) -> Result<f64> {
        let xi = self.features_at(v)?;
        self.predictive_loglik_features(y, &xi)
    }

    pub fn predictive_loglik_features(&self, y: &DVector<f64>, xi: &DVector<f64>) -> Result<f64> {
        let m = self.phi_g.nrows();
        if y.len() != m {
            return Err(NodfError::ShapeMismatch(format!("y has {} entries, expected {m}", y.len())));
        }
        let post = self.coeffs_from_features(xi);
        let mut mean = &self.phi_g * &post.mean;
        mean.add_scalar_mut(post.mean_channel);
        let mut cov = &self.phi_g * &post.cov * self.phi_g.transpose();
        cov.add_scalar_mut(self.variances.sigma_mu2);
        for i in 0..m {
            cov[(i, i)] += self.variances.sigma_e2;
        }
        gaussian_logpdf(y, &mean, cov)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        field::save_params(&self.params, dir, "params")?;
        let mut blob = TensorBlob::new();
        blob.push_matrix("phi_g", &self.phi_g);
        blob.push_matrix("xi", &self.xi);
        blob.push_matrix("yc", &self.yc);
        blob.push_matrix("w_bar", &self.w_bar);
        blob.push("prior", vec![self.prior.len()], self.prior.diag().to_vec());
        match &self.factors {
            Factors::Kronecker { rh_inv, v, e, u, d, xt } => {
                blob.push("rh_inv", vec![rh_inv.len()], rh_inv.as_slice().to_vec());
                blob.push_matrix("v", v);
                blob.push("e", vec![e.len()], e.as_slice().to_vec());
                blob.push_matrix("u", u);
                blob.push("d", vec![d.len()], d.as_slice().to_vec());
                blob.push_matrix("xt", xt);
            }
            Factors::Dense { l } => blob.push_matrix("l", l),
        }
        blob.meta = serde_json::to_value(StateMeta {
            l_max: self.basis.l_max(),
            gamma: self.gamma,
            variances: self.variances,
            solver: self.solver(),
        })?;
        blob.save(dir, "posterior")
    }

    pub fn load(dir: &Path) -> Result<PosteriorState> {
        let params = field::load_params(dir, "params")?;
        let blob = TensorBlob::load(dir, "posterior")?;
        let meta: StateMeta = serde_json::from_value(blob.meta.clone())?;
        let vec_of = |name: &str| -> Result<DVector<f64>> { Ok(DVector::from_vec(blob.get(name)?.2.clone())) };
        let factors = match meta.solver {
            PosteriorSolver::Kronecker => Factors::Kronecker {
                rh_inv: vec_of("rh_inv")?,
                v: blob.matrix("v")?,
                e: vec_of("e")?,
                u: blob.matrix("u")?,
                d: vec_of("d")?,
                xt: blob.matrix("xt")?,
            },
            PosteriorSolver::DenseCholesky => Factors::Dense { l: blob.matrix("l")? },
        };
        Ok(PosteriorState {
            params,
            basis: HarmonicBasis::new(meta.l_max)?,
            phi_g: blob.matrix("phi_g")?,
            xi: blob.matrix("xi")?,
            yc: blob.matrix("yc")?,
            prior: PriorPrecision::from_diag(blob.get("prior")?.2.clone())?,
            gamma: meta.gamma,
            variances: meta.variances,
            w_bar: blob.matrix("w_bar")?,
            factors,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StateMeta {
    l_max: usize,
    gamma: MaternParams,
    variances: VarianceParams,
    solver: PosteriorSolver,
}

/// Multivariate normal log density via Cholesky.
pub fn gaussian_logpdf(y: &DVector<f64>, mean: &DVector<f64>, cov: DMatrix<f64>) -> Result<f64> {
    let m = y.len();
    let ch = Cholesky::new(cov).ok_or_else(|| NodfError::IllConditioned {
        reason: "predictive covariance is not positive definite".into(),
        condition: f64::INFINITY,
    })?;
    let diff = y - mean;
    let sol = ch.l().solve_lower_triangular(&diff).expect("non-singular Cholesky factor");
    let logdet: f64 = ch.l().diagonal().iter().map(|x| x.ln()).sum::<f64>() * 2.0;
    Ok(-0.5 * (sol.norm_squared() + logdet + m as f64 * (2.0 * PI).ln()))
}

/// Symmetric `(1 - alpha)` credible interval at `(v, p)`.
pub fn credible_interval(state: &PosteriorState, v: &[f64], p: &Direction, alpha: f64) -> Result<(f64, f64)> {
    let (m, var) = state.posterior_odf(v, std::slice::from_ref(p))?;
    interval_from_moments(m[0], var[0], alpha)
}

pub fn interval_from_moments(mean: f64, var: f64, alpha: f64) -> Result<(f64, f64)> {
    let z = normal_quantile(alpha)?;
    let h = z * var.max(0.0).sqrt();
    Ok((mean - h, mean + h))
}

/// `z_{1 - alpha/2}` of the standard normal.
pub fn normal_quantile(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    Ok(Normal::standard().inverse_cdf(1.0 - alpha / 2.0))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub sigma_w2: f64,
    pub sigma_mu2: f64,
    /// (s_w^2, s_mu^2, summed log-likelihood) per grid cell.
    pub table: Vec<(f64, f64, f64)>,
    pub evaluations_per_voxel: usize,
}

/// Grid search of `(s_w^2, s_mu^2)` maximizing the summed predictive
/// log-likelihood of held-out voxels.
pub fn calibrate(
    state: &PosteriorState,
    calib_coords: &DMatrix<f64>,
    calib_signals: &DMatrix<f64>,
    sigma_w2_grid: &[f64],
    sigma_mu2_grid: &[f64],
) -> Result<CalibrationResult> {
    if calib_coords.nrows() == 0 {
        return invalid("calibration set is empty");
    }
    if sigma_w2_grid.is_empty() || sigma_mu2_grid.is_empty() {
        return invalid("calibration grids must be non-empty");
    }
    let feats = field::features(&state.params, calib_coords)?;
    let mut table = Vec::with_capacity(sigma_w2_grid.len() * sigma_mu2_grid.len());
    let mut best: Option<(f64, f64, f64)> = None;
    let mut evaluations = 0usize;
    for &sw in sigma_w2_grid {
        for &smu in sigma_mu2_grid {
            let cand = state.with_variances(VarianceParams {
                sigma_e2: state.variances.sigma_e2,
                sigma_w2: sw,
                sigma_mu2: smu,
            })?;
            let mut total = 0.0;
            for i in 0..calib_coords.nrows() {
                let y = calib_signals.column(i).into_owned();
                total += cand.predictive_loglik_features(&y, &feats.column(i).into_owned())?;
                evaluations += 1;
            }
            table.push((sw, smu, total));
            if best.is_none_or(|b| total > b.2) {
                best = Some((sw, smu, total));
            }
        }
    }
    let (sigma_w2, sigma_mu2, _) = best.expect("non-empty grid");
    Ok(CalibrationResult {
        sigma_w2,
        sigma_mu2,
        table,
        evaluations_per_voxel: evaluations / calib_coords.nrows(),
    })
}

/// Plug-in prior scale of a trained head: `tr(W^T R W) / (K r)`.
pub fn plug_in_sigma_w2(params: &NeuralFieldParams, prior: &PriorPrecision) -> f64 {
    let w = &params.head_w;
    let mut total = 0.0;
    for (k, rk) in prior.diag().iter().enumerate() {
        total += rk * w.row(k).norm_squared();
    }
    total / w.len() as f64
}

/// Seeded split of `0..n` into (calibration, training) index sets.
pub fn split_calibration(n: usize, n_calib: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_calib == 0 || n_calib >= n {
        return invalid(format!("calibration size {n_calib} must lie in [1, {n})"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, 7));
    let mut calib = idx[..n_calib].to_vec();
    let mut train = idx[n_calib..].to_vec();
    calib.sort_unstable();
    train.sort_unstable();
    Ok((calib, train))
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub state: PosteriorState,
    pub lambda_c: f64,
    pub sigma_e2: f64,
    pub calibration: CalibrationResult,
    pub calib_idx: Vec<usize>,
    pub train_idx: Vec<usize>,
    pub losses: Vec<f64>,
    pub trials: Vec<TrialRecord>,
}

/// Partition, select lambda_c, train, calibrate variances, and condition on the full data.
pub fn fit_pipeline(dataset: &Dataset, config: &EstimatorConfig, seed: u64) -> Result<FitOutput> {
    config.validate()?;
    let n = dataset.n_voxels();
    let (calib_idx, train_idx) = split_calibration(n, config.n_calib, rng::derive_seed(seed, &[10]))?;
    let train_set = dataset.subset(&train_idx);
    let calib_set = dataset.subset(&calib_idx);

    let sigma_e2 = match (config.sigma_e2, &dataset.b0) {
        (Some(s), _) => s,
        (None, Some(b0)) => estimate_sigma_e(b0)?,
        (None, None) => return invalid("dataset has no b=0 volumes and no noise variance was given"),
    };

    let mut config = config.clone();
    let (lambda_c, trials) = match config.lambda_c {
        Some(l) => (l, Vec::new()),
        None => {
            let out = hyperopt::bo_loop(&train_set, &config, sigma_e2, rng::derive_seed(seed, &[11]))?;
            if let Some(g) = out.best_config().gamma {
                config.gamma = g;
            }
            (out.best_lambda_c(), out.trials)
        }
    };
    let config = &config;

    let trained = train(&train_set, config, lambda_c, rng::derive_seed(seed, &[12]))?;
    let inputs = PosteriorInputs::from_dataset(&trained.params, &train_set, config.l_max);
    let basis = HarmonicBasis::new(config.l_max)?;
    let prior = prior_precision(&basis, &config.gamma)?;
    let sw_hat = plug_in_sigma_w2(&trained.params, &prior).max(f64::MIN_POSITIVE);
    let sw_grid: Vec<f64> = config.sigma_w2_grid.iter().map(|m| m * sw_hat).collect();
    let smu_grid: Vec<f64> = config.sigma_mu2_grid.iter().map(|m| m * sigma_e2).collect();
    let initial = VarianceParams {
        sigma_e2,
        sigma_w2: sw_hat,
        sigma_mu2: smu_grid[0],
    };
    let train_state = assemble_posterior(&inputs, initial, &config.gamma, config.solver)?;
    let calibration = calibrate(&train_state, &calib_set.coords, &calib_set.signals, &sw_grid, &smu_grid)?;
    log::info!(
        "lambda_c {lambda_c:.3e}, s_e^2 {sigma_e2:.3e}, s_w^2 {:.3e}, s_mu^2 {:.3e}",
        calibration.sigma_w2,
        calibration.sigma_mu2
    );

    let variances = VarianceParams {
        sigma_e2,
        sigma_w2: calibration.sigma_w2,
        sigma_mu2: calibration.sigma_mu2,
    };
    let full_inputs = PosteriorInputs::from_dataset(&trained.params, dataset, config.l_max);
    let state = assemble_posterior(&full_inputs, variances, &config.gamma, config.solver)?;
    Ok(FitOutput {
        state,
        lambda_c,
        sigma_e2,
        calibration,
        calib_idx,
        train_idx,
        losses: trained.losses,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng as _;

    /// Random tiny problem with an arbitrary design in place of Phi_G.
    pub(crate) fn tiny_state(seed: u64, solver: PosteriorSolver) -> PosteriorState {
        let mut r = rng::seeded(seed);
        let n = r.random_range(1..=4);
        let m = r.random_range(2..=8);
        let k = r.random_range(1..=6);
        let rr = r.random_range(1..=3);
        let arch = FieldArch {
            d_in: 2,
            d0: 4,
            layers: 1,
            width: rr,
            k,
            omega0: 2.0,
            encoding_scale: 2.0,
        };
        let params = field::init_params(&arch, seed).unwrap();
        let coords = DMatrix::from_fn(n, 2, |i, j| -0.9 + 0.5 * i as f64 + 0.3 * j as f64);
        let xi = field::features(&params, &coords).unwrap();
        let phi = DMatrix::from_fn(m, k, |_, _| r.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(m, n, |_, _| r.random_range(-1.0..1.0));
        let prior = PriorPrecision::from_diag((0..k).map(|_| r.random_range(0.5..3.0)).collect()).unwrap();
        let v = VarianceParams {
            sigma_e2: r.random_range(0.05..0.5),
            sigma_w2: r.random_range(0.5..3.0),
            sigma_mu2: 0.01,
        };
        assemble_from_parts(params, HarmonicBasis::new(8).unwrap(), phi, xi, &y, prior, MaternParams::default(), v, solver)
            .unwrap()
    }

    /// Covariance-form Gaussian conditioning of vec(W) on vec(Y_c).
    pub(crate) fn dense_oracle(state: &PosteriorState) -> (DVector<f64>, DMatrix<f64>) {
        let (k, r) = (state.k(), state.r());
        let (m, n) = state.yc.shape();
        let mut prior_cov = DMatrix::zeros(k * r, k * r);
        for s in 0..r {
            for kk in 0..k {
                prior_cov[(kk + k * s, kk + k * s)] = state.variances.sigma_w2 / state.prior.diag()[kk];
            }
        }
        // vec(Phi_G W Xi) = (Xi^T kron Phi_G) vec(W)
        let a = state.xi.transpose().kronecker(&state.phi_g);
        assert_eq!(a.shape(), (m * n, k * r));
        let mut s = &a * &prior_cov * a.transpose();
        for i in 0..m * n {
            s[(i, i)] += state.variances.sigma_e2;
        }
        let s_inv = s.try_inverse().unwrap();
        let y = DVector::from_column_slice(state.yc.as_slice());
        let gain = &prior_cov * a.transpose() * s_inv;
        let mean = &gain * y;
        let cov = &prior_cov - gain * a * &prior_cov;
        (mean, cov)
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn sigma_e_examples() {
        assert_eq!(estimate_sigma_e(&DMatrix::from_element(3, 4, 2.0)).unwrap(), 0.0);
        assert_relative_eq!(estimate_sigma_e(&DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 3.0])).unwrap(), 4.0 / 3.0);
        let b = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 4.0, 0.5, 0.1, 0.9]);
        let mut shifted = b.clone();
        shifted.row_mut(0).add_scalar_mut(10.0);
        shifted.row_mut(1).add_scalar_mut(-3.0);
        assert_relative_eq!(estimate_sigma_e(&b).unwrap(), estimate_sigma_e(&shifted).unwrap(), epsilon = 1e-12);
        assert!(estimate_sigma_e(&DMatrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn both_solvers_match_dense_conditioning() {
        for seed in 0..20 {
            for solver in [PosteriorSolver::Kronecker, PosteriorSolver::DenseCholesky] {
                let st = tiny_state(seed, solver);
                let (mean, cov) = dense_oracle(&st);
                let w = DVector::from_column_slice(st.w_bar.as_slice());
                assert!((&w - &mean).norm() <= 1e-8 * mean.norm().max(1e-12), "seed {seed} {solver:?}");
                let v = [0.1, -0.2];
                let post = st.posterior_coeffs(&v).unwrap();
                let xi = &post.xi;
                let k = st.k();
                let sel = xi.transpose().kronecker(&DMatrix::<f64>::identity(k, k));
                let oracle_cov = &sel * &cov * sel.transpose();
                let oracle_mean = &sel * &mean;
                assert!(rel_err(&post.cov, &oracle_cov) < 1e-8, "seed {seed} {solver:?}");
                assert!((&post.mean - &oracle_mean).norm() <= 1e-8 * oracle_mean.norm().max(1e-12));
            }
        }
    }

    #[test]
    fn precision_is_symmetric_and_matches_kronecker_products() {
        let st = tiny_state(3, PosteriorSolver::Kronecker);
        let lam = st.precision_matrix();
        assert!((&lam - lam.transpose()).abs().max() < 1e-10);
        let k = st.k();
        let r = st.r();
        let v = st.variances;
        let rmat = DMatrix::from_diagonal(&DVector::from_column_slice(st.prior.diag()));
        let oracle = (DMatrix::<f64>::identity(r, r).kronecker(&rmat) * (v.sigma_e2 / v.sigma_w2)
            + (&st.xi * st.xi.transpose()).kronecker(&(st.phi_g.transpose() * &st.phi_g)))
            / v.sigma_e2;
        assert!((&lam - oracle).abs().max() < 1e-10);
        assert_eq!(lam.nrows(), r * k);
    }

    #[test]
    fn huge_prior_variance_with_no_features_stays_spd() {
        let mut st = tiny_state(5, PosteriorSolver::DenseCholesky);
        st.xi.fill(0.0);
        let st = assemble_from_parts(
            st.params.clone(),
            st.basis.clone(),
            st.phi_g.clone(),
            st.xi.clone(),
            &st.yc,
            st.prior.clone(),
            st.gamma,
            VarianceParams {
                sigma_e2: 0.1,
                sigma_w2: 1e12,
                sigma_mu2: 0.0,
            },
            PosteriorSolver::DenseCholesky,
        )
        .unwrap();
        assert!(Cholesky::new(st.precision_matrix()).is_some());
    }

    #[test]
    fn coefficient_covariance_is_psd_and_odf_consistent() {
        let st = tiny_state(8, PosteriorSolver::Kronecker);
        let post = st.posterior_coeffs(&[0.3, 0.4]).unwrap();
        let eig = SymmetricEigen::new(post.cov.clone());
        assert!(eig.eigenvalues.min() >= -1e-10);
        // Contract with an explicit vector standing in for phi(p).
        let phi = DMatrix::from_fn(3, st.k(), |i, j| ((i + 1) * (j + 2)) as f64 * 0.1);
        let (means, vars) = st.odf_on_design(&post.xi, &phi);
        for i in 0..3 {
            let row = phi.row(i).transpose();
            let expected_var = (row.transpose() * &post.cov * &row)[(0, 0)] + 4.0 * PI * PI * st.variances.sigma_mu2;
            assert_relative_eq!(vars[i], expected_var, epsilon = 1e-10);
            assert_relative_eq!(means[i], row.dot(&post.mean) + 2.0 * PI * post.mean_channel, epsilon = 1e-10);
            assert!(vars[i] >= st.variances.sigma_mu2);
        }
    }

    #[test]
    fn shrinkage_as_prior_variance_vanishes() {
        let st = tiny_state(11, PosteriorSolver::Kronecker);
        let mut v = st.variances;
        v.sigma_w2 = 1e-12;
        let small = st.with_variances(v).unwrap();
        assert!(small.w_bar.norm() < 1e-8 * st.w_bar.norm().max(1.0));
    }

    #[test]
    fn adding_a_voxel_does_not_increase_variance() {
        let st = tiny_state(13, PosteriorSolver::Kronecker);
        let v = [0.25, -0.35];
        let xi_v = st.features_at(&v).unwrap();
        let before = st.coeffs_from_features(&xi_v).cov;
        let n = st.xi.ncols();
        let mut xi = st.xi.clone().insert_column(n, 0.0);
        xi.set_column(n, &xi_v);
        let y = st.yc.clone().insert_column(n, 0.1);
        let after_state = assemble_from_parts(
            st.params.clone(),
            st.basis.clone(),
            st.phi_g.clone(),
            xi,
            &y,
            st.prior.clone(),
            st.gamma,
            st.variances,
            PosteriorSolver::Kronecker,
        )
        .unwrap();
        let after = after_state.coeffs_from_features(&xi_v).cov;
        let diff = SymmetricEigen::new(&before - &after).eigenvalues;
        assert!(diff.min() >= -1e-10);
    }

    #[test]
    fn interval_examples() {
        let (lo, hi) = interval_from_moments(1.0, 4.0, 0.05).unwrap();
        assert_relative_eq!(hi - 1.0, 1.959_963_984_540_054 * 2.0, epsilon = 1e-9);
        assert_relative_eq!(1.0 - lo, hi - 1.0, epsilon = 1e-12);
        assert_eq!(interval_from_moments(3.0, 0.0, 0.05).unwrap(), (3.0, 3.0));
        let w1 = interval_from_moments(0.0, 1.0, 0.01).unwrap().1;
        let w2 = interval_from_moments(0.0, 1.0, 0.1).unwrap().1;
        assert!(w1 > w2);
        assert!(normal_quantile(0.0).is_err());
    }

    #[test]
    fn samples_match_posterior_moments() {
        let st = tiny_state(4, PosteriorSolver::Kronecker);
        let v = [0.2, 0.1];
        let post = st.posterior_coeffs(&v).unwrap();
        let n = 100_000;
        let draws = st.sample_odf(&v, n, 77).unwrap();
        assert_eq!(draws, st.sample_odf(&v, n, 77).unwrap());
        let k = st.k();
        let mut mean = DVector::zeros(k);
        for d in &draws {
            mean += d.rows(1, k);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(k, k);
        for d in &draws {
            let c = d.rows(1, k) - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        assert!((&mean - &post.mean).norm() <= 0.01 * post.mean.norm() + 3.0 * (post.cov.trace() / n as f64).sqrt());
        assert!(rel_err(&cov, &post.cov) < 0.05);
        let m0: f64 = draws.iter().map(|d| d[0]).sum::<f64>() / n as f64;
        let expected0 = 2.0 * PI * post.mean_channel * 2.0 * PI.sqrt();
        assert!((m0 - expected0).abs() < 4.0 * 2.0 * PI * 2.0 * PI.sqrt() * (st.variances.sigma_mu2 / n as f64).sqrt());
    }

    #[test]
    fn field_samples_have_posterior_covariance() {
        let st = tiny_state(6, PosteriorSolver::Kronecker);
        let dense = st.with_variances(st.variances).unwrap();
        let (_, cov) = dense_oracle(&dense);
        let n = 40_000;
        let kr = st.k() * st.r();
        let mut acc = DMatrix::zeros(kr, kr);
        for s in 0..n {
            let w = st.sample_field(s as u64) - &st.w_bar;
            let v = DVector::from_column_slice(w.as_slice());
            acc += &v * v.transpose();
        }
        acc /= n as f64;
        assert!(rel_err(&acc, &cov) < 0.05);
    }

    #[test]
    fn predictive_loglik_matches_generic_density() {
        let st = tiny_state(9, PosteriorSolver::DenseCholesky);
        let v = [0.05, 0.15];
        let post = st.posterior_coeffs(&v).unwrap();
        let m = st.phi_g.nrows();
        let mut mean = &st.phi_g * &post.mean;
        mean.add_scalar_mut(post.mean_channel);
        let mut cov = &st.phi_g * &post.cov * st.phi_g.transpose();
        cov.add_scalar_mut(st.variances.sigma_mu2);
        cov += DMatrix::<f64>::identity(m, m) * st.variances.sigma_e2;
        let y = DVector::from_fn(m, |i, _| 0.1 * i as f64 - 0.2);
        let inv = cov.clone().try_inverse().unwrap();
        let diff = &y - &mean;
        let oracle = -0.5 * ((diff.transpose() * inv * &diff)[(0, 0)] + cov.determinant().ln() + m as f64 * (2.0 * PI).ln());
        assert_relative_eq!(st.predictive_loglik(&y, &v).unwrap(), oracle, epsilon = 1e-8);
        let at_mode = st.predictive_loglik(&mean, &v).unwrap();
        assert!(at_mode > st.predictive_loglik(&y, &v).unwrap());

        // Independent noise only.
        let iid = gaussian_logpdf(&y, &DVector::zeros(m), DMatrix::identity(m, m) * 0.5).unwrap();
        let direct: f64 = y.iter().map(|yi| -0.5 * (yi * yi / 0.5 + (2.0 * PI * 0.5).ln())).sum();
        assert_relative_eq!(iid, direct, epsilon = 1e-12);
    }

    #[test]
    fn calibration_examples() {
        let st = tiny_state(10, PosteriorSolver::Kronecker);
        let m = st.phi_g.nrows();
        let coords = DMatrix::from_row_slice(2, 2, &[0.33, 0.11, -0.4, 0.6]);
        let y = DMatrix::from_fn(m, 2, |i, j| 0.05 * (i + j) as f64);
        let one = calibrate(&st, &coords, &y, &[2.0], &[0.3]).unwrap();
        assert_eq!((one.sigma_w2, one.sigma_mu2), (2.0, 0.3));
        let grid = [0.1, 0.5, 1.0, 5.0, 10.0];
        let res = calibrate(&st, &coords, &y, &grid, &grid).unwrap();
        assert_eq!(res.evaluations_per_voxel, 25);
        let best = res.table.iter().find(|t| t.0 == res.sigma_w2 && t.1 == res.sigma_mu2).unwrap().2;
        assert!(res.table.iter().all(|t| t.2 <= best));
        assert!(calibrate(&st, &DMatrix::zeros(0, 2), &DMatrix::zeros(m, 0), &grid, &grid).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        for solver in [PosteriorSolver::Kronecker, PosteriorSolver::DenseCholesky] {
            let st = tiny_state(2, solver);
            let dir = tempfile::tempdir().unwrap();
            st.save(dir.path()).unwrap();
            let back = PosteriorState::load(dir.path()).unwrap();
            let v = [0.4, -0.1];
            let a = st.posterior_coeffs(&v).unwrap();
            let b = back.posterior_coeffs(&v).unwrap();
            assert_eq!(a.mean, b.mean);
            assert_eq!(a.cov, b.cov);
        }
    }
}
