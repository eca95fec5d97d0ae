//! Bayesian optimization of the penalty weight (and optionally the Matérn
//! prior parameters) against held-out data log-likelihood.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::dataset::Dataset;
use crate::error::{invalid, NodfError, Result};
use crate::estimator::{self, EstimatorConfig};
use crate::field;
use crate::prior::MaternParams;
use crate::rng;
use crate::sphere::HarmonicBasis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperoptConfig {
    /// Training fraction of each train/test split.
    pub p: f64,
    pub n_init: usize,
    pub max_trials: usize,
    pub log10_lambda_box: [f64; 2],
    /// Also search (nu, rho) over the boxes below.
    pub tune_gamma: bool,
    pub nu_box: [f64; 2],
    pub rho_box: [f64; 2],
    pub n_candidates: usize,
    /// Training iterations per trial; `None` uses the main training schedule.
    pub trial_iterations: Option<usize>,
}

impl Default for HyperoptConfig {
    fn default() -> Self {
        Self {
            p: 0.9,
            n_init: 5,
            max_trials: 20,
            log10_lambda_box: [-6.0, 2.0],
            tune_gamma: false,
            nu_box: [0.5, 3.0],
            rho_box: [0.1, 2.0],
            n_candidates: 1024,
            trial_iterations: None,
        }
    }
}

/// Axis-aligned search box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl SearchBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() || lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return invalid(format!("invalid search box {lo:?} .. {hi:?}"));
        }
        Ok(Self { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().enumerate().all(|(i, v)| *v >= self.lo[i] && *v <= self.hi[i])
    }

    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(i, t)| self.lo[i] + t * (self.hi[i] - self.lo[i]))
            .collect()
    }

    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - self.lo[i]) / (self.hi[i] - self.lo[i]))
            .collect()
    }
}

/// A point of the search space: `(log10 lambda_c [, nu, rho])`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    pub log10_lambda_c: f64,
    pub gamma: Option<MaternParams>,
}

impl HyperConfig {
    pub fn from_x(x: &[f64]) -> Self {
        Self {
            log10_lambda_c: x[0],
            gamma: (x.len() >= 3).then(|| MaternParams { nu: x[1], rho: x[2] }),
        }
    }

    pub fn lambda_c(&self) -> f64 {
        10f64.powf(self.log10_lambda_c)
    }
}

impl HyperoptConfig {
    pub fn search_box(&self) -> Result<SearchBox> {
        let mut lo = vec![self.log10_lambda_box[0]];
        let mut hi = vec![self.log10_lambda_box[1]];
        if self.tune_gamma {
            lo.extend([self.nu_box[0], self.rho_box[0]]);
            hi.extend([self.nu_box[1], self.rho_box[1]]);
        }
        SearchBox::new(lo, hi)
    }
}

/// Seeded split of voxel indices into (train, test) with `round(p N)` training voxels.
pub fn partition(n: usize, p: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(p > 0.0 && p < 1.0) {
        return invalid(format!("train fraction must lie in (0, 1), got {p}"));
    }
    let n_train = ((p * n as f64).round() as usize).clamp(1.min(n), n.saturating_sub(1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, 3));
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Gaussian log-likelihood of `y` under the trained network with iid noise `sigma_e2`.
pub fn data_loglik(params: &field::NeuralFieldParams, ds: &Dataset, phi_g: &DMatrix<f64>, sigma_e2: f64) -> Result<f64> {
    let pred = field::predict_signals(params, &ds.coords, phi_g)?;
    let rss = (&ds.signals - pred).norm_squared();
    let count = ds.signals.len() as f64;
    Ok(-0.5 * (rss / sigma_e2 + count * (2.0 * PI * sigma_e2).ln()))
}

/// Trains on the train split under `x` and returns the test log-likelihood,
/// or `-inf` when training diverges.
pub fn evaluate_config(
    x: &HyperConfig,
    dataset: &Dataset,
    config: &EstimatorConfig,
    sigma_e2: f64,
    seed: u64,
) -> Result<f64> {
    let (train_idx, test_idx) = partition(dataset.n_voxels(), config.hyperopt.p, rng::derive_seed(seed, &[1]))?;
    let train_set = dataset.subset(&train_idx);
    let test_set = dataset.subset(&test_idx);
    let mut cfg = config.clone();
    if let Some(g) = x.gamma {
        cfg.gamma = g;
    }
    if let Some(it) = config.hyperopt.trial_iterations {
        cfg.train.iterations = it;
    }
    let trained = match estimator::train(&train_set, &cfg, x.lambda_c(), rng::derive_seed(seed, &[2])) {
        Ok(t) => t,
        Err(NodfError::Diverged { step, loss }) => {
            log::warn!("trial {x:?} diverged at step {step} (loss {loss})");
            return Ok(f64::NEG_INFINITY);
        }
        Err(e) => return Err(e),
    };
    let basis = HarmonicBasis::new(cfg.l_max)?;
    let pg = estimator::phi_g(&basis, &dataset.directions);
    let ll = data_loglik(&trained.params, &test_set, &pg, sigma_e2)?;
    Ok(if ll.is_finite() { ll } else { f64::NEG_INFINITY })
}

// Joe-Kuo direction numbers (s, a, m_1..m_s) for dimensions 2..=8.
const SOBOL_DIRECTIONS: [(u32, u32, &[u32]); 7] = [
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
];

const SOBOL_BITS: usize = 32;

/// Unscrambled Sobol sequence in Gray-code order, starting at the origin.
#[derive(Debug, Clone)]
pub struct Sobol {
    v: Vec<[u32; SOBOL_BITS]>,
    x: Vec<u32>,
    index: u64,
}

impl Sobol {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > SOBOL_DIRECTIONS.len() + 1 {
            return invalid(format!("Sobol dimension must lie in 1..={}", SOBOL_DIRECTIONS.len() + 1));
        }
        let mut v = Vec::with_capacity(dim);
        let mut first = [0u32; SOBOL_BITS];
        for (i, e) in first.iter_mut().enumerate() {
            *e = 1 << (31 - i);
        }
        v.push(first);
        for &(s, a, m) in SOBOL_DIRECTIONS.iter().take(dim - 1) {
            let s = s as usize;
            let mut dir = [0u32; SOBOL_BITS];
            for i in 0..s {
                dir[i] = m[i] << (31 - i);
            }
            for i in s..SOBOL_BITS {
                let mut val = dir[i - s] ^ (dir[i - s] >> s);
                for k in 1..s {
                    if (a >> (s - 1 - k)) & 1 == 1 {
                        val ^= dir[i - k];
                    }
                }
                dir[i] = val;
            }
            v.push(dir);
        }
        Ok(Self {
            v,
            x: vec![0; dim],
            index: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    pub fn next_point(&mut self) -> Vec<f64> {
        let out = self.x.iter().map(|&b| b as f64 / 4_294_967_296.0).collect();
        let c = (!self.index).trailing_zeros() as usize;
        for (xj, vj) in self.x.iter_mut().zip(&self.v) {
            *xj ^= vj[c.min(SOBOL_BITS - 1)];
        }
        self.index += 1;
        out
    }

    pub fn skip(&mut self, n: usize) {
        for _ in 0..n {
            self.next_point();
        }
    }
}

fn matern52(r: f64) -> f64 {
    let s = 5f64.sqrt() * r;
    (1.0 + s + s * s / 3.0) * (-s).exp()
}

/// Kernel hyperparameters on unit-box inputs and standardized outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub lengthscales: Vec<f64>,
    pub signal_var: f64,
    pub noise_var: f64,
}

/// Constant-mean GP with an ARD Matérn-5/2 kernel.
#[derive(Debug, Clone)]
pub struct Surrogate {
    pub search_box: SearchBox,
    pub kernel: KernelParams,
    x: Vec<Vec<f64>>,
    y_mean: f64,
    y_scale: f64,
    chol: Cholesky<f64, nalgebra::Dyn>,
    alpha: DVector<f64>,
    pub log_marginal: f64,
}

const LENGTHSCALE_GRID: [f64; 7] = [0.03, 0.06, 0.12, 0.25, 0.5, 1.0, 2.0];
const SIGNAL_GRID: [f64; 3] = [0.5, 1.0, 2.0];
const NOISE_GRID: [f64; 4] = [1e-6, 1e-4, 1e-2, 1e-1];

impl Surrogate {
    /// Fits kernel hyperparameters by grid search over the marginal likelihood.
    pub fn fit(search_box: &SearchBox, xs: &[Vec<f64>], ys: &[f64]) -> Result<Self> {
        if xs.len() < 2 || xs.len() != ys.len() {
            return invalid(format!("surrogate needs >= 2 matched observations, got {} / {}", xs.len(), ys.len()));
        }
        let d = search_box.dim();
        let n_ls = LENGTHSCALE_GRID.len().pow(d as u32);
        let mut best: Option<Surrogate> = None;
        for code in 0..n_ls {
            let mut c = code;
            let ls: Vec<f64> = (0..d)
                .map(|_| {
                    let v = LENGTHSCALE_GRID[c % LENGTHSCALE_GRID.len()];
                    c /= LENGTHSCALE_GRID.len();
                    v
                })
                .collect();
            for &sv in &SIGNAL_GRID {
                for &nv in &NOISE_GRID {
                    let kp = KernelParams {
                        lengthscales: ls.clone(),
                        signal_var: sv,
                        noise_var: nv,
                    };
                    if let Ok(s) = Self::with_kernel(search_box, xs, ys, kp) {
                        if best.as_ref().is_none_or(|b| s.log_marginal > b.log_marginal) {
                            best = Some(s);
                        }
                    }
                }
            }
        }
        best.ok_or_else(|| NodfError::IllConditioned {
            reason: "no kernel setting gave a positive definite Gram matrix".into(),
            condition: f64::INFINITY,
        })
    }

    /// Conditions the GP on fixed kernel hyperparameters. Duplicate inputs
    /// are handled by growing diagonal jitter.
    pub fn with_kernel(search_box: &SearchBox, xs: &[Vec<f64>], ys: &[f64], kernel: KernelParams) -> Result<Self> {
        let n = xs.len();
        let units: Vec<Vec<f64>> = xs.iter().map(|x| search_box.to_unit(x)).collect();
        let y_mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n as f64;
        let y_scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        let yn = DVector::from_iterator(n, ys.iter().map(|y| (y - y_mean) / y_scale));
        let mut k = DMatrix::from_fn(n, n, |i, j| kernel_eval(&kernel, &units[i], &units[j]));
        for i in 0..n {
            k[(i, i)] += kernel.noise_var;
        }
        let mut jitter = 0.0;
        let chol = loop {
            let mut kj = k.clone();
            for i in 0..n {
                kj[(i, i)] += jitter;
            }
            if let Some(c) = Cholesky::new(kj) {
                break c;
            }
            jitter = if jitter == 0.0 { 1e-10 * kernel.signal_var } else { jitter * 10.0 };
            if jitter > kernel.signal_var {
                return Err(NodfError::IllConditioned {
                    reason: "GP kernel matrix".into(),
                    condition: f64::INFINITY,
                });
            }
        };
        let alpha = chol.solve(&yn);
        let logdet: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
        let log_marginal = -0.5 * (yn.dot(&alpha) + logdet + n as f64 * (2.0 * PI).ln());
        Ok(Self {
            search_box: search_box.clone(),
            kernel,
            x: units,
            y_mean,
            y_scale,
            chol,
            alpha,
            log_marginal,
        })
    }

    /// Predictive mean and variance of the latent function at `x` (original units).
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let u = self.search_box.to_unit(x);
        let kx = DVector::from_iterator(self.x.len(), self.x.iter().map(|xi| kernel_eval(&self.kernel, &u, xi)));
        let mean = kx.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&kx).expect("non-singular factor");
        let var = (self.kernel.signal_var - v.norm_squared()).max(0.0);
        (self.y_mean + self.y_scale * mean, self.y_scale * self.y_scale * var)
    }
}

fn kernel_eval(k: &KernelParams, a: &[f64], b: &[f64]) -> f64 {
    let r2: f64 = a
        .iter()
        .zip(b)
        .zip(&k.lengthscales)
        .map(|((x, y), l)| ((x - y) / l).powi(2))
        .sum();
    k.signal_var * matern52(r2.sqrt())
}

/// Closed-form expected improvement over `best` for maximization.
pub fn expected_improvement(mu: f64, sigma: f64, best: f64) -> f64 {
    if !(sigma > 0.0) {
        return (mu - best).max(0.0);
    }
    let z = (mu - best) / sigma;
    let n = Normal::standard();
    ((mu - best) * n.cdf(z) + sigma * n.pdf(z)).max(0.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub x: Vec<f64>,
    pub loglik: f64,
    pub seed: u64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct BoResult {
    pub trials: Vec<TrialRecord>,
    pub best_index: usize,
}

impl BoResult {
    pub fn best(&self) -> &TrialRecord {
        &self.trials[self.best_index]
    }

    pub fn best_config(&self) -> HyperConfig {
        HyperConfig::from_x(&self.best().x)
    }

    pub fn best_lambda_c(&self) -> f64 {
        self.best_config().lambda_c()
    }
}

/// Generic maximization loop: `n_init` Sobol points, then argmax-EI over a
/// freshly shifted Sobol cloud each iteration. `objective` returns `-inf` for
/// failed evaluations.
pub fn bo_maximize<F>(
    search_box: &SearchBox,
    max_trials: usize,
    n_init: usize,
    n_candidates: usize,
    seed: u64,
    mut objective: F,
) -> Result<BoResult>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if n_init < 2 || max_trials < n_init {
        return invalid(format!("need max_trials >= n_init >= 2, got {max_trials}, {n_init}"));
    }
    if n_candidates == 0 {
        return invalid("n_candidates must be >= 1");
    }
    let d = search_box.dim();
    let mut shift_rng = rng::stream(seed, 5);
    let mut init_seq = Sobol::new(d)?;
    // Skip the corner point, which lands on the box boundary.
    init_seq.skip(1);
    let shift: Vec<f64> = (0..d).map(|_| shift_rng.random::<f64>()).collect();
    let mut trials: Vec<TrialRecord> = Vec::with_capacity(max_trials);
    let mut run = |x: Vec<f64>, trials: &mut Vec<TrialRecord>| -> Result<()> {
        let t0 = Instant::now();
        let v = objective(&x)?;
        let v = if v.is_nan() { f64::NEG_INFINITY } else { v };
        log::info!("trial {}: x = {x:?}, loglik = {v:.6e}", trials.len());
        trials.push(TrialRecord {
            x,
            loglik: v,
            seed,
            wall_time_s: t0.elapsed().as_secs_f64(),
        });
        Ok(())
    };
    for _ in 0..n_init {
        let u: Vec<f64> = init_seq
            .next_point()
            .iter()
            .zip(&shift)
            .map(|(a, s)| (a + s).fract())
            .collect();
        run(search_box.from_unit(&u), &mut trials)?;
    }
    let mut cand_seq = Sobol::new(d)?;
    while trials.len() < max_trials {
        let finite: Vec<&TrialRecord> = trials.iter().filter(|t| t.loglik.is_finite()).collect();
        let cand_shift: Vec<f64> = (0..d).map(|_| shift_rng.random::<f64>()).collect();
        let candidates: Vec<Vec<f64>> = (0..n_candidates)
            .map(|_| {
                let u: Vec<f64> = cand_seq
                    .next_point()
                    .iter()
                    .zip(&cand_shift)
                    .map(|(a, s)| (a + s).fract())
                    .collect();
                search_box.from_unit(&u)
            })
            .collect();
        let next = if finite.len() < 2 {
            candidates[0].clone()
        } else {
            let floor = finite.iter().map(|t| t.loglik).fold(f64::INFINITY, f64::min);
            let spread = finite.iter().map(|t| t.loglik).fold(f64::NEG_INFINITY, f64::max) - floor;
            let xs: Vec<Vec<f64>> = trials.iter().map(|t| t.x.clone()).collect();
            // Failed trials enter the surrogate below the worst success.
            let ys: Vec<f64> = trials
                .iter()
                .map(|t| if t.loglik.is_finite() { t.loglik } else { floor - spread.max(1.0) })
                .collect();
            let gp = Surrogate::fit(search_box, &xs, &ys)?;
            let best = finite.iter().map(|t| t.loglik).fold(f64::NEG_INFINITY, f64::max);
            let mut best_c = 0;
            let mut best_ei = f64::NEG_INFINITY;
            for (i, c) in candidates.iter().enumerate() {
                let (mu, var) = gp.predict(c);
                let ei = expected_improvement(mu, var.sqrt(), best);
                if ei > best_ei {
                    best_ei = ei;
                    best_c = i;
                }
            }
            candidates[best_c].clone()
        };
        run(next, &mut trials)?;
    }
    let best_index = trials
        .iter()
        .enumerate()
        .filter(|(_, t)| t.loglik.is_finite())
        .max_by(|a, b| a.1.loglik.total_cmp(&b.1.loglik))
        .map(|(i, _)| i)
        .ok_or(NodfError::AllEvaluationsFailed(trials.len()))?;
    Ok(BoResult { trials, best_index })
}

/// Selects `lambda_c` (and `gamma` when enabled) on `dataset`. Every trial
/// uses the same split and initialization seed.
pub fn bo_loop(dataset: &Dataset, config: &EstimatorConfig, sigma_e2: f64, seed: u64) -> Result<BoResult> {
    let hc = &config.hyperopt;
    let search_box = hc.search_box()?;
    let eval_seed = rng::derive_seed(seed, &[100]);
    bo_maximize(&search_box, hc.max_trials, hc.n_init, hc.n_candidates, seed, |x| {
        evaluate_config(&HyperConfig::from_x(x), dataset, config, sigma_e2, eval_seed)
    })
}

/// Appends trials to a JSON-lines ledger.
pub fn write_ledger(path: &Path, trials: &[TrialRecord]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    for t in trials {
        writeln!(f, "{}", serde_json::to_string(t)?)?;
    }
    Ok(())
}

pub fn read_ledger(path: &Path) -> Result<Vec<TrialRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(NodfError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn partition_examples() {
        let (tr, te) = partition(100, 0.8, 4).unwrap();
        assert_eq!((tr.len(), te.len()), (80, 20));
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(partition(100, 0.8, 4).unwrap(), (tr, te));
        assert!(partition(10, 1.0, 0).is_err());
        assert!(partition(10, 0.0, 0).is_err());
    }

    #[test]
    fn sobol_golden_vectors() {
        let golden = [
            [0.0, 0.0, 0.0],
            [0.5, 0.5, 0.5],
            [0.75, 0.25, 0.25],
            [0.25, 0.75, 0.75],
            [0.375, 0.375, 0.625],
            [0.875, 0.875, 0.125],
            [0.625, 0.125, 0.875],
            [0.125, 0.625, 0.375],
            [0.1875, 0.3125, 0.9375],
            [0.6875, 0.8125, 0.4375],
            [0.9375, 0.0625, 0.6875],
            [0.4375, 0.5625, 0.1875],
            [0.3125, 0.1875, 0.3125],
            [0.8125, 0.6875, 0.8125],
            [0.5625, 0.4375, 0.0625],
            [0.0625, 0.9375, 0.5625],
        ];
        let mut s = Sobol::new(3).unwrap();
        for g in golden {
            assert_eq!(s.next_point(), g.to_vec());
        }
        assert!(Sobol::new(0).is_err());
        assert!(Sobol::new(9).is_err());
    }

    #[test]
    fn sobol_is_stratified() {
        for d in 1..=8 {
            let mut s = Sobol::new(d).unwrap();
            let pts: Vec<Vec<f64>> = (0..256).map(|_| s.next_point()).collect();
            for j in 0..d {
                let mut counts = [0usize; 16];
                for p in &pts {
                    assert!((0.0..1.0).contains(&p[j]));
                    counts[(p[j] * 16.0) as usize] += 1;
                }
                assert!(counts.iter().all(|&c| c == 16), "dim {d} coord {j}: {counts:?}");
            }
        }
    }

    #[test]
    fn ei_examples() {
        assert_eq!(expected_improvement(2.0, 0.0, 1.0), 1.0);
        assert_eq!(expected_improvement(0.0, 0.0, 1.0), 0.0);
        assert_relative_eq!(expected_improvement(1.0, 1.0, 1.0), 1.0 / (2.0 * PI).sqrt(), epsilon = 1e-12);
        assert!(expected_improvement(0.0, 1e-12, 1.0) < 1e-12);
    }

    proptest! {
        #[test]
        fn ei_nonnegative(mu in -10.0..10.0f64, sigma in 0.0..5.0f64, best in -10.0..10.0f64) {
            prop_assert!(expected_improvement(mu, sigma, best) >= 0.0);
        }

        #[test]
        fn ei_increases_with_mean(mu in -5.0..5.0f64, sigma in 0.01..3.0f64, best in -5.0..5.0f64) {
            prop_assert!(expected_improvement(mu + 0.1, sigma, best) >= expected_improvement(mu, sigma, best));
        }
    }

    fn sinusoid_data() -> (SearchBox, Vec<Vec<f64>>, Vec<f64>) {
        let b = SearchBox::new(vec![0.0], vec![1.0]).unwrap();
        let xs: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 / 7.0]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (6.0 * x[0]).sin()).collect();
        (b, xs, ys)
    }

    #[test]
    fn surrogate_matches_dense_oracle() {
        let (b, xs, ys) = sinusoid_data();
        let kp = KernelParams {
            lengthscales: vec![0.3],
            signal_var: 1.3,
            noise_var: 1e-4,
        };
        let gp = Surrogate::with_kernel(&b, &xs, &ys, kp.clone()).unwrap();
        let n = xs.len();
        let ym = ys.iter().sum::<f64>() / n as f64;
        let sd = (ys.iter().map(|y| (y - ym).powi(2)).sum::<f64>() / n as f64).sqrt();
        let kern = |a: f64, c: f64| {
            let r = (a - c).abs() / 0.3;
            1.3 * (1.0 + 5f64.sqrt() * r + 5.0 * r * r / 3.0) * (-(5f64.sqrt()) * r).exp()
        };
        let kmat = DMatrix::from_fn(n, n, |i, j| kern(xs[i][0], xs[j][0]) + if i == j { 1e-4 } else { 0.0 });
        let inv = kmat.try_inverse().unwrap();
        let yv = DVector::from_iterator(n, ys.iter().map(|y| (y - ym) / sd));
        for t in [0.05, 0.33, 0.5, 0.91] {
            let kx = DVector::from_iterator(n, xs.iter().map(|x| kern(t, x[0])));
            let mean = ym + sd * kx.dot(&(&inv * &yv));
            let var = sd * sd * (1.3 - (kx.transpose() * &inv * &kx)[(0, 0)]);
            let (m, v) = gp.predict(&[t]);
            assert!((m - mean).abs() < 1e-6);
            assert!((v - var).abs() < 1e-6);
        }
    }

    #[test]
    fn surrogate_interpolates_and_is_uncertain_away_from_data() {
        let (b, xs, ys) = sinusoid_data();
        let gp = Surrogate::fit(&b, &xs, &ys).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            let (m, _) = gp.predict(x);
            assert!((m - y).abs() < 0.05, "{m} vs {y}");
        }
        let gp2 = Surrogate::fit(&b, &xs[..3], &ys[..3]).unwrap();
        assert!(gp2.predict(&xs[0]).1 <= gp2.predict(&[0.95]).1);
        // Duplicate inputs.
        let dup = vec![vec![0.5], vec![0.5], vec![0.2]];
        assert!(Surrogate::fit(&b, &dup, &[1.0, 1.1, 0.0]).is_ok());
    }

    #[test]
    fn bo_finds_quadratic_maximum() {
        let b = SearchBox::new(vec![0.0], vec![1.0]).unwrap();
        let mut hits = 0;
        for seed in 0..10 {
            let res = bo_maximize(&b, 20, 5, 1024, seed, |x| Ok(-(x[0] - 0.3).powi(2))).unwrap();
            assert_eq!(res.trials.len(), 20);
            if (res.best().x[0] - 0.3).abs() < 0.1 {
                hits += 1;
            }
            let init_best = res.trials[..5].iter().map(|t| t.loglik).fold(f64::NEG_INFINITY, f64::max);
            assert!(res.best().loglik >= init_best);
            assert!(res.trials.iter().any(|t| t.x == res.best().x));
            assert!(res.trials.iter().all(|t| b.contains(&t.x)));
        }
        assert!(hits >= 9, "{hits}/10");
    }

    #[test]
    fn bo_failure_modes() {
        let b = SearchBox::new(vec![0.0], vec![1.0]).unwrap();
        let err = bo_maximize(&b, 6, 3, 64, 0, |_| Ok(f64::NEG_INFINITY)).unwrap_err();
        assert!(matches!(err, NodfError::AllEvaluationsFailed(6)));
        // Partial failures are skipped.
        let res = bo_maximize(&b, 8, 3, 64, 1, |x| Ok(if x[0] < 0.5 { f64::NEG_INFINITY } else { -x[0] })).unwrap();
        assert!(res.best().loglik.is_finite());
        assert!(bo_maximize(&b, 3, 5, 64, 0, |_| Ok(0.0)).is_err());
    }

    #[test]
    fn ledger_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trials.jsonl");
        let t = vec![
            TrialRecord {
                x: vec![-2.0],
                loglik: -10.5,
                seed: 3,
                wall_time_s: 0.25,
            },
            TrialRecord {
                x: vec![0.0],
                loglik: -9.0,
                seed: 3,
                wall_time_s: 0.5,
            },
        ];
        write_ledger(&p, &t).unwrap();
        let back = read_ledger(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].x, vec![0.0]);
        assert_eq!(back[0].loglik, -10.5);
    }
}
