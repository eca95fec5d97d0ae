//! Sinusoidal coordinate network with linear coefficient and mean heads.
//!
//! ```text
//! x0 = sin(W0 v + b0)
//! xl = sin(w0 (Wl x(l-1) + bl))     l = 1..L
//! xi(v) = xL
//! signal(v) = (mu^T xi) 1 + Phi_G W xi
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, NodfError, Result};
use crate::prior::{penalty_quadform, PriorPrecision};
use crate::rng;

/// Network shape and initialization scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldArch {
    /// Coordinate dimension D.
    pub d_in: usize,
    /// Encoding width d0.
    pub d0: usize,
    /// Number of hidden sine layers L.
    pub layers: usize,
    /// Output width r.
    pub width: usize,
    /// Number of non-constant harmonics K.
    pub k: usize,
    /// Frequency scale of the hidden layers.
    pub omega0: f64,
    /// Frequency scale of the encoding; its weights are drawn from
    /// `U(-s/D, s/D)`.
    pub encoding_scale: f64,
}

impl FieldArch {
    pub fn new(d_in: usize, layers: usize, width: usize, k: usize) -> Self {
        Self {
            d_in,
            d0: width,
            layers,
            width,
            k,
            omega0: 30.0,
            encoding_scale: 30.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d0 == 0 || self.layers == 0 || self.width == 0 || self.k == 0 {
            return invalid(format!("all network dimensions must be >= 1: {self:?}"));
        }
        if !(self.omega0 > 0.0 && self.omega0.is_finite()) {
            return invalid(format!("omega0 must be positive, got {}", self.omega0));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralFieldParams {
    pub omega0: f64,
    pub w0: DMatrix<f64>,
    pub b0: DVector<f64>,
    pub layers: Vec<Layer>,
    /// K x r coefficient head.
    pub head_w: DMatrix<f64>,
    /// Length-r mean head.
    pub head_mu: DVector<f64>,
}

fn uniform_matrix(r: &mut rng::Rng, rows: usize, cols: usize, bound: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| r.random_range(-bound..=bound))
}

fn uniform_vector(r: &mut rng::Rng, n: usize, bound: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| r.random_range(-bound..=bound))
}

/// SIREN-style initialization. The encoding frequencies follow the first-layer
/// law `U(-1/D, 1/D)` scaled by `encoding_scale`; hidden weights are
/// `U(-sqrt(6/fan_in)/w0, sqrt(6/fan_in)/w0)`.
pub fn init_params(arch: &FieldArch, seed: u64) -> Result<NeuralFieldParams> {
    arch.validate()?;
    let mut r = rng::seeded(seed);
    let w0 = uniform_matrix(&mut r, arch.d0, arch.d_in, arch.encoding_scale / arch.d_in as f64);
    let b0 = uniform_vector(&mut r, arch.d0, std::f64::consts::PI);
    let mut layers = Vec::with_capacity(arch.layers);
    let mut fan_in = arch.d0;
    for _ in 0..arch.layers {
        let bound = (6.0 / fan_in as f64).sqrt() / arch.omega0;
        let w = uniform_matrix(&mut r, arch.width, fan_in, bound);
        let b = uniform_vector(&mut r, arch.width, 1.0 / (fan_in as f64).sqrt() / arch.omega0);
        layers.push(Layer { w, b });
        fan_in = arch.width;
    }
    let head_bound = 1e-2 / (arch.width as f64).sqrt();
    let head_w = uniform_matrix(&mut r, arch.k, arch.width, head_bound);
    let head_mu = uniform_vector(&mut r, arch.width, head_bound);
    Ok(NeuralFieldParams {
        omega0: arch.omega0,
        w0,
        b0,
        layers,
        head_w,
        head_mu,
    })
}

impl NeuralFieldParams {
    pub fn d_in(&self) -> usize {
        self.w0.ncols()
    }

    pub fn width(&self) -> usize {
        self.head_w.ncols()
    }

    pub fn k(&self) -> usize {
        self.head_w.nrows()
    }

    /// Parameter tensors in a fixed order (encoding, layers, heads).
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.w0.as_slice(), self.b0.as_slice()];
        for l in &self.layers {
            out.push(l.w.as_slice());
            out.push(l.b.as_slice());
        }
        out.push(self.head_w.as_slice());
        out.push(self.head_mu.as_slice());
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.w0.as_mut_slice(), self.b0.as_mut_slice()];
        for l in &mut self.layers {
            out.push(l.w.as_mut_slice());
            out.push(l.b.as_mut_slice());
        }
        out.push(self.head_w.as_mut_slice());
        out.push(self.head_mu.as_mut_slice());
        out
    }

    /// (name, rows, cols) per tensor, aligned with [`slices`](Self::slices).
    pub fn shapes(&self) -> Vec<(String, usize, usize)> {
        let mut out = vec![
            ("w0".to_string(), self.w0.nrows(), self.w0.ncols()),
            ("b0".to_string(), self.b0.len(), 1),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("w{}", i + 1), l.w.nrows(), l.w.ncols()));
            out.push((format!("b{}", i + 1), l.b.len(), 1));
        }
        out.push(("head_w".to_string(), self.head_w.nrows(), self.head_w.ncols()));
        out.push(("head_mu".to_string(), self.head_mu.len(), 1));
        out
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut off = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in z.slices_mut() {
            s.fill(0.0);
        }
        z
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

struct Forward {
    /// Encoding pre-activation (d0 x n).
    u0: DMatrix<f64>,
    /// Activations x0..xL.
    xs: Vec<DMatrix<f64>>,
    /// Hidden pre-activations z1..zL (already scaled by w0).
    zs: Vec<DMatrix<f64>>,
}

fn add_bias(m: &mut DMatrix<f64>, b: &DVector<f64>, scale: f64) {
    for mut col in m.column_iter_mut() {
        col.axpy(scale, b, 1.0);
    }
}

fn check_coords(params: &NeuralFieldParams, coords: &DMatrix<f64>) -> Result<()> {
    if coords.ncols() != params.d_in() {
        return Err(NodfError::InvalidArgument(format!(
            "coordinates have {} columns, network expects {}",
            coords.ncols(),
            params.d_in()
        )));
    }
    if coords.iter().any(|c| c.abs() > 1.0 + 1e-12) {
        log::warn!("coordinates outside [-1, 1]^D; evaluating the field anyway");
    }
    Ok(())
}

fn forward(params: &NeuralFieldParams, coords: &DMatrix<f64>) -> Forward {
    let mut u0 = &params.w0 * coords.transpose();
    add_bias(&mut u0, &params.b0, 1.0);
    let mut xs = vec![u0.map(f64::sin)];
    let mut zs = Vec::with_capacity(params.layers.len());
    for l in &params.layers {
        let mut z = &l.w * xs.last().unwrap();
        add_bias(&mut z, &l.b, 1.0);
        z *= params.omega0;
        xs.push(z.map(f64::sin));
        zs.push(z);
    }
    Forward { u0, xs, zs }
}

/// Feature matrix (r x n), one column per coordinate row.
pub fn features(params: &NeuralFieldParams, coords: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_coords(params, coords)?;
    Ok(forward(params, coords).xs.pop().unwrap())
}

/// Features at a single coordinate.
pub fn feature_vector(params: &NeuralFieldParams, v: &[f64]) -> Result<DVector<f64>> {
    let coords = DMatrix::from_row_slice(1, v.len(), v);
    Ok(features(params, &coords)?.column(0).into_owned())
}

/// Jacobian of the features with respect to the coordinate (r x D), by forward-mode chain rule.
pub fn feature_jacobian(params: &NeuralFieldParams, v: &[f64]) -> Result<DMatrix<f64>> {
    let coords = DMatrix::from_row_slice(1, v.len(), v);
    check_coords(params, &coords)?;
    let f = forward(params, &coords);
    let mut jac = params.w0.clone();
    for (i, mut row) in jac.row_iter_mut().enumerate() {
        row *= f.u0[(i, 0)].cos();
    }
    for (l, z) in params.layers.iter().zip(&f.zs) {
        jac = &l.w * jac * params.omega0;
        for (i, mut row) in jac.row_iter_mut().enumerate() {
            row *= z[(i, 0)].cos();
        }
    }
    Ok(jac)
}

fn check_heads(params: &NeuralFieldParams, phi_g: &DMatrix<f64>) -> Result<()> {
    if phi_g.ncols() != params.k() {
        return Err(NodfError::InvalidArgument(format!(
            "Phi_G has {} columns, coefficient head has {} rows",
            phi_g.ncols(),
            params.k()
        )));
    }
    Ok(())
}

/// Predicted signals from precomputed features (M x n).
pub fn predict_from_features(params: &NeuralFieldParams, xi: &DMatrix<f64>, phi_g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_heads(params, phi_g)?;
    if xi.nrows() != params.width() {
        return Err(NodfError::InvalidArgument(format!(
            "features have {} rows, heads expect {}",
            xi.nrows(),
            params.width()
        )));
    }
    let mut pred = phi_g * (&params.head_w * xi);
    let means = params.head_mu.transpose() * xi;
    for (i, mut col) in pred.column_iter_mut().enumerate() {
        col.add_scalar_mut(means[i]);
    }
    Ok(pred)
}

/// Column i = (mu^T xi(v_i)) 1_M + Phi_G W xi(v_i).
pub fn predict_signals(params: &NeuralFieldParams, coords: &DMatrix<f64>, phi_g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let xi = features(params, coords)?;
    predict_from_features(params, &xi, phi_g)
}

/// Loss value with its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub data: f64,
    pub penalty: f64,
}

/// `||Y - pred||^2 / (M n) + lambda_c * penalty_quadform(W, Xi, R)` and its exact gradient.
pub fn loss_and_grad(
    params: &NeuralFieldParams,
    coords: &DMatrix<f64>,
    y: &DMatrix<f64>,
    phi_g: &DMatrix<f64>,
    r: &PriorPrecision,
    lambda_c: f64,
) -> Result<(LossParts, NeuralFieldParams)> {
    check_coords(params, coords)?;
    check_heads(params, phi_g)?;
    if !(lambda_c >= 0.0) {
        return invalid(format!("lambda_c must be non-negative, got {lambda_c}"));
    }
    let n = coords.nrows();
    let m = phi_g.nrows();
    if y.nrows() != m || y.ncols() != n {
        return Err(NodfError::InvalidArgument(format!(
            "Y is {}x{}, expected {m}x{n}",
            y.nrows(),
            y.ncols()
        )));
    }
    if r.len() != params.k() {
        return Err(NodfError::InvalidArgument(format!(
            "prior precision has {} entries, head has {} rows",
            r.len(),
            params.k()
        )));
    }
    let mut f = forward(params, coords);
    let xi = f.xs.last().unwrap();
    let c = &params.head_w * xi;
    let mut resid = phi_g * &c;
    let means = params.head_mu.transpose() * xi;
    for (i, mut col) in resid.column_iter_mut().enumerate() {
        col.add_scalar_mut(means[i]);
    }
    resid = y - resid;
    let data = resid.norm_squared() / (m * n) as f64;
    let penalty = lambda_c * penalty_quadform(&params.head_w, xi, r)?;
    let total = data + penalty;
    if !total.is_finite() {
        return Err(NodfError::Diverged { step: 0, loss: total });
    }

    // dL/dpred
    let g_pred = resid * (-2.0 / (m * n) as f64);
    let mut g_c = phi_g.transpose() * &g_pred;
    let pen_scale = lambda_c * 2.0 / n as f64;
    for (k, rk) in r.diag().iter().enumerate() {
        let scaled = c.row(k) * (pen_scale * rk);
        let mut row = g_c.row_mut(k);
        row += scaled;
    }
    let col_sums = g_pred.row_sum();
    let mut grad = params.zeros_like();
    grad.head_w = &g_c * xi.transpose();
    grad.head_mu = xi * col_sums.transpose();
    let mut g_x = params.head_w.transpose() * g_c;
    g_x += &params.head_mu * col_sums;

    let w0 = params.omega0;
    for li in (0..params.layers.len()).rev() {
        let z = &f.zs[li];
        let mut g_z = g_x;
        g_z.zip_apply(z, |g, zz| *g *= zz.cos());
        let x_prev = &f.xs[li];
        grad.layers[li].w = &g_z * x_prev.transpose() * w0;
        grad.layers[li].b = g_z.column_sum() * w0;
        g_x = params.layers[li].w.transpose() * g_z * w0;
    }
    let mut g_u0 = g_x;
    g_u0.zip_apply(&f.u0, |g, u| *g *= u.cos());
    grad.w0 = &g_u0 * coords;
    grad.b0 = g_u0.column_sum();
    f.xs.clear();
    Ok((LossParts { total, data, penalty }, grad))
}

/// Adam state over the flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update on flat slices.
pub fn adam_update(state: &mut OptimizerState, params: &mut [f64], grads: &[f64]) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mh = state.m[i] / bc1;
        let vh = state.v[i] / bc2;
        params[i] -= state.lr * mh / (vh.sqrt() + state.eps);
    }
}

pub fn adam_step(state: &mut OptimizerState, params: &mut NeuralFieldParams, grads: &NeuralFieldParams) {
    let mut flat = params.to_flat();
    adam_update(state, &mut flat, &grads.to_flat());
    params.set_flat(&flat);
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    omega0: f64,
    tensors: Vec<TensorEntry>,
}

/// Writes `<stem>.bin` (little-endian f64, column-major per tensor) and `<stem>.json`.
pub fn save_params(params: &NeuralFieldParams, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        omega0: params.omega0,
        tensors: params
            .shapes()
            .into_iter()
            .map(|(name, rows, cols)| TensorEntry { name, rows, cols })
            .collect(),
    };
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&manifest)?)?;
    let mut bytes = Vec::with_capacity(params.num_params() * 8);
    for s in params.slices() {
        for x in s {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::File::create(dir.join(format!("{stem}.bin")))?.write_all(&bytes)?;
    Ok(())
}

pub fn load_params(dir: &Path, stem: &str) -> Result<NeuralFieldParams> {
    let json_path = dir.join(format!("{stem}.json"));
    let bin_path = dir.join(format!("{stem}.bin"));
    for p in [&json_path, &bin_path] {
        if !p.exists() {
            return Err(NodfError::MissingComponent(p.clone()));
        }
    }
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&json_path)?)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(NodfError::SchemaVersion {
            found: manifest.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut bytes = Vec::new();
    fs::File::open(&bin_path)?.read_to_end(&mut bytes)?;
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let t = &manifest.tensors;
    if t.len() < 6 || t.len() % 2 != 0 {
        return Err(NodfError::Parse(format!("checkpoint lists {} tensors", t.len())));
    }
    let total: usize = t.iter().map(|e| e.rows * e.cols).sum();
    if total != values.len() || bytes.len() % 8 != 0 {
        return Err(NodfError::Parse(format!(
            "checkpoint blob holds {} values, manifest expects {total}",
            values.len()
        )));
    }
    let mut off = 0;
    let mut take = |e: &TensorEntry| {
        let m = DMatrix::from_column_slice(e.rows, e.cols, &values[off..off + e.rows * e.cols]);
        off += e.rows * e.cols;
        m
    };
    let w0 = take(&t[0]);
    let b0 = take(&t[1]).column(0).into_owned();
    let n_layers = (t.len() - 4) / 2;
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let w = take(&t[2 + 2 * i]);
        let b = take(&t[3 + 2 * i]).column(0).into_owned();
        layers.push(Layer { w, b });
    }
    let head_w = take(&t[t.len() - 2]);
    let head_mu = take(&t[t.len() - 1]).column(0).into_owned();
    Ok(NeuralFieldParams {
        omega0: manifest.omega0,
        w0,
        b0,
        layers,
        head_w,
        head_mu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny(seed: u64) -> (NeuralFieldParams, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, PriorPrecision) {
        let mut r = rng::seeded(seed + 100);
        let arch = FieldArch {
            d_in: 2,
            d0: 5,
            layers: 2,
            width: 4,
            k: 3,
            omega0: 3.0,
            encoding_scale: 3.0,
        };
        let mut p = init_params(&arch, seed).unwrap();
        // Non-trivial heads so every gradient block is exercised.
        p.head_w = uniform_matrix(&mut r, 3, 4, 1.0);
        p.head_mu = uniform_vector(&mut r, 4, 1.0);
        let coords = uniform_matrix(&mut r, 6, 2, 1.0);
        let y = uniform_matrix(&mut r, 5, 6, 1.0);
        let phi = uniform_matrix(&mut r, 5, 3, 1.0);
        let rp = PriorPrecision::from_diag(vec![0.5, 1.5, 3.0]).unwrap();
        (p, coords, y, phi, rp)
    }

    #[test]
    fn init_shapes_and_bounds() {
        let arch = FieldArch::new(2, 3, 64, 44);
        let p = init_params(&arch, 1).unwrap();
        assert_eq!(p.layers.len(), 3);
        for l in &p.layers {
            assert_eq!(l.w.shape(), (64, 64));
            let bound = (6.0f64 / 64.0).sqrt() / 30.0;
            assert!(l.w.iter().all(|x| x.abs() <= bound));
        }
        assert_eq!(p.head_w.shape(), (44, 64));
        assert_eq!(p, init_params(&arch, 1).unwrap());
        assert_ne!(p, init_params(&arch, 2).unwrap());
    }

    #[test]
    fn features_are_bounded_and_deterministic() {
        let p = init_params(&FieldArch::new(2, 3, 16, 5), 4).unwrap();
        let coords = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, -0.5, 0.9, 0.1, 0.2]);
        let xi = features(&p, &coords).unwrap();
        assert!(xi.iter().all(|x| x.abs() <= 1.0));
        assert_eq!(xi.column(0), xi.column(2));
        assert!(features(&p, &DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let (p, ..) = tiny(3);
        let v = [0.3, -0.4];
        let jac = feature_jacobian(&p, &v).unwrap();
        let h = 1e-6;
        for d in 0..2 {
            let mut vp = v;
            let mut vm = v;
            vp[d] += h;
            vm[d] -= h;
            let fd = (feature_vector(&p, &vp).unwrap() - feature_vector(&p, &vm).unwrap()) / (2.0 * h);
            for i in 0..jac.nrows() {
                let a = jac[(i, d)];
                assert!((a - fd[i]).abs() <= 1e-5 * a.abs().max(1e-3), "{a} vs {}", fd[i]);
            }
        }
    }

    #[test]
    fn prediction_examples() {
        let (mut p, coords, _, phi, _) = tiny(5);
        let xi = features(&p, &coords).unwrap();
        let pred = predict_signals(&p, &coords, &phi).unwrap();
        for i in 0..coords.nrows() {
            for m in 0..phi.nrows() {
                let mut v = 0.0;
                for s in 0..4 {
                    v += p.head_mu[s] * xi[(s, i)];
                    for k in 0..3 {
                        v += phi[(m, k)] * p.head_w[(k, s)] * xi[(s, i)];
                    }
                }
                assert_relative_eq!(pred[(m, i)], v, epsilon = 1e-12);
            }
        }
        let zero_phi = DMatrix::zeros(5, 3);
        let pred = predict_signals(&p, &coords, &zero_phi).unwrap();
        for i in 0..coords.nrows() {
            let mu = p.head_mu.dot(&xi.column(i));
            assert!(pred.column(i).iter().all(|x| (*x - mu).abs() < 1e-15));
        }
        p.head_w.fill(0.0);
        p.head_mu.fill(0.0);
        assert_eq!(predict_signals(&p, &coords, &phi).unwrap(), DMatrix::zeros(5, 6));
        assert!(predict_signals(&p, &coords, &DMatrix::zeros(5, 2)).is_err());
    }

    #[test]
    fn loss_examples() {
        let (p, coords, _, phi, r) = tiny(7);
        let y = predict_signals(&p, &coords, &phi).unwrap();
        let (l, _) = loss_and_grad(&p, &coords, &y, &phi, &r, 0.0).unwrap();
        assert!(l.total < 1e-28);
        let (l1, _) = loss_and_grad(&p, &coords, &y, &phi, &r, 0.3).unwrap();
        let (l2, _) = loss_and_grad(&p, &coords, &y, &phi, &r, 0.6).unwrap();
        assert_relative_eq!(l2.penalty, 2.0 * l1.penalty, epsilon = 1e-15);
        assert!(loss_and_grad(&p, &coords, &y, &phi, &r, -1.0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            let (p, coords, y, phi, r) = tiny(seed);
            let lambda = 0.1;
            let (_, g) = loss_and_grad(&p, &coords, &y, &phi, &r, lambda).unwrap();
            let flat = p.to_flat();
            let gflat = g.to_flat();
            let h = 1e-6;
            let mut q = p.clone();
            for i in 0..flat.len() {
                let mut f = flat.clone();
                f[i] += h;
                q.set_flat(&f);
                let lp = loss_and_grad(&q, &coords, &y, &phi, &r, lambda).unwrap().0.total;
                f[i] -= 2.0 * h;
                q.set_flat(&f);
                let lm = loss_and_grad(&q, &coords, &y, &phi, &r, lambda).unwrap().0.total;
                let fd = (lp - lm) / (2.0 * h);
                let err = (gflat[i] - fd).abs() / gflat[i].abs().max(fd.abs()).max(1e-6);
                assert!(err < 1e-4, "seed {seed} param {i}: {} vs {fd}", gflat[i]);
            }
        }
    }

    #[test]
    fn adam_examples() {
        let mut s = OptimizerState::new(1, 0.1);
        let mut p = [1.0];
        adam_update(&mut s, &mut p, &[1.0]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert_eq!(s.step, 1);

        let mut s = OptimizerState::new(3, 0.1);
        let mut p = [1.0, -2.0, 3.0];
        adam_update(&mut s, &mut p, &[0.0; 3]);
        assert_eq!(p, [1.0, -2.0, 3.0]);

        let mut r = rng::seeded(0);
        let g: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let (mut a, mut b) = ([0.5; 3], [0.5; 3]);
        let (mut sa, mut sb) = (OptimizerState::new(3, 0.01), OptimizerState::new(3, 0.01));
        adam_update(&mut sa, &mut a, &g);
        adam_update(&mut sb, &mut b, &g);
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = init_params(&FieldArch::new(3, 2, 8, 5), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_params(&p, dir.path(), "params").unwrap();
        assert_eq!(load_params(dir.path(), "params").unwrap(), p);
        assert!(matches!(load_params(dir.path(), "other"), Err(NodfError::MissingComponent(_))));
    }
}
