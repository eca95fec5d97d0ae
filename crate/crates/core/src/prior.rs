//! Spherical Matérn prior spectrum and the angular roughness penalty.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, NodfError, Result};
use crate::sphere::HarmonicBasis;

/// Smoothness `nu` and length-scale `rho`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaternParams {
    pub nu: f64,
    pub rho: f64,
}

impl Default for MaternParams {
    fn default() -> Self {
        Self { nu: 1.0, rho: 0.5 }
    }
}

impl MaternParams {
    pub fn new(nu: f64, rho: f64) -> Result<Self> {
        let p = Self { nu, rho };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu.is_finite() && self.rho > 0.0 && self.rho.is_finite()) {
            return invalid(format!("Matérn parameters must be positive, got nu={} rho={}", self.nu, self.rho));
        }
        Ok(())
    }
}

/// Spectral density of the Matérn kernel, evaluated in log space.
pub fn matern_spectral_density(omega: f64, gamma: &MaternParams) -> Result<f64> {
    gamma.validate()?;
    if !(omega >= 0.0) {
        return invalid(format!("frequency must be non-negative, got {omega}"));
    }
    let MaternParams { nu, rho } = *gamma;
    let log_c = 3.0 * 2f64.ln() + 1.5 * PI.ln() + ln_gamma(nu + 1.5) + nu * (2.0 * nu).ln()
        - ln_gamma(nu)
        - 2.0 * nu * rho.ln();
    let base = 2.0 * nu / (rho * rho) + 4.0 * PI * PI * omega * omega;
    Ok((log_c - (nu + 1.5) * base.ln()).exp())
}

/// Diagonal prior precision over the non-constant harmonics.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorPrecision {
    diag: Vec<f64>,
}

impl PriorPrecision {
    pub fn from_diag(diag: Vec<f64>) -> Result<Self> {
        if diag.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return invalid("prior precision entries must be positive and finite");
        }
        Ok(Self { diag })
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }
}

/// Entry `j` is `1 / s(sqrt(l_j (l_j + 1)))` for every harmonic except the constant.
pub fn prior_precision(basis: &HarmonicBasis, gamma: &MaternParams) -> Result<PriorPrecision> {
    let diag = basis.degrees()[1..]
        .iter()
        .map(|&l| {
            let omega = ((l * (l + 1)) as f64).sqrt();
            matern_spectral_density(omega, gamma).map(|s| 1.0 / s)
        })
        .collect::<Result<Vec<_>>>()?;
    PriorPrecision::from_diag(diag)
}

/// `(1/n) sum_i xi_i^T W^T R W xi_i` over the columns of `xi`.
pub fn penalty_quadform(w: &DMatrix<f64>, xi: &DMatrix<f64>, r: &PriorPrecision) -> Result<f64> {
    if w.nrows() != r.len() || w.ncols() != xi.nrows() {
        return Err(NodfError::InvalidArgument(format!(
            "penalty shapes: W {}x{}, Xi {}x{}, R {}",
            w.nrows(),
            w.ncols(),
            xi.nrows(),
            xi.ncols(),
            r.len()
        )));
    }
    if xi.ncols() == 0 {
        return Ok(0.0);
    }
    let c = w * xi;
    let mut total = 0.0;
    for (k, rk) in r.diag().iter().enumerate() {
        total += rk * c.row(k).norm_squared();
    }
    Ok(total / xi.ncols() as f64)
}
