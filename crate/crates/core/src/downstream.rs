//! Quantities derived from ODFs: GFA, peaks, streamline tracing, curve
//! statistics, and a GFA exceedance test.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{invalid, NodfError, Result};
use crate::estimator::PosteriorState;
use crate::sphere::{Direction, HarmonicBasis, Icosphere};

/// Generalized fractional anisotropy of ODF values, clamped to [0, 1].
pub fn gfa(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return invalid("GFA needs at least 2 values");
    }
    let ss: f64 = values.iter().map(|h| h * h).sum();
    if ss == 0.0 {
        return Err(NodfError::Undefined("GFA of an all-zero ODF".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let dev: f64 = values.iter().map(|h| (h - mean).powi(2)).sum();
    let g = (n as f64 * dev / ((n - 1) as f64 * ss)).sqrt();
    Ok(g.clamp(0.0, 1.0))
}

/// Outcome of [`propagate_qoi`].
#[derive(Debug, Clone)]
pub struct QoiSample {
    pub values: Vec<f64>,
    /// Draws on which the transform failed.
    pub failures: usize,
}

/// Applies `t` to posterior ODF draws at `v`. `t` receives the full
/// coefficient vector and its values on `design` (directions x K_total).
pub fn propagate_qoi<F>(
    state: &PosteriorState,
    v: &[f64],
    design: &DMatrix<f64>,
    n_samples: usize,
    seed: u64,
    mut t: F,
) -> Result<QoiSample>
where
    F: FnMut(&DVector<f64>, &DVector<f64>) -> Result<f64>,
{
    let draws = state.sample_odf(v, n_samples, seed)?;
    let mut values = Vec::with_capacity(draws.len());
    let mut failures = 0;
    for d in &draws {
        let odf = design * d;
        match t(d, &odf) {
            Ok(x) => values.push(x),
            Err(e) => {
                log::debug!("transform failed on a posterior draw: {e}");
                failures += 1;
            }
        }
    }
    if failures > 0 {
        log::warn!("{failures} of {} draws skipped", draws.len());
    }
    Ok(QoiSample { values, failures })
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    if x.iter().all(|&a| a == x[0]) {
        return (x[0], 0.0);
    }
    let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

/// Coefficient of variation (sample sd over sample mean).
pub fn cv_gfa(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return invalid("coefficient of variation needs at least 2 samples");
    }
    let (m, sd) = mean_sd(samples);
    if !(m > 0.0) {
        return Err(NodfError::Undefined(format!("coefficient of variation with mean {m}")));
    }
    Ok(sd / m)
}

fn canonical_peak(v: &Vector3<f64>) -> Vector3<f64> {
    let flip = if v.z != 0.0 {
        v.z < 0.0
    } else if v.x != 0.0 {
        v.x < 0.0
    } else {
        v.y < 0.0
    };
    if flip {
        -v
    } else {
        *v
    }
}

/// Local maxima over 1-ring neighborhoods at or above `rel_threshold` times
/// the global maximum, one per antipodal pair, ordered by decreasing value.
pub fn detect_peaks(values: &[f64], sphere: &Icosphere, rel_threshold: f64) -> Result<Vec<Direction>> {
    if values.len() != sphere.points.len() {
        return Err(NodfError::ShapeMismatch(format!(
            "{} values for {} icosphere vertices",
            values.len(),
            sphere.points.len()
        )));
    }
    let gmax = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(gmax > 0.0) {
        return Ok(Vec::new());
    }
    let mut cands: Vec<usize> = (0..values.len())
        .filter(|&i| values[i] >= rel_threshold * gmax && sphere.neighbors[i].iter().all(|&j| values[j] <= values[i]))
        .collect();
    cands.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut peaks: Vec<Direction> = Vec::new();
    for i in cands {
        let p = canonical_peak(sphere.points[i].vector());
        // Antipodal partner or an adjacent vertex of a flat-topped lobe.
        if peaks.iter().any(|q| q.vector().dot(&p).abs() > 1.0 - 1e-9) {
            continue;
        }
        let dir = Direction::from_unit(p)?;
        if sphere.neighbors[i]
            .iter()
            .any(|&j| values[j] == values[i] && peaks.iter().any(|q| q.vector().dot(sphere.points[j].vector()).abs() > 1.0 - 1e-9))
        {
            continue;
        }
        peaks.push(dir);
    }
    Ok(peaks)
}

/// Queried by the tracer: peak directions and an anisotropy value at a point.
pub trait DirectionField {
    fn in_domain(&self, x: &Vector3<f64>) -> bool;
    /// Peaks at `x`, strongest first, and the GFA used for termination.
    fn query(&self, x: &Vector3<f64>) -> Result<(Vec<Vector3<f64>>, f64)>;
}

/// Box domain `[lo, hi]` per axis, with `dim` active coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lo: f64,
    pub hi: f64,
    pub dim: usize,
}

impl BoxDomain {
    pub fn contains(&self, x: &Vector3<f64>) -> bool {
        (0..3).all(|i| {
            if i < self.dim {
                x[i] >= self.lo && x[i] <= self.hi
            } else {
                x[i] == 0.0 || self.dim == 3
            }
        })
    }
}

/// Field defined by a closure returning ODF coefficients at a point.
pub struct OdfField<'a, F> {
    pub basis: &'a HarmonicBasis,
    pub sphere: &'a Icosphere,
    pub design: &'a DMatrix<f64>,
    pub domain: BoxDomain,
    pub rel_threshold: f64,
    pub coeffs_at: F,
}

impl<'a, F> OdfField<'a, F>
where
    F: Fn(&Vector3<f64>) -> Result<DVector<f64>>,
{
    pub fn new(basis: &'a HarmonicBasis, sphere: &'a Icosphere, design: &'a DMatrix<f64>, domain: BoxDomain, coeffs_at: F) -> Self {
        Self {
            basis,
            sphere,
            design,
            domain,
            rel_threshold: 0.5,
            coeffs_at,
        }
    }
}

impl<F> DirectionField for OdfField<'_, F>
where
    F: Fn(&Vector3<f64>) -> Result<DVector<f64>>,
{
    fn in_domain(&self, x: &Vector3<f64>) -> bool {
        self.domain.contains(x)
    }

    fn query(&self, x: &Vector3<f64>) -> Result<(Vec<Vector3<f64>>, f64)> {
        let c = (self.coeffs_at)(x)?;
        let vals = self.design * c;
        let g = gfa(vals.as_slice())?;
        let peaks = detect_peaks(vals.as_slice(), self.sphere, self.rel_threshold)?;
        Ok((peaks.iter().map(|p| *p.vector()).collect(), g))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    DomainExit,
    LowAnisotropy,
    MaxSteps,
    NoPeaks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Streamline {
    pub points: Vec<[f64; 3]>,
    pub step: f64,
    pub termination: Termination,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    pub step: f64,
    pub gfa_threshold: f64,
    pub max_steps: usize,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            step: 0.05,
            gfa_threshold: 0.25,
            max_steps: 1000,
        }
    }
}

/// Euler integration along the peak most aligned with the previous step.
/// The first step follows the strongest peak, or `initial` when given.
pub fn trace_streamline<D: DirectionField + ?Sized>(
    field: &D,
    x0: Vector3<f64>,
    initial: Option<Vector3<f64>>,
    cfg: &TraceConfig,
) -> Result<Streamline> {
    if !(cfg.step > 0.0) {
        return invalid(format!("step must be positive, got {}", cfg.step));
    }
    if !field.in_domain(&x0) {
        return invalid("seed point lies outside the domain");
    }
    let mut points = vec![[x0.x, x0.y, x0.z]];
    let mut x = x0;
    let mut prev: Option<Vector3<f64>> = initial.map(|d| d.normalize());
    let finish = |points: Vec<[f64; 3]>, t| Ok(Streamline {
        points,
        step: cfg.step,
        termination: t,
    });
    for _ in 0..cfg.max_steps {
        let (peaks, g) = field.query(&x)?;
        if g < cfg.gfa_threshold {
            return finish(points, Termination::LowAnisotropy);
        }
        if peaks.is_empty() {
            return finish(points, Termination::NoPeaks);
        }
        let dir = match prev {
            None => peaks[0],
            Some(p) => {
                let best = peaks
                    .iter()
                    .max_by(|a, b| a.dot(&p).abs().total_cmp(&b.dot(&p).abs()))
                    .expect("non-empty peaks");
                if best.dot(&p) < 0.0 {
                    -best
                } else {
                    *best
                }
            }
        };
        let next = x + dir * cfg.step;
        if !field.in_domain(&next) {
            return finish(points, Termination::DomainExit);
        }
        x = next;
        prev = Some(dir);
        points.push([x.x, x.y, x.z]);
    }
    finish(points, Termination::MaxSteps)
}

/// Resamples a polyline to `n` points equally spaced in chord length along a
/// natural cubic spline through the input points. Endpoints are kept exactly.
pub fn resample_curve(curve: &[[f64; 3]], n: usize) -> Result<Vec<[f64; 3]>> {
    if curve.len() < 2 {
        return invalid("resampling needs at least 2 points");
    }
    if n < 2 {
        return invalid("resampled curve needs at least 2 points");
    }
    // Drop repeated points, which have no chord length.
    let mut pts: Vec<[f64; 3]> = vec![curve[0]];
    for p in &curve[1..] {
        if dist(p, pts.last().unwrap()) > 0.0 {
            pts.push(*p);
        }
    }
    if pts.len() < 2 {
        return invalid("curve has zero length");
    }
    let mut s = vec![0.0];
    for w in pts.windows(2) {
        s.push(s.last().unwrap() + dist(&w[0], &w[1]));
    }
    let total = *s.last().unwrap();
    let splines: Vec<NaturalSpline> = (0..3)
        .map(|d| NaturalSpline::new(&s, &pts.iter().map(|p| p[d]).collect::<Vec<_>>()))
        .collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = total * i as f64 / (n - 1) as f64;
        out.push([splines[0].eval(t), splines[1].eval(t), splines[2].eval(t)]);
    }
    out[0] = pts[0];
    out[n - 1] = *pts.last().unwrap();
    Ok(out)
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

struct NaturalSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl NaturalSpline {
    fn new(x: &[f64], y: &[f64]) -> Self {
        let n = x.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // Tridiagonal solve for second derivatives with m_0 = m_{n-1} = 0.
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            let mut upper = vec![0.0; k];
            for i in 0..k {
                let h0 = x[i + 1] - x[i];
                let h1 = x[i + 2] - x[i + 1];
                diag[i] = 2.0 * (h0 + h1);
                upper[i] = h1;
                rhs[i] = 6.0 * ((y[i + 2] - y[i + 1]) / h1 - (y[i + 1] - y[i]) / h0);
            }
            for i in 1..k {
                let lower = x[i + 1] - x[i];
                let w = lower / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            let mut sol = vec![0.0; k];
            for i in (0..k).rev() {
                let next = if i + 1 < k { upper[i] * sol[i + 1] } else { 0.0 };
                sol[i] = (rhs[i] - next) / diag[i];
            }
            m[1..n - 1].copy_from_slice(&sol);
        }
        Self {
            x: x.to_vec(),
            y: y.to_vec(),
            m,
        }
    }

    fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        let i = match self.x.partition_point(|&v| v <= t) {
            0 => 0,
            p => (p - 1).min(n - 2),
        };
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - t) / h;
        let b = (t - self.x[i]) / h;
        a * self.y[i] + b * self.y[i + 1] + ((a.powi(3) - a) * self.m[i] + (b.powi(3) - b) * self.m[i + 1]) * h * h / 6.0
    }
}

/// Unit tangents of a resampled curve by central differences (one-sided at the ends).
pub fn curve_tangents(curve: &[[f64; 3]]) -> Vec<Option<Vector3<f64>>> {
    let n = curve.len();
    (0..n)
        .map(|i| {
            let (a, b) = match i {
                0 => (0, 1.min(n - 1)),
                _ if i == n - 1 => (n - 2, n - 1),
                _ => (i - 1, i + 1),
            };
            let d = Vector3::from(curve[b]) - Vector3::from(curve[a]);
            let len = d.norm();
            (len > 0.0).then(|| d / len)
        })
        .collect()
}

/// `asin(sqrt(1 - lambda_max))` of the mean tangent outer product, evaluated
/// as an `atan2` so the equal-split case rounds to exactly `pi / 4`.
pub fn dispersion_from_tangents(tangents: &[Vector3<f64>]) -> Result<f64> {
    if tangents.is_empty() {
        return invalid("dispersion needs at least one tangent");
    }
    let mut a = Matrix3::zeros();
    for t in tangents {
        a += t * t.transpose();
    }
    a /= tangents.len() as f64;
    let lmax = SymmetricEigen::new(a).eigenvalues.max().min(1.0);
    let lmax = lmax.max(0.0);
    Ok((1.0 - lmax).max(0.0).sqrt().atan2(lmax.sqrt()))
}

/// Angular dispersion per curve index `t` across a sample of resampled curves.
pub fn angular_dispersion(curves: &[Vec<[f64; 3]>]) -> Result<Vec<f64>> {
    if curves.len() < 2 {
        return invalid("angular dispersion needs at least 2 curves");
    }
    let n = curves[0].len();
    if curves.iter().any(|c| c.len() != n) {
        return invalid("curves must have equal lengths");
    }
    let tangents: Vec<_> = curves.iter().map(|c| curve_tangents(c)).collect();
    (0..n)
        .map(|t| {
            let ts: Vec<Vector3<f64>> = tangents.iter().filter_map(|c| c[t]).collect();
            if ts.len() < tangents.len() {
                log::debug!("{} zero-length tangents excluded at t = {t}", tangents.len() - ts.len());
            }
            dispersion_from_tangents(&ts)
        })
        .collect()
}

/// Modified band depth over pairs, averaged across coordinates and curve index.
pub fn curve_depth(curves: &[Vec<[f64; 3]>]) -> Result<Vec<f64>> {
    let n = curves.len();
    if n < 3 {
        return invalid("curve depth needs at least 3 curves");
    }
    let len = curves[0].len();
    if curves.iter().any(|c| c.len() != len) {
        return invalid("curves must have equal lengths");
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let mut depth = vec![0.0; n];
    let c2 = |m: usize| (m * m.saturating_sub(1) / 2) as f64;
    for t in 0..len {
        for d in 0..3 {
            let vals: Vec<f64> = curves.iter().map(|c| c[t][d]).collect();
            for (i, &v) in vals.iter().enumerate() {
                // A pair's band misses v only if both members lie strictly on one side.
                let below = vals.iter().filter(|&&u| u < v).count();
                let above = vals.iter().filter(|&&u| u > v).count();
                depth[i] += (pairs - c2(below) - c2(above)) / pairs;
            }
        }
    }
    let norm = (len * 3) as f64;
    Ok(depth.into_iter().map(|x| x / norm).collect())
}

/// Root-mean-square pointwise distance between equal-length curves.
pub fn curve_l2_distance(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return invalid(format!("curve lengths differ: {} vs {}", a.len(), b.len()));
    }
    let s: f64 = a.iter().zip(b).map(|(p, q)| dist(p, q).powi(2)).sum();
    Ok((s / a.len() as f64).sqrt())
}

/// Minimum distance from `gt` over the `k` deepest curves of `sample`.
pub fn deepest_min_distance(gt: &[[f64; 3]], sample: &[Vec<[f64; 3]>], k: usize) -> Result<f64> {
    if sample.is_empty() || k == 0 {
        return invalid("need a non-empty sample and k >= 1");
    }
    let k = if sample.len() < k {
        log::warn!("sample of {} curves is smaller than k = {k}; using all", sample.len());
        sample.len()
    } else {
        k
    };
    let order: Vec<usize> = if sample.len() >= 3 {
        let depth = curve_depth(sample)?;
        let mut idx: Vec<usize> = (0..sample.len()).collect();
        idx.sort_by(|&a, &b| depth[b].total_cmp(&depth[a]).then(a.cmp(&b)));
        idx
    } else {
        (0..sample.len()).collect()
    };
    order[..k]
        .iter()
        .map(|&i| curve_l2_distance(gt, &sample[i]))
        .try_fold(f64::INFINITY, |acc, d| d.map(|d| acc.min(d)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExceedanceTest {
    pub reject: bool,
    pub t_statistic: f64,
    pub degenerate: bool,
}

/// One-sided t-test of `mean(samples) > mu0` at level `alpha`.
pub fn gfa_exceedance_test(samples: &[f64], mu0: f64, alpha: f64) -> Result<ExceedanceTest> {
    if samples.len() < 2 {
        return invalid("t-test needs at least 2 samples");
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    let (m, sd) = mean_sd(samples);
    if sd == 0.0 {
        let t = if m > mu0 {
            f64::INFINITY
        } else if m < mu0 {
            f64::NEG_INFINITY
        } else {
            0.0
        };
        return Ok(ExceedanceTest {
            reject: m > mu0,
            t_statistic: t,
            degenerate: true,
        });
    }
    let n = samples.len() as f64;
    let t = (m - mu0) / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| NodfError::InvalidArgument(e.to_string()))?;
    let crit = dist.inverse_cdf(1.0 - alpha);
    Ok(ExceedanceTest {
        reject: t > crit,
        t_statistic: t,
        degenerate: false,
    })
}
