//! Synthetic multi-tensor phantoms and noisy signal generation.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, NodfError, Result};
use crate::rng;
use crate::sphere::{fibonacci_sphere, Direction, FunkRadonSpectrum, HarmonicBasis};

/// Region label of a phantom voxel. In the 2D phantom bundle A runs along x
/// and bundle B along y; in the 3D phantom they are the two helices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    BundleA,
    BundleB,
    Crossing,
    Background,
}

impl Region {
    pub fn code(self) -> u8 {
        match self {
            Region::BundleA => 0,
            Region::BundleB => 1,
            Region::Crossing => 2,
            Region::Background => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => Region::BundleA,
            1 => Region::BundleB,
            2 => Region::Crossing,
            3 => Region::Background,
            _ => return Err(NodfError::Parse(format!("unknown region code {code}"))),
        })
    }
}

/// Cylindrical tensor eigenvalues (mm^2/s) and b-value (s/mm^2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub eigenvalues: [f64; 3],
    pub b_value: f64,
}

impl TensorSpec {
    /// (1.5, 0.03, 0.03) x 1e-3 mm^2/s at b = 3000.
    pub fn desk() -> Self {
        Self {
            eigenvalues: [1.5e-3, 0.03e-3, 0.03e-3],
            b_value: 3000.0,
        }
    }

    /// (15, 0.3, 0.3) x 1e-2 mm^2/s at b = 3000, taken at face value. The axial
    /// signal underflows to zero with these magnitudes.
    pub fn literal() -> Self {
        Self {
            eigenvalues: [15e-2, 0.3e-2, 0.3e-2],
            b_value: 3000.0,
        }
    }

    /// Cylindrical tensor with principal axis `axis`.
    pub fn tensor(&self, axis: &Vector3<f64>) -> Matrix3<f64> {
        let [l1, l2, _] = self.eigenvalues;
        let u = axis.normalize();
        Matrix3::identity() * l2 + u * u.transpose() * (l1 - l2)
    }

    pub fn isotropic(&self) -> Matrix3<f64> {
        let md = self.eigenvalues.iter().sum::<f64>() / 3.0;
        Matrix3::identity() * md
    }
}

impl Default for TensorSpec {
    fn default() -> Self {
        Self::desk()
    }
}

/// `(1/T) sum_t exp(-b p^T D_t p)`.
pub fn multi_tensor_signal(tensors: &[Matrix3<f64>], p: &Direction, b: f64) -> Result<f64> {
    if tensors.is_empty() {
        return invalid("multi_tensor_signal needs at least one tensor");
    }
    let v = p.vector();
    let sum: f64 = tensors.iter().map(|d| (-b * v.dot(&(d * v))).exp()).sum();
    Ok(sum / tensors.len() as f64)
}

/// A grid of voxels, each carrying one or more diffusion tensors.
#[derive(Debug, Clone)]
pub struct TensorPhantom {
    /// Grid size per axis; x varies fastest in the voxel order.
    pub shape: Vec<usize>,
    /// N x D voxel centers in [-1, 1]^D.
    pub coords: DMatrix<f64>,
    pub tensors: Vec<Vec<Matrix3<f64>>>,
    /// Principal fiber axes per voxel (empty for isotropic voxels).
    pub fiber_axes: Vec<Vec<Vector3<f64>>>,
    pub labels: Vec<Region>,
    pub spec: TensorSpec,
}

impl TensorPhantom {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.coords.ncols()
    }

    pub fn signal(&self, voxel: usize, p: &Direction) -> f64 {
        multi_tensor_signal(&self.tensors[voxel], p, self.spec.b_value).expect("phantom voxels carry tensors")
    }

    pub fn count(&self, region: Region) -> usize {
        self.labels.iter().filter(|l| **l == region).count()
    }
}

fn axis_coord(i: usize, n: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / (n - 1) as f64
}

/// Two perpendicular straight bundles laid out as three vertical stripes: the
/// x-bundle covers `x <= -1 + 2w`, the y-bundle covers `x >= 1 - 2w`, and the
/// overlap is the crossing region.
pub fn make_crossing_2d(nx: usize, ny: usize, bundle_width: f64, spec: TensorSpec) -> Result<TensorPhantom> {
    if nx < 4 || ny < 4 {
        return invalid(format!("crossing phantom needs nx, ny >= 4, got {nx}x{ny}"));
    }
    if !(bundle_width > 0.0 && bundle_width <= 1.0) {
        return invalid(format!("bundle width must lie in (0, 1], got {bundle_width}"));
    }
    let n = nx * ny;
    let mut coords = DMatrix::zeros(n, 2);
    let mut tensors = Vec::with_capacity(n);
    let mut axes = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let ex = Vector3::x();
    let ey = Vector3::y();
    let tol = 1e-12;
    for j in 0..ny {
        for i in 0..nx {
            let idx = i + nx * j;
            let x = axis_coord(i, nx);
            coords[(idx, 0)] = x;
            coords[(idx, 1)] = axis_coord(j, ny);
            let in_a = x <= -1.0 + 2.0 * bundle_width + tol;
            let in_b = x >= 1.0 - 2.0 * bundle_width - tol;
            let (label, ax) = match (in_a, in_b) {
                (true, true) => (Region::Crossing, vec![ex, ey]),
                (true, false) => (Region::BundleA, vec![ex]),
                (false, true) => (Region::BundleB, vec![ey]),
                (false, false) => (Region::Background, vec![]),
            };
            tensors.push(if ax.is_empty() {
                vec![spec.isotropic()]
            } else {
                ax.iter().map(|a| spec.tensor(a)).collect()
            });
            axes.push(ax);
            labels.push(label);
        }
    }
    Ok(TensorPhantom {
        shape: vec![nx, ny],
        coords,
        tensors,
        fiber_axes: axes,
        labels,
        spec,
    })
}

/// Two counter-rotating helices around the z axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaduceusGeometry {
    pub radius: f64,
    /// Angular frequency of the helices in radians per unit z.
    pub omega: f64,
    pub tube_radius: f64,
}

impl Default for CaduceusGeometry {
    fn default() -> Self {
        Self {
            radius: 0.4,
            omega: PI,
            tube_radius: 0.2,
        }
    }
}

impl CaduceusGeometry {
    /// Centerline point of helix `h` (0 or 1) at parameter `t` (= z).
    pub fn centerline(&self, h: usize, t: f64) -> Vector3<f64> {
        let s = if h == 0 { 1.0 } else { -1.0 };
        Vector3::new(self.radius * (self.omega * t).cos(), s * self.radius * (self.omega * t).sin(), t)
    }

    /// Unit tangent of helix `h` at parameter `t`, oriented towards +z.
    pub fn tangent(&self, h: usize, t: f64) -> Vector3<f64> {
        let s = if h == 0 { 1.0 } else { -1.0 };
        let ro = self.radius * self.omega;
        Vector3::new(-ro * (self.omega * t).sin(), s * ro * (self.omega * t).cos(), 1.0).normalize()
    }

    /// Parameter of the centerline point nearest to `x`, and the distance.
    pub fn nearest(&self, h: usize, x: &Vector3<f64>) -> (f64, f64) {
        let (lo, hi) = (x.z - 1.0, x.z + 1.0);
        let steps = 400;
        let mut best = (x.z, f64::MAX);
        for i in 0..=steps {
            let t = lo + (hi - lo) * i as f64 / steps as f64;
            let d = (self.centerline(h, t) - x).norm_squared();
            if d < best.1 {
                best = (t, d);
            }
        }
        // Golden-section refinement on the bracketing cell.
        let h_step = (hi - lo) / steps as f64;
        let (mut a, mut b) = (best.0 - h_step, best.0 + h_step);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let f = |t: f64| (self.centerline(h, t) - x).norm_squared();
        for _ in 0..60 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        let t = 0.5 * (a + b);
        (t, f(t).sqrt())
    }

    /// Angle in degrees between the two helix tangents at parameter `t`.
    pub fn crossing_angle(&self, t: f64) -> f64 {
        self.tangent(0, t).dot(&self.tangent(1, t)).clamp(-1.0, 1.0).acos().to_degrees()
    }
}

/// Caduceus phantom: voxels within `tube_radius` of a helix carry a cylindrical
/// tensor along the tangent at the nearest centerline point; voxels in both
/// tubes carry both tensors; the rest are isotropic background.
pub fn make_caduceus_3d(
    nx: usize,
    ny: usize,
    nz: usize,
    geometry: CaduceusGeometry,
    spec: TensorSpec,
) -> Result<TensorPhantom> {
    if nx < 8 || ny < 8 || nz < 8 {
        return invalid(format!("caduceus phantom needs dims >= 8, got {nx}x{ny}x{nz}"));
    }
    let n = nx * ny * nz;
    let mut coords = DMatrix::zeros(n, 3);
    let mut tensors = Vec::with_capacity(n);
    let mut axes = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = i + nx * (j + ny * k);
                let x = Vector3::new(axis_coord(i, nx), axis_coord(j, ny), axis_coord(k, nz));
                for d in 0..3 {
                    coords[(idx, d)] = x[d];
                }
                let mut ax = Vec::new();
                let mut member = [false; 2];
                for (h, m) in member.iter_mut().enumerate() {
                    let (t, dist) = geometry.nearest(h, &x);
                    if dist <= geometry.tube_radius {
                        *m = true;
                        ax.push(geometry.tangent(h, t));
                    }
                }
                let label = match member {
                    [true, true] => Region::Crossing,
                    [true, false] => Region::BundleA,
                    [false, true] => Region::BundleB,
                    [false, false] => Region::Background,
                };
                tensors.push(if ax.is_empty() {
                    vec![spec.isotropic()]
                } else {
                    ax.iter().map(|a| spec.tensor(a)).collect()
                });
                axes.push(ax);
                labels.push(label);
            }
        }
    }
    Ok(TensorPhantom {
        shape: vec![nx, ny, nz],
        coords,
        tensors,
        fiber_axes: axes,
        labels,
        spec,
    })
}

/// Signal and ODF coefficients per voxel (one column per voxel).
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthField {
    pub l_max: usize,
    pub signal: DMatrix<f64>,
    pub odf: DMatrix<f64>,
}

impl GroundTruthField {
    pub fn from_signal(l_max: usize, signal: DMatrix<f64>) -> Result<Self> {
        let basis = HarmonicBasis::new(l_max)?;
        if signal.nrows() != basis.len() {
            return Err(NodfError::ShapeMismatch(format!(
                "signal coefficients have {} rows, basis has {}",
                signal.nrows(),
                basis.len()
            )));
        }
        let fr = FunkRadonSpectrum::new(&basis);
        let mut odf = signal.clone();
        for (k, f) in fr.forward.iter().enumerate() {
            odf.row_mut(k).scale_mut(*f);
        }
        Ok(Self { l_max, signal, odf })
    }

    pub fn len(&self) -> usize {
        self.signal.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.signal.ncols() == 0
    }
}

/// Least-squares projector `(Phi^T Phi)^-1 Phi^T` onto the basis span.
pub(crate) fn projector(phi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = phi.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-10 * smax) {
        return Err(NodfError::NumericalRank(format!(
            "design of size {}x{} has singular value ratio {:.3e}",
            phi.nrows(),
            phi.ncols(),
            smin / smax
        )));
    }
    svd.pseudo_inverse(0.0).map_err(|e| NodfError::NumericalRank(e.to_string()))
}

/// Projects each voxel's signal function onto the harmonic span using
/// `n_dense` Fibonacci directions.
pub fn ground_truth_coeffs(phantom: &TensorPhantom, l_max: usize, n_dense: usize) -> Result<GroundTruthField> {
    let basis = HarmonicBasis::new(l_max)?;
    let points = fibonacci_sphere(n_dense.max(1))?;
    ground_truth_from_fn(&basis, &points, phantom.len(), n_dense, |v, p| phantom.signal(v, p))
}

pub(crate) fn ground_truth_from_fn(
    basis: &HarmonicBasis,
    points: &[Direction],
    n_voxels: usize,
    n_dense: usize,
    f: impl Fn(usize, &Direction) -> f64,
) -> Result<GroundTruthField> {
    if n_dense < 4 * basis.len() {
        return Err(NodfError::NumericalRank(format!(
            "{n_dense} directions are too few for {} harmonics (need at least {})",
            basis.len(),
            4 * basis.len()
        )));
    }
    let proj = projector(&basis.matrix(points))?;
    let mut values = DMatrix::zeros(points.len(), n_voxels);
    for v in 0..n_voxels {
        for (i, p) in points.iter().enumerate() {
            values[(i, v)] = f(v, p);
        }
    }
    GroundTruthField::from_signal(basis.l_max(), proj * values)
}

/// Clean signal evaluations of `field` at `directions` plus i.i.d. Gaussian noise (M x N).
pub fn sample_noisy(field: &GroundTruthField, directions: &[Direction], sigma_e: f64, seed: u64) -> Result<DMatrix<f64>> {
    if !(sigma_e >= 0.0) {
        return invalid(format!("noise level must be non-negative, got {sigma_e}"));
    }
    let basis = HarmonicBasis::new(field.l_max)?;
    let mut y = basis.matrix(directions) * &field.signal;
    if sigma_e > 0.0 {
        for (v, mut col) in y.column_iter_mut().enumerate() {
            let mut r = rng::stream(seed, v as u64);
            for x in col.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut r);
                *x += sigma_e * z;
            }
        }
    }
    Ok(y)
}

/// Unit-mean Gaussian b=0 draws (N x p).
pub fn sample_b0(n: usize, p: usize, sigma_e: f64, seed: u64) -> Result<DMatrix<f64>> {
    if p < 2 {
        return invalid(format!("need at least 2 b=0 volumes, got {p}"));
    }
    if !(sigma_e >= 0.0) {
        return invalid(format!("noise level must be non-negative, got {sigma_e}"));
    }
    let mut out = DMatrix::from_element(n, p, 1.0);
    for i in 0..n {
        let mut r = rng::stream(seed, i as u64);
        for j in 0..p {
            let z: f64 = StandardNormal.sample(&mut r);
            out[(i, j)] += sigma_e * z;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn signal_examples() {
        let spec = TensorSpec::desk();
        let d = spec.tensor(&Vector3::x());
        let px = Direction::from_unit(Vector3::x()).unwrap();
        assert_eq!(multi_tensor_signal(&[d], &px, 0.0).unwrap(), 1.0);
        assert_relative_eq!(multi_tensor_signal(&[d], &px, 3000.0).unwrap(), (-4.5f64).exp(), epsilon = 1e-15);
        let p = Direction::normalize(Vector3::new(0.3, 0.4, 0.5)).unwrap();
        assert_relative_eq!(
            multi_tensor_signal(&[d, d], &p, 3000.0).unwrap(),
            multi_tensor_signal(&[d], &p, 3000.0).unwrap(),
            epsilon = 1e-15
        );
        assert!(multi_tensor_signal(&[], &p, 1.0).is_err());
    }

    #[test]
    fn crossing_layout() {
        let ph = make_crossing_2d(16, 16, 2.0 / 3.0, TensorSpec::desk()).unwrap();
        assert_eq!(ph.len(), 256);
        assert!(ph.count(Region::BundleA) > 0);
        assert!(ph.count(Region::BundleB) > 0);
        assert!(ph.count(Region::Crossing) > 0);
        for v in 0..ph.len() {
            match ph.labels[v] {
                Region::Crossing => {
                    assert_eq!(ph.tensors[v].len(), 2);
                    assert_eq!(ph.fiber_axes[v], vec![Vector3::x(), Vector3::y()]);
                }
                Region::BundleA => assert_eq!(ph.fiber_axes[v], vec![Vector3::x()]),
                Region::BundleB => assert_eq!(ph.fiber_axes[v], vec![Vector3::y()]),
                Region::Background => unreachable!(),
            }
            for t in &ph.tensors[v] {
                assert!(t.symmetric_eigenvalues().min() > 0.0);
            }
        }
        assert!(make_crossing_2d(3, 16, 0.5, TensorSpec::desk()).is_err());
    }

    #[test]
    fn caduceus_geometry() {
        let g = CaduceusGeometry::default();
        for t in [-0.9, -0.2, 0.0, 0.37, 1.0] {
            assert_relative_eq!(g.tangent(0, t).norm(), 1.0, epsilon = 1e-14);
        }
        assert!((g.crossing_angle(0.0) - g.crossing_angle(0.25)).abs() > 5.0);
        let x = g.centerline(1, 0.3) + Vector3::new(0.0, 0.0, 0.01);
        let (t, d) = g.nearest(1, &x);
        assert!(d <= 0.01 + 1e-9);
        assert!((t - 0.3).abs() < 0.02);

        let ph = make_caduceus_3d(24, 24, 24, g, TensorSpec::desk()).unwrap();
        assert!(ph.count(Region::Crossing) > 0);
        assert!(ph.count(Region::BundleA) > 0);
        assert!(ph.count(Region::Background) > 0);
        // Crossing angles differ between crossing voxels.
        let angles: Vec<f64> = (0..ph.len())
            .filter(|&v| ph.labels[v] == Region::Crossing)
            .map(|v| ph.fiber_axes[v][0].dot(&ph.fiber_axes[v][1]).abs().acos().to_degrees())
            .collect();
        let spread = angles.iter().cloned().fold(f64::MIN, f64::max) - angles.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread > 5.0, "spread {spread}");
    }

    #[test]
    fn projection_recovers_span_and_isotropy() {
        let basis = HarmonicBasis::new(8).unwrap();
        let pts = fibonacci_sphere(400).unwrap();
        let c: Vec<f64> = (0..45).map(|j| ((j * 7 % 11) as f64 - 5.0) / 10.0).collect();
        let field = ground_truth_from_fn(&basis, &pts, 1, 400, |_, p| {
            basis.eval(p).iter().zip(&c).map(|(a, b)| a * b).sum()
        })
        .unwrap();
        for j in 0..45 {
            assert!((field.signal[(j, 0)] - c[j]).abs() < 1e-10);
        }

        let iso = [TensorSpec::desk().isotropic()];
        let f = ground_truth_from_fn(&basis, &pts, 1, 400, |_, p| multi_tensor_signal(&iso, p, 3000.0).unwrap()).unwrap();
        assert!(f.signal[(0, 0)] > 0.0);
        for j in 1..45 {
            assert!(f.signal[(j, 0)].abs() < 1e-10);
        }
        assert!(ground_truth_from_fn(&basis, &pts, 1, 100, |_, _| 1.0).is_err());
    }

    #[test]
    fn residual_shrinks_with_order() {
        let d = TensorSpec::desk().tensor(&Vector3::new(1.0, 0.5, 0.2));
        let pts = fibonacci_sphere(500).unwrap();
        let y: Vec<f64> = pts.iter().map(|p| multi_tensor_signal(&[d], p, 3000.0).unwrap()).collect();
        let mut last = f64::MAX;
        for l in [4, 6, 8] {
            let basis = HarmonicBasis::new(l).unwrap();
            let phi = basis.matrix(&pts);
            let f = ground_truth_from_fn(&basis, &pts, 1, 500, |_, p| multi_tensor_signal(&[d], p, 3000.0).unwrap()).unwrap();
            let fit = &phi * f.signal.column(0);
            let res: f64 = fit.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(res <= last + 1e-12);
            last = res;
        }
    }

    #[test]
    fn odf_constant_positive_and_consistent() {
        let ph = make_crossing_2d(6, 6, 2.0 / 3.0, TensorSpec::desk()).unwrap();
        let f = ground_truth_coeffs(&ph, 8, 400).unwrap();
        let fr = FunkRadonSpectrum::new(&HarmonicBasis::new(8).unwrap());
        for v in 0..f.len() {
            assert!(f.odf[(0, v)] > 0.0);
            for k in 0..45 {
                assert_relative_eq!(f.odf[(k, v)], f.signal[(k, v)] * fr.forward[k], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn noise_examples() {
        let ph = make_crossing_2d(4, 4, 2.0 / 3.0, TensorSpec::desk()).unwrap();
        let f = ground_truth_coeffs(&ph, 8, 400).unwrap();
        let dirs = fibonacci_sphere(20).unwrap();
        let clean = sample_noisy(&f, &dirs, 0.0, 1).unwrap();
        let phi = HarmonicBasis::new(8).unwrap().matrix(&dirs);
        assert_eq!(clean, &phi * &f.signal);
        assert_eq!(sample_noisy(&f, &dirs, 0.05, 9).unwrap(), sample_noisy(&f, &dirs, 0.05, 9).unwrap());

        // CLT check on one voxel and direction: 3 sigma / sqrt(1e4).
        let sigma = 0.05;
        let one = GroundTruthField::from_signal(8, f.signal.columns(5, 1).into_owned()).unwrap();
        let p = &dirs[3..4];
        let clean = sample_noisy(&one, p, 0.0, 0).unwrap()[(0, 0)];
        let mean = (0..10_000u64).map(|s| sample_noisy(&one, p, sigma, 1000 + s).unwrap()[(0, 0)]).sum::<f64>() / 1e4;
        assert!((mean - clean).abs() < 3.0 * sigma / 100.0);
    }

    #[test]
    fn b0_examples() {
        assert_eq!(sample_b0(3, 4, 0.0, 1).unwrap(), DMatrix::from_element(3, 4, 1.0));
        assert!(sample_b0(3, 1, 0.1, 1).is_err());
        let b = sample_b0(500, 40, 0.1, 5).unwrap();
        assert_eq!(b, sample_b0(500, 40, 0.1, 5).unwrap());
        let m = b.mean();
        let var = b.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (b.len() - 1) as f64;
        assert!((var / 0.01 - 1.0).abs() < 0.05);
    }
}
