//! Even-degree real spherical harmonics, the Funk-Radon spectrum, and point
//! sets on the unit sphere.
//!
//! Basis convention: for degree `k` (even) and phase `m`,
//!
//! ```text
//! m < 0 :  sqrt(2) * N_k^|m| * P_k^|m|(cos a1) * cos(|m| a2)
//! m = 0 :            N_k^0   * P_k^0(cos a1)
//! m > 0 :  sqrt(2) * N_k^m   * P_k^m(cos a1)  * sin(m a2)
//! ```
//!
//! with `a1` the polar and `a2` the azimuthal angle, `N_k^m` the usual
//! orthonormalizing constant, and `P_k^m` evaluated without the
//! Condon-Shortley phase. Column 0 is the positive constant `1/(2 sqrt(pi))`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{DMatrix, Vector3};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, NodfError, Result};
use crate::rng;

const UNIT_TOL: f64 = 1e-12;

/// A point on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction(Vector3<f64>);

impl Direction {
    /// Wraps a vector that is already unit length (within 1e-12).
    pub fn from_unit(v: Vector3<f64>) -> Result<Self> {
        let n = v.norm();
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
            return invalid(format!("direction {v:?} is not unit-norm (|p| = {n})"));
        }
        Ok(Self(v))
    }

    /// Normalizes a non-zero vector.
    pub fn normalize(v: Vector3<f64>) -> Result<Self> {
        let n = v.norm();
        if !(n.is_finite() && n > 0.0) {
            return invalid(format!("cannot normalize {v:?}"));
        }
        Ok(Self(v / n))
    }

    pub fn from_angles(polar: f64, azimuth: f64) -> Self {
        let s = polar.sin();
        Self(Vector3::new(s * azimuth.cos(), s * azimuth.sin(), polar.cos()))
    }

    pub fn vector(&self) -> &Vector3<f64> {
        &self.0
    }

    /// (polar in [0, pi], azimuth in (-pi, pi]).
    pub fn angles(&self) -> (f64, f64) {
        let v = self.0;
        (v.z.clamp(-1.0, 1.0).acos(), v.y.atan2(v.x))
    }

    pub fn antipode(&self) -> Self {
        Self(-self.0)
    }

    /// Representative of the antipodal pair {p, -p}: non-negative z, then x, then y.
    pub fn canonical(&self) -> Self {
        let v = self.0;
        let flip = if v.z != 0.0 {
            v.z < 0.0
        } else if v.x != 0.0 {
            v.x < 0.0
        } else {
            v.y < 0.0
        };
        if flip {
            Self(-v)
        } else {
            *self
        }
    }

    pub fn dot(&self, other: &Direction) -> f64 {
        self.0.dot(&other.0)
    }
}

/// Flat index of the harmonic of even degree `k` and phase `m`.
pub fn sh_index(k: usize, m: i32) -> Result<usize> {
    if k % 2 != 0 {
        return invalid(format!("degree {k} is odd"));
    }
    if m.unsigned_abs() as usize > k {
        return invalid(format!("phase {m} out of range for degree {k}"));
    }
    let base = (k * k + k + 2) / 2;
    Ok((base as i64 + m as i64 - 1) as usize)
}

/// Number of even-degree harmonics up to and including `l_max`.
pub fn harmonic_count(l_max: usize) -> usize {
    (l_max + 1) * (l_max + 2) / 2
}

/// Even-degree real symmetric harmonic basis up to `l_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicBasis {
    l_max: usize,
    degrees: Vec<usize>,
    orders: Vec<i32>,
}

impl HarmonicBasis {
    pub fn new(l_max: usize) -> Result<Self> {
        if l_max % 2 != 0 {
            return invalid(format!("l_max must be even, got {l_max}"));
        }
        let total = harmonic_count(l_max);
        let mut degrees = vec![0; total];
        let mut orders = vec![0; total];
        for k in (0..=l_max).step_by(2) {
            for m in -(k as i32)..=(k as i32) {
                let j = sh_index(k, m)?;
                degrees[j] = k;
                orders[j] = m;
            }
        }
        Ok(Self {
            l_max,
            degrees,
            orders,
        })
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    /// Total number of harmonics, constant included.
    pub fn len(&self) -> usize {
        self.degrees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.degrees.is_empty()
    }

    /// Number of non-constant harmonics.
    pub fn anisotropic_len(&self) -> usize {
        self.len() - 1
    }

    pub fn degree(&self, j: usize) -> usize {
        self.degrees[j]
    }

    pub fn order(&self, j: usize) -> i32 {
        self.orders[j]
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    /// Writes all basis values at `p` into `out` (length `len()`).
    pub fn eval_into(&self, p: &Direction, out: &mut [f64]) {
        assert_eq!(out.len(), self.len());
        // Evaluating on the canonical representative makes phi(p) == phi(-p) bitwise.
        let (polar, azimuth) = p.canonical().angles();
        let x = polar.cos();
        let s = polar.sin();
        let legendre = normalized_legendre(self.l_max, x, s);
        for (j, out_j) in out.iter_mut().enumerate() {
            let k = self.degrees[j];
            let m = self.orders[j];
            let am = m.unsigned_abs() as usize;
            let q = legendre[k][am];
            *out_j = match m.cmp(&0) {
                std::cmp::Ordering::Equal => q,
                std::cmp::Ordering::Less => std::f64::consts::SQRT_2 * q * (am as f64 * azimuth).cos(),
                std::cmp::Ordering::Greater => std::f64::consts::SQRT_2 * q * (am as f64 * azimuth).sin(),
            };
        }
    }

    pub fn eval(&self, p: &Direction) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(p, &mut out);
        out
    }

    /// Design matrix with one row per point and one column per harmonic.
    pub fn matrix(&self, points: &[Direction]) -> DMatrix<f64> {
        let mut phi = DMatrix::zeros(points.len(), self.len());
        let mut row = vec![0.0; self.len()];
        for (i, p) in points.iter().enumerate() {
            self.eval_into(p, &mut row);
            for (j, v) in row.iter().enumerate() {
                phi[(i, j)] = *v;
            }
        }
        phi
    }

    /// Design matrix from raw vectors; rejects non-unit points.
    pub fn matrix_from_vectors(&self, points: &[Vector3<f64>]) -> Result<DMatrix<f64>> {
        let dirs = points
            .iter()
            .map(|v| Direction::from_unit(*v))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.matrix(&dirs))
    }

    /// Same as [`matrix`](Self::matrix) with the constant column dropped.
    pub fn anisotropic_matrix(&self, points: &[Direction]) -> DMatrix<f64> {
        let full = self.matrix(points);
        full.columns(1, self.len() - 1).into_owned()
    }
}

/// Orthonormalized associated Legendre values `N_l^m P_l^m(x)` (no
/// Condon-Shortley phase) for `0 <= m <= l <= l_max`, by the standard
/// three-term recurrence in `x = cos(polar)`; `s = sin(polar) >= 0`.
fn normalized_legendre(l_max: usize, x: f64, s: f64) -> Vec<Vec<f64>> {
    let mut q = vec![vec![0.0; l_max + 1]; l_max + 1];
    q[0][0] = 0.5 / PI.sqrt();
    for m in 1..=l_max {
        let mf = m as f64;
        q[m][m] = ((2.0 * mf + 1.0) / (2.0 * mf)).sqrt() * s * q[m - 1][m - 1];
    }
    for m in 0..l_max {
        q[m + 1][m] = (2.0 * m as f64 + 3.0).sqrt() * x * q[m][m];
    }
    for m in 0..=l_max {
        for l in (m + 2)..=l_max {
            let lf = l as f64;
            let mf = m as f64;
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0).powi(2) - mf * mf) / (4.0 * (lf - 1.0).powi(2) - 1.0)).sqrt();
            q[l][m] = a * (x * q[l - 1][m] - b * q[l - 2][m]);
        }
    }
    q
}

/// Legendre polynomial `P_l(0)`.
pub fn legendre_at_zero(l: usize) -> f64 {
    if l % 2 == 1 {
        return 0.0;
    }
    let mut p = 1.0;
    let mut k = 2;
    while k <= l {
        p *= -((k - 1) as f64) / k as f64;
        k += 2;
    }
    p
}

/// Eigenvalues of the Funk-Radon transform on the harmonic basis.
#[derive(Debug, Clone, PartialEq)]
pub struct FunkRadonSpectrum {
    /// `2 pi P_l(0)` per harmonic index: maps signal coefficients to ODF coefficients.
    pub forward: Vec<f64>,
    /// Reciprocals of `forward`: maps ODF coefficients to signal coefficients.
    pub inverse: Vec<f64>,
}

impl FunkRadonSpectrum {
    pub fn new(basis: &HarmonicBasis) -> Self {
        let forward: Vec<f64> = basis
            .degrees()
            .iter()
            .map(|&l| 2.0 * PI * legendre_at_zero(l))
            .collect();
        let inverse = forward.iter().map(|v| 1.0 / v).collect();
        Self { forward, inverse }
    }

    pub fn to_odf(&self, signal_coeffs: &[f64]) -> Vec<f64> {
        signal_coeffs.iter().zip(&self.forward).map(|(c, f)| c * f).collect()
    }

    pub fn to_signal(&self, odf_coeffs: &[f64]) -> Vec<f64> {
        odf_coeffs.iter().zip(&self.inverse).map(|(c, f)| c * f).collect()
    }
}

pub fn funk_radon_spectrum(l_max: usize) -> Result<FunkRadonSpectrum> {
    Ok(FunkRadonSpectrum::new(&HarmonicBasis::new(l_max)?))
}

/// `n` quasi-uniform directions on the golden-angle spiral.
pub fn fibonacci_sphere(n: usize) -> Result<Vec<Direction>> {
    if n == 0 {
        return invalid("fibonacci_sphere needs n >= 1");
    }
    let golden = PI * (3.0 - 5f64.sqrt());
    Ok((0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            let v = Vector3::new(r * phi.cos(), r * phi.sin(), z);
            Direction(v / v.norm())
        })
        .collect())
}

/// Coulomb energy of the antipodally symmetrized charge set `{+p_i, -p_i}`
/// (pairs between distinct directions only).
pub fn coulomb_energy(points: &[Vector3<f64>]) -> f64 {
    let mut e = 0.0;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            e += 1.0 / (points[i] - points[j]).norm() + 1.0 / (points[i] + points[j]).norm();
        }
    }
    e
}

fn coulomb_gradient(points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let mut grad = vec![Vector3::zeros(); points.len()];
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let dm = points[i] - points[j];
            let dp = points[i] + points[j];
            let gm = -dm / dm.norm().powi(3);
            let gp = -dp / dp.norm().powi(3);
            grad[i] += gm + gp;
            grad[j] += -gm + gp;
        }
    }
    grad
}

/// Result of the repulsion optimizer, including the accepted-energy trace.
#[derive(Debug, Clone)]
pub struct RepulsionResult {
    pub directions: Vec<Direction>,
    pub energy_trace: Vec<f64>,
}

/// Gradient directions spread by electrostatic repulsion of antipodal charge pairs.
pub fn electrostatic_directions(m: usize, iterations: usize, seed: u64) -> Result<Vec<Direction>> {
    Ok(electrostatic_repulsion(m, iterations, seed)?.directions)
}

/// Projected gradient descent on [`coulomb_energy`] from a uniform random
/// start. Steps that raise the energy are rejected and the step size halved.
pub fn electrostatic_repulsion(m: usize, iterations: usize, seed: u64) -> Result<RepulsionResult> {
    if m < 2 {
        return invalid(format!("electrostatic_directions needs M >= 2, got {m}"));
    }
    let mut rng = rng::seeded(seed);
    let mut pts: Vec<Vector3<f64>> = (0..m)
        .map(|_| loop {
            let v = Vector3::new(
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            );
            let n: f64 = v.norm();
            if n > 1e-8 {
                break v / n;
            }
        })
        .collect();
    let mut energy = coulomb_energy(&pts);
    let mut trace = vec![energy];
    let mut step = 0.1 / m as f64;
    for _ in 0..iterations {
        let grad = coulomb_gradient(&pts);
        // Tangential component only.
        let tangent: Vec<Vector3<f64>> = pts
            .iter()
            .zip(&grad)
            .map(|(p, g)| g - p * p.dot(g))
            .collect();
        let gmax = tangent.iter().map(|t| t.norm()).fold(0.0, f64::max);
        if gmax < 1e-14 {
            break;
        }
        let candidate: Vec<Vector3<f64>> = pts
            .iter()
            .zip(&tangent)
            .map(|(p, t)| {
                let q = p - t * (step / gmax);
                q / q.norm()
            })
            .collect();
        let e_new = coulomb_energy(&candidate);
        if e_new <= energy {
            pts = candidate;
            energy = e_new;
            step *= 1.2;
        } else {
            step *= 0.5;
        }
        trace.push(energy);
    }
    Ok(RepulsionResult {
        directions: pts.into_iter().map(Direction).collect(),
        energy_trace: trace,
    })
}

/// Subdivided icosahedron with vertex 1-ring adjacency.
#[derive(Debug, Clone)]
pub struct Icosphere {
    pub points: Vec<Direction>,
    pub neighbors: Vec<Vec<usize>>,
}

pub fn icosphere(level: usize) -> Icosphere {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vector3<f64>> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vector3<f64>>| -> usize {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.push([a, ab, ca]);
            next.push([b, bc, ab]);
            next.push([c, ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }
    let mut neighbors = vec![Vec::new(); verts.len()];
    for &[a, b, c] in &faces {
        for (u, v) in [(a, b), (b, c), (c, a)] {
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
    }
    for n in &mut neighbors {
        n.sort_unstable();
        n.dedup();
    }
    Icosphere {
        points: verts.into_iter().map(Direction).collect(),
        neighbors,
    }
}

/// FSL-style bvec text: three rows (x, y, z), one column per direction.
pub fn format_bvec(dirs: &[Direction]) -> String {
    let mut out = String::new();
    for axis in 0..3 {
        let row: Vec<String> = dirs.iter().map(|d| format!("{:.17e}", d.0[axis])).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    out
}

/// Parses FSL-style bvec text. Columns already unit length are kept bit-exact,
/// others are normalized. Zero columns (b=0 volumes) are rejected.
pub fn parse_bvec(text: &str) -> Result<Vec<Direction>> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| NodfError::Parse(format!("bvec value {t:?}: {e}"))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    if rows.len() != 3 {
        return Err(NodfError::Parse(format!("bvec needs 3 rows, found {}", rows.len())));
    }
    let m = rows[0].len();
    if rows[1].len() != m || rows[2].len() != m {
        return Err(NodfError::Parse("bvec rows have different lengths".into()));
    }
    (0..m)
        .map(|i| {
            let v = Vector3::new(rows[0][i], rows[1][i], rows[2][i]);
            Direction::from_unit(v).or_else(|_| Direction::normalize(v))
        })
        .collect()
}

/// Parses whitespace-separated b-values.
pub fn parse_bval(text: &str) -> Result<Vec<f64>> {
    text.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| NodfError::Parse(format!("bval value {t:?}: {e}"))))
        .collect()
}
