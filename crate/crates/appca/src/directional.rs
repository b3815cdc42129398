//! Directional statistics: orthonormal-complement construction, sampling
//! from the Bingham distribution on the unit sphere, and the
//! orthonormality-loss metric for unconstrained bases.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{FeatureAssignments, Hyperparameters, ObservationSet, ORTHONORMAL_TOL};

/// Consecutive ACG rejections before falling back to Gibbs on the sphere.
const MAX_REJECTIONS: usize = 1000;

/// Parameter matrix `A` of a Bingham density `p(v) ∝ exp(v^T A v)` on the
/// unit sphere. Symmetrized on construction.
#[derive(Debug, Clone)]
pub struct BinghamParameter {
    a: DMatrix<f64>,
}

impl BinghamParameter {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() == 0 || a.nrows() != a.ncols() {
            return Err(Error::InvalidInput(format!(
                "Bingham parameter must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if !a.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("Bingham parameter contains non-finite entries".into()));
        }
        let mut max_asym: f64 = 0.0;
        for i in 0..a.nrows() {
            for j in (i + 1)..a.ncols() {
                max_asym = max_asym.max((a[(i, j)] - a[(j, i)]).abs());
            }
        }
        let scale = a.amax().max(1.0);
        if max_asym > 1e-10 * scale {
            return Err(Error::InvalidInput(format!(
                "Bingham parameter is not symmetric: max asymmetry {max_asym:.3e}"
            )));
        }
        let sym = (&a + a.transpose()) * 0.5;
        Ok(Self { a: sym })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }
}

/// Uniform draw from the unit sphere `S^{d-1}`.
pub fn sample_unit_sphere<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Eigen-decomposition of the parameter, sorted by descending eigenvalue.
/// Ties keep decomposition order; the resulting distribution is invariant to
/// the tie order because of shift invariance.
fn sorted_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = nalgebra::SymmetricEigen::new(a.clone());
    let m = a.nrows();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(m, m);
    for (col, &i) in order.iter().enumerate() {
        vectors.column_mut(col).copy_from(&eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Solves `sum_i 1 / (b + 2 a_i) = 1` for the envelope parameter
/// `b ∈ (0, M]`; `a_i >= 0` with `min a_i = 0`.
fn envelope_parameter(gaps: &[f64]) -> f64 {
    let m = gaps.len() as f64;
    let f = |b: f64| gaps.iter().map(|&a| 1.0 / (b + 2.0 * a)).sum::<f64>();
    let (mut lo, mut hi) = (1e-12, m);
    if f(hi) >= 1.0 {
        return hi;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// One draw from the Bingham distribution `p(v) ∝ exp(v^T A v)` on
/// `S^{M-1}`.
///
/// Rejection sampling with an angular-central-Gaussian envelope whose
/// concentration solves the standard bound-minimizing equation; after 1000
/// consecutive rejections the sampler falls back to coordinate-pair Gibbs
/// on the sphere.
pub fn sample_bingham<R: Rng + ?Sized>(param: &BinghamParameter, rng: &mut R) -> DVector<f64> {
    let m = param.dim();
    if m == 1 {
        // S^0 = {-1, +1}; antipodal symmetry makes both equally likely.
        let sign = if rng.random::<f64>() < 0.5 { 1.0 } else { -1.0 };
        return DVector::from_element(1, sign);
    }
    let (values, vectors) = sorted_eigen(param.matrix());
    // Shift so the largest eigenvalue is zero: gaps[i] = lambda_1 - lambda_i.
    let gaps: Vec<f64> = values.iter().map(|&v| values[0] - v).collect();
    if gaps.iter().all(|&g| g < 1e-12) {
        // Isotropic parameter: constant density on the sphere.
        return sample_unit_sphere(m, rng);
    }
    let b = envelope_parameter(&gaps);
    let inv_sqrt_omega: Vec<f64> = gaps.iter().map(|&a| 1.0 / (1.0 + 2.0 * a / b).sqrt()).collect();
    let mf = m as f64;
    let log_bound_const = (mf - b) / 2.0 + (mf / 2.0) * (b / mf).ln();

    let mut rejections = 0;
    loop {
        // ACG proposal in the eigenframe.
        let mut u = DVector::from_fn(m, |i, _| {
            inv_sqrt_omega[i] * rng.sample::<f64, _>(StandardNormal)
        });
        let norm = u.norm();
        if norm < 1e-12 {
            continue;
        }
        u /= norm;
        let t: f64 = (0..m).map(|i| gaps[i] * u[i] * u[i]).sum();
        let log_accept = -t + (mf / 2.0) * (1.0 + 2.0 * t / b).ln() + log_bound_const;
        if rng.random::<f64>().ln() < log_accept {
            return &vectors * u;
        }
        rejections += 1;
        if rejections >= MAX_REJECTIONS {
            log::warn!("Bingham ACG sampler hit {MAX_REJECTIONS} rejections; using Gibbs fallback");
            let u = bingham_gibbs_on_sphere(&gaps, rng);
            return &vectors * u;
        }
    }
}

/// Coordinate-pair Gibbs sweep sampler for the Bingham distribution in the
/// eigenframe, where the exponent is `-sum_i gaps[i] u_i^2`. The angle of
/// each coordinate pair has a von Mises conditional on the doubled angle.
pub(crate) fn bingham_gibbs_on_sphere<R: Rng + ?Sized>(gaps: &[f64], rng: &mut R) -> DVector<f64> {
    let m = gaps.len();
    let mut u = sample_unit_sphere(m, rng);
    for _ in 0..64 {
        for i in 0..m {
            for j in (i + 1)..m {
                let r2 = u[i] * u[i] + u[j] * u[j];
                if r2 < 1e-14 {
                    continue;
                }
                // exponent restricted to the pair:
                // -(gaps_i cos^2 + gaps_j sin^2) r^2
                //   = -(gaps_i - gaps_j) r^2 cos(2 theta) / 2 + const
                let kappa = (gaps[j] - gaps[i]) * r2 / 2.0;
                let phi = sample_von_mises(kappa, rng);
                let mut theta = phi / 2.0;
                if rng.random::<f64>() < 0.5 {
                    theta += std::f64::consts::PI;
                }
                let r = r2.sqrt();
                u[i] = r * theta.cos();
                u[j] = r * theta.sin();
            }
        }
    }
    u
}

/// Best–Fisher draw from a von Mises distribution with mean 0 and
/// concentration `kappa` (negative `kappa` flips the mean to pi).
fn sample_von_mises<R: Rng + ?Sized>(kappa: f64, rng: &mut R) -> f64 {
    use std::f64::consts::PI;
    if kappa.abs() < 1e-10 {
        return (rng.random::<f64>() * 2.0 - 1.0) * PI;
    }
    let flip = kappa < 0.0;
    let k = kappa.abs();
    let tau = 1.0 + (1.0 + 4.0 * k * k).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * k);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    let theta = loop {
        let u1: f64 = rng.random();
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = k * (r - f);
        let u2: f64 = rng.random();
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let u3: f64 = rng.random();
            break f.acos().copysign(u3 - 0.5);
        }
    };
    if flip {
        if theta >= 0.0 {
            theta - PI
        } else {
            theta + PI
        }
    } else {
        theta
    }
}

/// Orthonormal basis `B` of the directions orthogonal to the columns of `W`:
/// `B^T B = I` and `B^T W = 0`. Deterministic given `W`; the first entry of
/// each basis column above noise level is made positive.
pub fn orthonormal_complement(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (d, k) = (w.nrows(), w.ncols());
    if k >= d {
        return Err(Error::InvalidInput(format!(
            "no free directions: basis has {k} columns in {d} dimensions"
        )));
    }
    if crate::model::gram_residual(w) >= ORTHONORMAL_TOL {
        return Err(Error::InvalidInput("complement requires orthonormal columns".into()));
    }
    let mut basis: Vec<DVector<f64>> = (0..k).map(|j| w.column(j).into_owned()).collect();
    let mut b = DMatrix::zeros(d, d - k);
    for out in 0..(d - k) {
        // Residual projector diagonal: P_ii = 1 - sum_c basis[c][i]^2.
        // The largest entry identifies the axis vector with the largest
        // residual, which is then orthogonalized explicitly.
        let mut best = 0;
        let mut best_norm = f64::NEG_INFINITY;
        for i in 0..d {
            let consumed: f64 = basis.iter().map(|c| c[i] * c[i]).sum();
            let residual = 1.0 - consumed;
            if residual > best_norm {
                best_norm = residual;
                best = i;
            }
        }
        let mut col = DVector::zeros(d);
        col[best] = 1.0;
        for _ in 0..2 {
            for c in &basis {
                let proj = c.dot(&col);
                col.axpy(-proj, c, 1.0);
            }
        }
        let norm = col.norm();
        if norm < 1e-12 {
            return Err(Error::InvalidInput("complement construction degenerated".into()));
        }
        col /= norm;
        if let Some(first) = col.iter().find(|v| v.abs() > 1e-10) {
            if *first < 0.0 {
                col = -col;
            }
        }
        b.column_mut(out).copy_from(&col);
        basis.push(col);
    }
    Ok(b)
}

/// The Bingham parameter of the conditional for subspace direction `j` in
/// the collapsed sampler:
///
/// ```text
/// sigma_v (sum_n y_n y_n^T)
///   + sigma_x^2 / (2 sigma_y^2 (sigma_x^2 + sigma_y^2)) (sum_n z_{jn} y_n y_n^T)
/// ```
///
/// projected as `B^T (...) B` when a complement of the preceding columns is
/// given; the first column is sampled on the full sphere without the
/// projection.
pub fn collapsed_column_parameter(
    feature: usize,
    obs: &ObservationSet,
    assignments: &FeatureAssignments,
    hyper: &Hyperparameters,
    complement: Option<&DMatrix<f64>>,
) -> Result<BinghamParameter> {
    if feature >= assignments.k_plus() {
        return Err(Error::InvalidInput(format!(
            "feature index {feature} out of range (K+ = {})",
            assignments.k_plus()
        )));
    }
    if assignments.n_points() != obs.n_points() {
        return Err(Error::DimensionMismatch("assignments and observations disagree on N".into()));
    }
    let y = obs.data();
    let s_yy = y * y.transpose();
    let mut s_zy = DMatrix::zeros(obs.dims(), obs.dims());
    for n in 0..obs.n_points() {
        if assignments.is_active(feature, n) {
            let col = obs.point(n);
            s_zy.ger(1.0, &col, &col, 1.0);
        }
    }
    column_parameter_from_sums(&s_yy, &s_zy, hyper, complement)
}

/// Shared kernel of [`collapsed_column_parameter`] used by the sweep with
/// cached scatter matrices.
pub(crate) fn column_parameter_from_sums(
    s_yy: &DMatrix<f64>,
    s_zy: &DMatrix<f64>,
    hyper: &Hyperparameters,
    complement: Option<&DMatrix<f64>>,
) -> Result<BinghamParameter> {
    let sx2 = hyper.sigma_x * hyper.sigma_x;
    let sy2 = hyper.sigma_y * hyper.sigma_y;
    let coeff = sx2 / (2.0 * sy2 * (sx2 + sy2));
    let raw = s_yy * hyper.sigma_v + s_zy * coeff;
    match complement {
        Some(b) => {
            if b.nrows() != raw.nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "complement has {} rows but data dimension is {}",
                    b.nrows(),
                    raw.nrows()
                )));
            }
            BinghamParameter::new(b.transpose() * raw * b)
        }
        None => BinghamParameter::new(raw),
    }
}

/// Largest deviation from 90 degrees among all pairwise angles between the
/// columns of `W`, with angles folded to `[0, 90]` via the absolute cosine.
/// A single direction is vacuously orthogonal (0 degrees).
pub fn orthonormality_loss(w: &DMatrix<f64>) -> Result<f64> {
    let k = w.ncols();
    if k < 2 {
        return Ok(0.0);
    }
    let norms: Vec<f64> = (0..k).map(|j| w.column(j).norm()).collect();
    for (j, &norm) in norms.iter().enumerate() {
        if norm < 1e-12 {
            return Err(Error::InvalidInput(format!("column {j} of the basis is zero")));
        }
    }
    let mut worst: f64 = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            let cos = (w.column(i).dot(&w.column(j)) / (norms[i] * norms[j])).abs().min(1.0);
            let angle_deg = cos.acos().to_degrees();
            worst = worst.max(90.0 - angle_deg);
        }
    }
    Ok(worst)
}
