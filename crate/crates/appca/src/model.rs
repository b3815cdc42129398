//! Model state types, the point likelihood, the collapsed marginal
//! likelihood and reconstruction metrics.
//!
//! The generative model for a centered observation `y_n` (one column of the
//! `D x N` data matrix) is
//!
//! ```text
//! y_n = W (x_n ⊙ z_n) + eps_n,   eps_n ~ N(0, sigma_y^2 I_D)
//! x_n ~ N(0, sigma_x^2 I_K)
//! ```
//!
//! with `W` a `D x K` matrix of 1-D subspace directions and `z_n` a binary
//! feature-activation vector. Integrating the latent coefficients out gives
//! the per-point marginal `N(y_n; 0, C_n)` with
//! `C_n = sigma_x^2 (W A)(W A)^T + sigma_y^2 I_D` and `A = diag(z_n)`.

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::error::{Error, Result};

/// Max-norm tolerance under which `W^T W - I` is considered orthonormal.
pub const ORTHONORMAL_TOL: f64 = 1e-8;

/// Diagonal jitter added before dense covariance solves.
pub const SOLVE_JITTER: f64 = 1e-10;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} contains non-finite entries")))
    }
}

// ---------------------------------------------------------------------------
// Observations
// ---------------------------------------------------------------------------

/// The centered `D x N` data matrix together with the removed column mean,
/// so that reconstructions can be reported in the original units.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    data: DMatrix<f64>,
    column_mean: DVector<f64>,
}

impl ObservationSet {
    /// Wraps a matrix that is already centered (mean recorded as given).
    pub fn from_parts(data: DMatrix<f64>, column_mean: DVector<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidInput("observation matrix must be non-empty".into()));
        }
        if column_mean.len() != data.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "column mean has {} entries but data has {} rows",
                column_mean.len(),
                data.nrows()
            )));
        }
        check_finite(&data, "observation matrix")?;
        Ok(Self { data, column_mean })
    }

    /// Number of observed dimensions `D`.
    pub fn dims(&self) -> usize {
        self.data.nrows()
    }

    /// Number of points `N`.
    pub fn n_points(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn column_mean(&self) -> &DVector<f64> {
        &self.column_mean
    }

    /// Column view of point `n`.
    pub fn point(&self, n: usize) -> DVectorView<'_, f64> {
        self.data.column(n)
    }
}

/// Subtracts the per-row mean from a raw `D x N` matrix and retains it.
pub fn center_observations(raw: &DMatrix<f64>) -> Result<ObservationSet> {
    if raw.nrows() == 0 || raw.ncols() == 0 {
        return Err(Error::InvalidInput("observation matrix must be non-empty".into()));
    }
    check_finite(raw, "observation matrix")?;
    let n = raw.ncols() as f64;
    let mean = DVector::from_fn(raw.nrows(), |i, _| raw.row(i).sum() / n);
    let mut data = raw.clone();
    for mut col in data.column_iter_mut() {
        col -= &mean;
    }
    ObservationSet::from_parts(data, mean)
}

// ---------------------------------------------------------------------------
// Hyperparameters
// ---------------------------------------------------------------------------

/// Scale parameters of the model: IBP concentration `alpha`, latent scale
/// `sigma_x`, noise scale `sigma_y` and the Bingham scale `sigma_v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparameters {
    pub alpha: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub sigma_v: f64,
}

impl Hyperparameters {
    pub fn new(alpha: f64, sigma_x: f64, sigma_y: f64, sigma_v: f64) -> Result<Self> {
        let h = Self { alpha, sigma_x, sigma_y, sigma_v };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("sigma_x", self.sigma_x),
            ("sigma_y", self.sigma_y),
            ("sigma_v", self.sigma_v),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "hyperparameter {name} must be strictly positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Feature assignments (the IBP state)
// ---------------------------------------------------------------------------

/// The binary `K x N` feature-activation matrix `Z` with cached per-feature
/// counts `m_k = sum_n z_{kn}`.
#[derive(Debug, Clone)]
pub struct FeatureAssignments {
    z: DMatrix<u8>,
    feature_counts: Vec<usize>,
}

impl FeatureAssignments {
    pub fn new(z: DMatrix<u8>) -> Result<Self> {
        if z.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput("assignment matrix must be binary".into()));
        }
        let feature_counts = Self::column_sums(&z);
        Ok(Self { z, feature_counts })
    }

    /// All features active for all points.
    pub fn all_ones(k: usize, n: usize) -> Self {
        Self { z: DMatrix::from_element(k, n, 1), feature_counts: vec![n; k] }
    }

    /// No features at all (`K = 0`).
    pub fn empty(n: usize) -> Self {
        Self { z: DMatrix::zeros(0, n), feature_counts: Vec::new() }
    }

    fn column_sums(z: &DMatrix<u8>) -> Vec<usize> {
        (0..z.nrows()).map(|k| (0..z.ncols()).filter(|&n| z[(k, n)] == 1).count()).collect()
    }

    pub fn k_plus(&self) -> usize {
        self.z.nrows()
    }

    pub fn n_points(&self) -> usize {
        self.z.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<u8> {
        &self.z
    }

    pub fn is_active(&self, k: usize, n: usize) -> bool {
        self.z[(k, n)] == 1
    }

    /// Sets one entry and keeps the cached counts consistent.
    pub fn set(&mut self, k: usize, n: usize, active: bool) {
        let old = self.z[(k, n)];
        let new = active as u8;
        if old != new {
            self.z[(k, n)] = new;
            if active {
                self.feature_counts[k] += 1;
            } else {
                self.feature_counts[k] -= 1;
            }
        }
    }

    pub fn feature_counts(&self) -> &[usize] {
        &self.feature_counts
    }

    /// `m_{k,-n}`: holders of feature `k` excluding point `n`.
    pub fn count_excluding(&self, k: usize, n: usize) -> usize {
        self.feature_counts[k] - self.z[(k, n)] as usize
    }

    /// Indices of the features active for point `n`, ascending.
    pub fn active_features(&self, n: usize) -> Vec<usize> {
        (0..self.k_plus()).filter(|&k| self.z[(k, n)] == 1).collect()
    }

    /// Binary activation column of point `n`.
    pub fn point_mask(&self, n: usize) -> Vec<u8> {
        self.z.column(n).iter().copied().collect()
    }

    /// Appends `count` features active only for `point`.
    pub fn push_features_for_point(&mut self, count: usize, point: usize) {
        let (k, n) = (self.k_plus(), self.n_points());
        let mut z = DMatrix::zeros(k + count, n);
        z.view_mut((0, 0), (k, n)).copy_from(&self.z);
        for j in 0..count {
            z[(k + j, point)] = 1;
            self.feature_counts.push(1);
        }
        self.z = z;
    }

    /// Keeps only the listed features, preserving their order.
    pub fn retain_features(&mut self, keep: &[usize]) {
        let n = self.n_points();
        let mut z = DMatrix::zeros(keep.len(), n);
        for (row, &k) in keep.iter().enumerate() {
            for col in 0..n {
                z[(row, col)] = self.z[(k, col)];
            }
        }
        self.feature_counts = keep.iter().map(|&k| self.feature_counts[k]).collect();
        self.z = z;
    }

    /// Recomputed column sums; used to assert cache consistency in tests.
    pub fn recomputed_counts(&self) -> Vec<usize> {
        Self::column_sums(&self.z)
    }
}

// ---------------------------------------------------------------------------
// Projection basis
// ---------------------------------------------------------------------------

/// The `D x K` matrix of 1-D subspace directions. In the collapsed sampler
/// the columns are orthonormal; the hybrid sampler leaves them unconstrained.
#[derive(Debug, Clone)]
pub struct ProjectionBasis {
    w: DMatrix<f64>,
    orthonormal: bool,
}

impl ProjectionBasis {
    pub fn new(w: DMatrix<f64>, orthonormal: bool) -> Result<Self> {
        check_finite(&w, "projection basis")?;
        if orthonormal {
            if w.ncols() > w.nrows() {
                return Err(Error::InvalidInput(format!(
                    "cannot have {} orthonormal directions in {} dimensions",
                    w.ncols(),
                    w.nrows()
                )));
            }
            let gram_err = gram_residual(&w);
            if gram_err >= ORTHONORMAL_TOL {
                return Err(Error::InvalidInput(format!(
                    "basis marked orthonormal but max |W^T W - I| = {gram_err:.3e}"
                )));
            }
        }
        Ok(Self { w, orthonormal })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn is_orthonormal(&self) -> bool {
        self.orthonormal
    }

    pub fn dims(&self) -> usize {
        self.w.nrows()
    }

    pub fn k_plus(&self) -> usize {
        self.w.ncols()
    }

    pub(crate) fn set_matrix(&mut self, w: DMatrix<f64>) {
        debug_assert!(!self.orthonormal || gram_residual(&w) < ORTHONORMAL_TOL);
        self.w = w;
    }

    pub(crate) fn push_columns(&mut self, cols: &DMatrix<f64>) {
        debug_assert_eq!(cols.nrows(), self.dims());
        let (d, k) = (self.dims(), self.k_plus());
        let mut w = DMatrix::zeros(d, k + cols.ncols());
        w.view_mut((0, 0), (d, k)).copy_from(&self.w);
        w.view_mut((0, k), (d, cols.ncols())).copy_from(cols);
        debug_assert!(!self.orthonormal || gram_residual(&w) < ORTHONORMAL_TOL);
        self.w = w;
    }

    pub(crate) fn retain_columns(&mut self, keep: &[usize]) {
        let d = self.dims();
        let mut w = DMatrix::zeros(d, keep.len());
        for (col, &k) in keep.iter().enumerate() {
            w.column_mut(col).copy_from(&self.w.column(k));
        }
        self.w = w;
    }
}

/// `max |W^T W - I|`.
pub fn gram_residual(w: &DMatrix<f64>) -> f64 {
    let gram = w.transpose() * w;
    let mut err: f64 = 0.0;
    for i in 0..gram.nrows() {
        for j in 0..gram.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            err = err.max((gram[(i, j)] - target).abs());
        }
    }
    err
}

// ---------------------------------------------------------------------------
// Latent coefficients
// ---------------------------------------------------------------------------

/// Continuous loadings `X` (`K x N`) and, for the hybrid sampler, the
/// per-point second-moment matrices `Psi_n` from the E-step.
#[derive(Debug, Clone)]
pub struct LatentCoefficients {
    pub x: DMatrix<f64>,
    pub psi: Option<Vec<DMatrix<f64>>>,
}

impl LatentCoefficients {
    pub fn zeros(k: usize, n: usize) -> Self {
        Self { x: DMatrix::zeros(k, n), psi: None }
    }

    pub fn k_plus(&self) -> usize {
        self.x.nrows()
    }

    pub(crate) fn push_zero_rows(&mut self, count: usize) {
        let (k, n) = (self.x.nrows(), self.x.ncols());
        let mut x = DMatrix::zeros(k + count, n);
        x.view_mut((0, 0), (k, n)).copy_from(&self.x);
        self.x = x;
        // Second moments are rebuilt by the next E-step.
        self.psi = None;
    }

    pub(crate) fn retain_rows(&mut self, keep: &[usize]) {
        let n = self.x.ncols();
        let mut x = DMatrix::zeros(keep.len(), n);
        for (row, &k) in keep.iter().enumerate() {
            for col in 0..n {
                x[(row, col)] = self.x[(k, col)];
            }
        }
        self.x = x;
        self.psi = None;
    }
}

// ---------------------------------------------------------------------------
// Model state
// ---------------------------------------------------------------------------

/// Full per-iteration sampler state.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub basis: ProjectionBasis,
    pub assignments: FeatureAssignments,
    pub latents: Option<LatentCoefficients>,
    pub hyper: Hyperparameters,
    pub log_likelihood_trace: Vec<f64>,
    /// Set when every feature died and a placeholder row was retained.
    pub floored: bool,
}

impl ModelState {
    pub fn new(
        basis: ProjectionBasis,
        assignments: FeatureAssignments,
        latents: Option<LatentCoefficients>,
        hyper: Hyperparameters,
    ) -> Result<Self> {
        hyper.validate()?;
        let state =
            Self { basis, assignments, latents, hyper, log_likelihood_trace: Vec::new(), floored: false };
        state.validate()?;
        Ok(state)
    }

    pub fn k_plus(&self) -> usize {
        self.basis.k_plus()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.basis.k_plus();
        if self.assignments.k_plus() != k {
            return Err(Error::DimensionMismatch(format!(
                "basis has {} columns but assignments have {} features",
                k,
                self.assignments.k_plus()
            )));
        }
        if let Some(lat) = &self.latents {
            if lat.k_plus() != k {
                return Err(Error::DimensionMismatch(format!(
                    "basis has {} columns but latents have {} rows",
                    k,
                    lat.k_plus()
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Likelihoods
// ---------------------------------------------------------------------------

fn check_sigma(name: &'static str, value: f64) -> Result<()> {
    if !(value.is_finite() && value > 0.0) {
        return Err(Error::InvalidInput(format!("{name} must be strictly positive and finite, got {value}")));
    }
    Ok(())
}

/// Log-density of one point given the latent coefficients:
/// `-(D/2) log(2 pi sigma_y^2) - ||y - W (x ⊙ z)||^2 / (2 sigma_y^2)`.
pub fn point_log_likelihood(
    y: &DVector<f64>,
    basis: &ProjectionBasis,
    x: &DVector<f64>,
    z: &[u8],
    sigma_y: f64,
) -> Result<f64> {
    check_sigma("sigma_y", sigma_y)?;
    let (d, k) = (basis.dims(), basis.k_plus());
    if y.len() != d || x.len() != k || z.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "point likelihood: y has {} entries, x has {}, z has {}, basis is {}x{}",
            y.len(),
            x.len(),
            z.len(),
            d,
            k
        )));
    }
    let mut residual = y.clone();
    let w = basis.matrix();
    for j in 0..k {
        if z[j] == 1 {
            residual.axpy(-x[j], &w.column(j), 1.0);
        }
    }
    let s2 = sigma_y * sigma_y;
    Ok(-0.5 * d as f64 * (LN_2PI + s2.ln()) - residual.norm_squared() / (2.0 * s2))
}

/// Marginal log-density of one point with the latent coefficients
/// integrated out: `log N(y; 0, C)` with
/// `C = sigma_x^2 (W A)(W A)^T + sigma_y^2 I`.
///
/// Uses the exact closed form when the basis is orthonormal
/// (`log |C| = (D - s) log sigma_y^2 + s log(sigma_x^2 + sigma_y^2)` with `s`
/// the number of active features) and a dense Cholesky solve otherwise.
pub fn marginal_log_likelihood_point(
    y: &DVector<f64>,
    basis: &ProjectionBasis,
    z: &[u8],
    sigma_x: f64,
    sigma_y: f64,
) -> Result<f64> {
    check_sigma("sigma_x", sigma_x)?;
    check_sigma("sigma_y", sigma_y)?;
    let (d, k) = (basis.dims(), basis.k_plus());
    if y.len() != d || z.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "marginal likelihood: y has {} entries, z has {}, basis is {}x{}",
            y.len(),
            z.len(),
            d,
            k
        )));
    }
    let sx2 = sigma_x * sigma_x;
    let sy2 = sigma_y * sigma_y;
    if sy2 == 0.0 {
        return Err(Error::DegenerateScale { name: "sigma_y", value: sigma_y });
    }
    let active: Vec<usize> = (0..k).filter(|&j| z[j] == 1).collect();
    let w = basis.matrix();

    if basis.is_orthonormal() {
        let s = active.len() as f64;
        let mut proj_sq = 0.0;
        for &j in &active {
            let h = w.column(j).dot(y);
            proj_sq += h * h;
        }
        let log_det = (d as f64 - s) * sy2.ln() + s * (sx2 + sy2).ln();
        let quad = (y.norm_squared() - sx2 / (sx2 + sy2) * proj_sq) / sy2;
        Ok(-0.5 * (d as f64 * LN_2PI + log_det + quad))
    } else {
        // Generic dense path: form C explicitly and factorize.
        let mut c = DMatrix::<f64>::identity(d, d) * (sy2 + SOLVE_JITTER);
        for &j in &active {
            let col = w.column(j);
            c.ger(sx2, &col, &col, 1.0);
        }
        let chol = nalgebra::Cholesky::new(c)
            .ok_or(Error::DegenerateScale { name: "sigma_y", value: sigma_y })?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let solved = chol.solve(y);
        let quad = y.dot(&solved);
        Ok(-0.5 * (d as f64 * LN_2PI + log_det + quad))
    }
}

/// Precomputed quantities for evaluating the per-point marginal likelihood
/// many times against the same basis and scales: the Gram matrix `W^T W`,
/// the projections `W^T Y` and the squared norms `||y_n||^2`.
///
/// For an orthonormal basis each evaluation is `O(|active|)`; otherwise a
/// Woodbury form reduces it to a factorization of the active-set block of
/// the Gram matrix.
#[derive(Debug, Clone)]
pub struct MarginalEvaluator {
    gram: DMatrix<f64>,
    proj: DMatrix<f64>,
    sq_norms: Vec<f64>,
    d: usize,
    sx2: f64,
    sy2: f64,
    orthonormal: bool,
}

impl MarginalEvaluator {
    pub fn new(basis: &ProjectionBasis, obs: &ObservationSet, sigma_x: f64, sigma_y: f64) -> Result<Self> {
        check_sigma("sigma_x", sigma_x)?;
        check_sigma("sigma_y", sigma_y)?;
        if basis.dims() != obs.dims() {
            return Err(Error::DimensionMismatch(format!(
                "basis has {} rows but observations have {} dimensions",
                basis.dims(),
                obs.dims()
            )));
        }
        let w = basis.matrix();
        let gram = w.transpose() * w;
        let proj = w.transpose() * obs.data();
        let sq_norms = (0..obs.n_points()).map(|n| obs.point(n).norm_squared()).collect();
        Ok(Self {
            gram,
            proj,
            sq_norms,
            d: obs.dims(),
            sx2: sigma_x * sigma_x,
            sy2: sigma_y * sigma_y,
            orthonormal: basis.is_orthonormal(),
        })
    }

    pub fn k_plus(&self) -> usize {
        self.gram.nrows()
    }

    /// Extends the cached projections after new basis columns were accepted.
    pub fn push_columns(&mut self, basis: &ProjectionBasis, obs: &ObservationSet) {
        let k_new = basis.k_plus();
        let k_old = self.gram.nrows();
        debug_assert!(k_new >= k_old);
        if k_new == k_old {
            return;
        }
        let w = basis.matrix();
        self.gram = w.transpose() * w;
        let mut proj = DMatrix::zeros(k_new, obs.n_points());
        proj.view_mut((0, 0), (k_old, obs.n_points())).copy_from(&self.proj);
        let tail = w.columns(k_old, k_new - k_old).transpose() * obs.data();
        proj.view_mut((k_old, 0), (k_new - k_old, obs.n_points())).copy_from(&tail);
        self.proj = proj;
        self.orthonormal = basis.is_orthonormal();
    }

    /// `log N(y_n; 0, C)` for the given active feature set.
    pub fn log_marginal(&self, n: usize, active: &[usize]) -> f64 {
        let d = self.d as f64;
        let yy = self.sq_norms[n];
        if active.is_empty() {
            return -0.5 * (d * (LN_2PI + self.sy2.ln()) + yy / self.sy2);
        }
        if self.orthonormal {
            let s = active.len() as f64;
            let proj_sq: f64 = active
                .iter()
                .map(|&k| {
                    let h = self.proj[(k, n)];
                    h * h
                })
                .sum();
            let log_det = (d - s) * self.sy2.ln() + s * (self.sx2 + self.sy2).ln();
            let quad = (yy - self.sx2 / (self.sx2 + self.sy2) * proj_sq) / self.sy2;
            -0.5 * (d * LN_2PI + log_det + quad)
        } else {
            // |C| = sigma_y^(2D) |I + (sx2/sy2) G_SS| and
            // y' C^-1 y = (||y||^2 - h' M^-1 h) / sy2 with
            // M = (sy2/sx2) I + G_SS.
            let s = active.len();
            let ratio = self.sy2 / self.sx2;
            let mut m = DMatrix::<f64>::zeros(s, s);
            let mut h = DVector::<f64>::zeros(s);
            for (i, &ki) in active.iter().enumerate() {
                h[i] = self.proj[(ki, n)];
                for (j, &kj) in active.iter().enumerate() {
                    m[(i, j)] = self.gram[(ki, kj)] + if i == j { ratio } else { 0.0 };
                }
            }
            let chol = match nalgebra::Cholesky::new(m) {
                Some(c) => c,
                None => {
                    // Gram block lost positive definiteness to rounding;
                    // retry with jitter.
                    let mut mj = DMatrix::<f64>::zeros(s, s);
                    for (i, &ki) in active.iter().enumerate() {
                        for (j, &kj) in active.iter().enumerate() {
                            mj[(i, j)] = self.gram[(ki, kj)]
                                + if i == j { ratio + SOLVE_JITTER } else { 0.0 };
                        }
                    }
                    nalgebra::Cholesky::new(mj).expect("jittered Woodbury block must be SPD")
                }
            };
            let log_det_m = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let log_det = d * self.sy2.ln() + s as f64 * (self.sx2 / self.sy2).ln() + log_det_m;
            let solved = chol.solve(&h);
            let quad = (yy - h.dot(&solved)) / self.sy2;
            -0.5 * (d * LN_2PI + log_det + quad)
        }
    }

    /// Posterior mean of the active latent coordinates given `y_n`:
    /// `E[x_S | y_n] = M_S^-1 h_S` with `M_S = (sy2/sx2) I + G_SS`.
    pub fn posterior_mean_latent(&self, n: usize, active: &[usize]) -> DVector<f64> {
        let s = active.len();
        if s == 0 {
            return DVector::zeros(0);
        }
        let ratio = self.sy2 / self.sx2;
        let mut h = DVector::<f64>::zeros(s);
        if self.orthonormal {
            let shrink = 1.0 / (1.0 + ratio);
            for (i, &k) in active.iter().enumerate() {
                h[i] = shrink * self.proj[(k, n)];
            }
            return h;
        }
        let mut m = DMatrix::<f64>::zeros(s, s);
        for (i, &ki) in active.iter().enumerate() {
            h[i] = self.proj[(ki, n)];
            for (j, &kj) in active.iter().enumerate() {
                m[(i, j)] = self.gram[(ki, kj)] + if i == j { ratio } else { 0.0 };
            }
        }
        match nalgebra::Cholesky::new(m) {
            Some(chol) => chol.solve(&h),
            None => DVector::zeros(s),
        }
    }
}

// ---------------------------------------------------------------------------
// Reconstruction and error metrics
// ---------------------------------------------------------------------------

/// Noiseless reconstruction: column `n` equals `W (x_n ⊙ z_n)`.
pub fn reconstruct(
    basis: &ProjectionBasis,
    latents: &LatentCoefficients,
    assignments: &FeatureAssignments,
) -> Result<DMatrix<f64>> {
    let k = basis.k_plus();
    if latents.k_plus() != k || assignments.k_plus() != k {
        return Err(Error::DimensionMismatch(format!(
            "reconstruct: basis has {} columns, latents {} rows, assignments {} features",
            k,
            latents.k_plus(),
            assignments.k_plus()
        )));
    }
    let n = latents.x.ncols();
    if assignments.n_points() != n {
        return Err(Error::DimensionMismatch(format!(
            "reconstruct: latents have {} points, assignments {}",
            n,
            assignments.n_points()
        )));
    }
    let mut masked = latents.x.clone();
    for kk in 0..k {
        for nn in 0..n {
            if !assignments.is_active(kk, nn) {
                masked[(kk, nn)] = 0.0;
            }
        }
    }
    Ok(basis.matrix() * masked)
}

/// Mean over all entries of `|a - b|`.
pub fn mean_absolute_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch(format!(
            "mean absolute error: shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let total: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
    Ok(total / (a.nrows() * a.ncols()) as f64)
}

/// Sum of the per-point marginal log-likelihoods over the whole dataset.
pub fn dataset_log_marginal(state: &ModelState, obs: &ObservationSet) -> Result<f64> {
    state.validate()?;
    let eval = MarginalEvaluator::new(&state.basis, obs, state.hyper.sigma_x, state.hyper.sigma_y)?;
    let mut total = 0.0;
    for n in 0..obs.n_points() {
        total += eval.log_marginal(n, &state.assignments.active_features(n));
    }
    Ok(total)
}

/// Posterior-mean loadings under the marginal model for every point;
/// inactive coordinates are zero. Used to reconstruct from a collapsed
/// state, which carries no latent coefficients.
pub fn posterior_mean_latents(
    basis: &ProjectionBasis,
    obs: &ObservationSet,
    assignments: &FeatureAssignments,
    sigma_x: f64,
    sigma_y: f64,
) -> Result<LatentCoefficients> {
    let eval = MarginalEvaluator::new(basis, obs, sigma_x, sigma_y)?;
    let (k, n) = (basis.k_plus(), obs.n_points());
    if assignments.k_plus() != k || assignments.n_points() != n {
        return Err(Error::DimensionMismatch("posterior mean latents: inconsistent state".into()));
    }
    let mut x = DMatrix::zeros(k, n);
    for nn in 0..n {
        let active = assignments.active_features(nn);
        let mean = eval.posterior_mean_latent(nn, &active);
        for (i, &kk) in active.iter().enumerate() {
            x[(kk, nn)] = mean[i];
        }
    }
    Ok(LatentCoefficients { x, psi: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    fn randn_vector(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
        DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
    }

    fn random_orthonormal(rng: &mut ChaCha8Rng, d: usize, k: usize) -> DMatrix<f64> {
        let raw = randn_matrix(rng, d, k);
        let mut w = DMatrix::zeros(d, k);
        for j in 0..k {
            let mut col = raw.column(j).into_owned();
            for i in 0..j {
                let prev = w.column(i);
                let proj = prev.dot(&col);
                col.axpy(-proj, &prev, 1.0);
            }
            // second pass for numerical orthogonality
            for i in 0..j {
                let prev = w.column(i);
                let proj = prev.dot(&col);
                col.axpy(-proj, &prev, 1.0);
            }
            col /= col.norm();
            w.column_mut(j).copy_from(&col);
        }
        w
    }

    // Independent dense evaluation of log N(y; 0, C) used as an oracle:
    // builds C entry by entry and inverts by Gaussian elimination through
    // nalgebra's LU, without sharing any code with the closed form.
    fn dense_gaussian_log_density(y: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let d = y.len();
        let lu = cov.clone().lu();
        let det = lu.determinant();
        let solved = lu.solve(y).unwrap();
        -0.5 * (d as f64 * LN_2PI + det.ln() + y.dot(&solved))
    }

    #[test]
    fn centering_zero_matrix() {
        let raw = DMatrix::zeros(3, 4);
        let obs = center_observations(&raw).unwrap();
        assert!(obs.data().iter().all(|&v| v == 0.0));
        assert!(obs.column_mean().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centering_constant_row() {
        let raw = DMatrix::from_row_slice(1, 4, &[1.0, 1.0, 1.0, 1.0]);
        let obs = center_observations(&raw).unwrap();
        assert!(obs.data().iter().all(|&v| v == 0.0));
        assert_eq!(obs.column_mean()[0], 1.0);
    }

    #[test]
    fn centering_random_rows_have_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let raw = randn_matrix(&mut rng, 5, 100);
        let obs = center_observations(&raw).unwrap();
        for i in 0..5 {
            let mean: f64 = obs.data().row(i).sum() / 100.0;
            assert!(mean.abs() < 1e-10, "row {i} mean {mean}");
        }
    }

    #[test]
    fn centering_rejects_non_finite() {
        let raw = DMatrix::from_row_slice(1, 2, &[1.0, f64::NAN]);
        assert!(center_observations(&raw).is_err());
    }

    #[test]
    fn point_likelihood_gaussian_mode() {
        let d = 4;
        let basis = ProjectionBasis::new(DMatrix::identity(d, 2), true).unwrap();
        let y = DVector::zeros(d);
        let x = DVector::zeros(2);
        let sigma_y = 0.7;
        let ll = point_log_likelihood(&y, &basis, &x, &[1, 1], sigma_y).unwrap();
        let expected = -0.5 * d as f64 * (LN_2PI + (sigma_y * sigma_y).ln());
        assert_relative_eq!(ll, expected, max_relative = 1e-14);
    }

    #[test]
    fn point_likelihood_mask_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random_orthonormal(&mut rng, 5, 3);
        let basis = ProjectionBasis::new(w, true).unwrap();
        let y = randn_vector(&mut rng, 5);
        let x = randn_vector(&mut rng, 3);
        let masked = point_log_likelihood(&y, &basis, &x, &[0, 0, 0], 0.9).unwrap();
        let zeroed =
            point_log_likelihood(&y, &basis, &DVector::zeros(3), &[1, 1, 1], 0.9).unwrap();
        assert_relative_eq!(masked, zeroed, max_relative = 1e-14);
    }

    #[test]
    fn point_likelihood_matches_dense_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let (d, k) = (6, 3);
            let w = randn_matrix(&mut rng, d, k);
            let basis = ProjectionBasis::new(w.clone(), false).unwrap();
            let y = randn_vector(&mut rng, d);
            let x = randn_vector(&mut rng, k);
            let z: Vec<u8> = (0..k).map(|_| (rng.random::<f64>() < 0.5) as u8).collect();
            let sigma_y = 0.5 + rng.random::<f64>();
            let ll = point_log_likelihood(&y, &basis, &x, &z, sigma_y).unwrap();

            let mut mean = DVector::zeros(d);
            for j in 0..k {
                if z[j] == 1 {
                    mean += w.column(j) * x[j];
                }
            }
            let resid = &y - mean;
            let cov = DMatrix::identity(d, d) * sigma_y * sigma_y;
            let oracle = dense_gaussian_log_density(&resid, &cov);
            assert_relative_eq!(ll, oracle, epsilon = 1e-10);
        }
    }

    #[test]
    fn marginal_empty_mask_is_isotropic_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w = random_orthonormal(&mut rng, 5, 2);
        let basis = ProjectionBasis::new(w, true).unwrap();
        let y = randn_vector(&mut rng, 5);
        let (sx, sy) = (1.3, 0.6);
        let ll = marginal_log_likelihood_point(&y, &basis, &[0, 0], sx, sy).unwrap();
        let cov = DMatrix::identity(5, 5) * sy * sy;
        assert_relative_eq!(ll, dense_gaussian_log_density(&y, &cov), epsilon = 1e-9);
    }

    #[test]
    fn marginal_closed_form_matches_dense_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for trial in 0..50 {
            let d = 2 + (trial % 9);
            let k = 1 + (trial % d.min(5));
            let w = random_orthonormal(&mut rng, d, k);
            let ortho = ProjectionBasis::new(w.clone(), true).unwrap();
            // The same matrix routed through the generic dense solve.
            let dense = ProjectionBasis::new(w, false).unwrap();
            let y = randn_vector(&mut rng, d);
            let z: Vec<u8> = (0..k).map(|_| (rng.random::<f64>() < 0.6) as u8).collect();
            let (sx, sy) = (0.5 + rng.random::<f64>(), 0.3 + rng.random::<f64>());
            let a = marginal_log_likelihood_point(&y, &ortho, &z, sx, sy).unwrap();
            let b = marginal_log_likelihood_point(&y, &dense, &z, sx, sy).unwrap();
            assert_relative_eq!(a, b, epsilon = 1e-8);
        }
    }

    // 1-D adaptive Simpson quadrature oracle for the K+ = 1 marginal.
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut total = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            total += f(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        total * h / 3.0
    }

    #[test]
    fn marginal_single_feature_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let d = 3;
        let w = random_orthonormal(&mut rng, d, 1);
        let basis = ProjectionBasis::new(w.clone(), true).unwrap();
        let y = randn_vector(&mut rng, d);
        let (sx, sy) = (1.2, 0.8);
        let ll = marginal_log_likelihood_point(&y, &basis, &[1], sx, sy).unwrap();

        let integrand = |x: f64| {
            let mean = &w.column(0) * x;
            let resid = &y - mean;
            let log_lik = -0.5 * d as f64 * (LN_2PI + (sy * sy).ln())
                - resid.norm_squared() / (2.0 * sy * sy);
            let log_prior = -0.5 * (LN_2PI + (sx * sx).ln()) - x * x / (2.0 * sx * sx);
            (log_lik + log_prior).exp()
        };
        let integral = simpson(&integrand, -10.0 * sx, 10.0 * sx, 20_000);
        assert!((ll - integral.ln()).abs() < 1e-6, "{} vs {}", ll, integral.ln());
    }

    #[test]
    fn marginal_two_active_features_matches_2d_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let d = 3;
        let w = random_orthonormal(&mut rng, d, 2);
        let basis = ProjectionBasis::new(w.clone(), true).unwrap();
        let y = randn_vector(&mut rng, d);
        let (sx, sy) = (1.0, 0.7);
        let ll = marginal_log_likelihood_point(&y, &basis, &[1, 1], sx, sy).unwrap();

        let joint = |x0: f64, x1: f64| {
            let mean = &w.column(0) * x0 + &w.column(1) * x1;
            let resid = &y - mean;
            let log_lik = -0.5 * d as f64 * (LN_2PI + (sy * sy).ln())
                - resid.norm_squared() / (2.0 * sy * sy);
            let log_prior = -(LN_2PI + (sx * sx).ln()) - (x0 * x0 + x1 * x1) / (2.0 * sx * sx);
            (log_lik + log_prior).exp()
        };
        let lim = 8.0 * sx;
        let inner = |x0: f64| simpson(&|x1| joint(x0, x1), -lim, lim, 400);
        let integral = simpson(&inner, -lim, lim, 400);
        assert!((ll - integral.ln()).abs() < 1e-5, "{} vs {}", ll, integral.ln());
    }

    #[test]
    fn marginal_density_at_origin_decreases_in_sigma_y() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let w = random_orthonormal(&mut rng, 4, 2);
        let basis = ProjectionBasis::new(w, true).unwrap();
        let y = DVector::zeros(4);
        let mut last = f64::INFINITY;
        for sy in [0.2, 0.5, 1.0, 2.0, 5.0] {
            let ll = marginal_log_likelihood_point(&y, &basis, &[1, 1], 1.0, sy).unwrap();
            assert!(ll < last, "density at origin should decrease with sigma_y");
            last = ll;
        }
    }

    #[test]
    fn evaluator_matches_direct_marginal() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for &orthonormal in &[true, false] {
            let (d, k, n) = (7, 4, 12);
            let w = if orthonormal {
                random_orthonormal(&mut rng, d, k)
            } else {
                randn_matrix(&mut rng, d, k)
            };
            let basis = ProjectionBasis::new(w, orthonormal).unwrap();
            let obs = center_observations(&randn_matrix(&mut rng, d, n)).unwrap();
            let eval = MarginalEvaluator::new(&basis, &obs, 1.1, 0.6).unwrap();
            for nn in 0..n {
                let z: Vec<u8> = (0..k).map(|_| (rng.random::<f64>() < 0.5) as u8).collect();
                let active: Vec<usize> = (0..k).filter(|&j| z[j] == 1).collect();
                let y = obs.point(nn).into_owned();
                let direct = marginal_log_likelihood_point(&y, &basis, &z, 1.1, 0.6).unwrap();
                let fast = eval.log_marginal(nn, &active);
                assert_relative_eq!(direct, fast, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn reconstruct_zero_mask_gives_zero_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let w = random_orthonormal(&mut rng, 4, 2);
        let basis = ProjectionBasis::new(w, true).unwrap();
        let latents = LatentCoefficients { x: randn_matrix(&mut rng, 2, 5), psi: None };
        let assignments = FeatureAssignments::new(DMatrix::zeros(2, 5)).unwrap();
        let rec = reconstruct(&basis, &latents, &assignments).unwrap();
        assert!(rec.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reconstruct_identity_projection_returns_latents() {
        let d = 3;
        let basis = ProjectionBasis::new(DMatrix::identity(d, d), true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let x = randn_matrix(&mut rng, d, 6);
        let latents = LatentCoefficients { x: x.clone(), psi: None };
        let assignments = FeatureAssignments::all_ones(d, 6);
        let rec = reconstruct(&basis, &latents, &assignments).unwrap();
        assert_relative_eq!(rec, x, epsilon = 1e-14);
    }

    #[test]
    fn reconstruct_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let (d, k, n) = (5, 3, 7);
        let w = randn_matrix(&mut rng, d, k);
        let basis = ProjectionBasis::new(w.clone(), false).unwrap();
        let x = randn_matrix(&mut rng, k, n);
        let z = DMatrix::from_fn(k, n, |_, _| (rng.random::<f64>() < 0.5) as u8);
        let latents = LatentCoefficients { x: x.clone(), psi: None };
        let assignments = FeatureAssignments::new(z.clone()).unwrap();
        let rec = reconstruct(&basis, &latents, &assignments).unwrap();
        for i in 0..d {
            for j in 0..n {
                let mut expected = 0.0;
                for kk in 0..k {
                    expected += w[(i, kk)] * x[(kk, j)] * z[(kk, j)] as f64;
                }
                assert_relative_eq!(rec[(i, j)], expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn masking_is_idempotent() {
        // W(x ⊙ z) = W diag(z) x = (W diag(z) diag(z)) x for binary z.
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..20 {
            let (d, k) = (6, 4);
            let w = randn_matrix(&mut rng, d, k);
            let x = randn_vector(&mut rng, k);
            let z: Vec<f64> = (0..k).map(|_| (rng.random::<f64>() < 0.5) as u8 as f64).collect();
            let diag = DMatrix::from_diagonal(&DVector::from_vec(z.clone()));
            let masked = DVector::from_fn(k, |i, _| x[i] * z[i]);
            let a = &w * masked;
            let b = &w * &diag * &x;
            let c = &w * &diag * &diag * &x;
            assert_relative_eq!(a, b, epsilon = 1e-12);
            assert_relative_eq!(b, c, epsilon = 1e-12);
        }
    }

    #[test]
    fn mae_trivial_cases() {
        let y = DMatrix::from_element(3, 3, 1.0);
        assert_eq!(mean_absolute_error(&y, &y).unwrap(), 0.0);
        let zeros = DMatrix::zeros(3, 3);
        assert_eq!(mean_absolute_error(&y, &zeros).unwrap(), 1.0);
    }

    #[test]
    fn mae_hand_computed() {
        let y = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let yhat = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 3.0, 0.0]);
        assert_relative_eq!(mean_absolute_error(&y, &yhat).unwrap(), 1.25);
    }

    #[test]
    fn mae_shape_mismatch_errors() {
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::zeros(2, 3);
        assert!(mean_absolute_error(&a, &b).is_err());
    }

    fn small_state(rng: &mut ChaCha8Rng, d: usize, k: usize, n: usize) -> (ModelState, ObservationSet) {
        let w = random_orthonormal(rng, d, k);
        let basis = ProjectionBasis::new(w, true).unwrap();
        let z = DMatrix::from_fn(k, n, |_, _| (rng.random::<f64>() < 0.7) as u8);
        let assignments = FeatureAssignments::new(z).unwrap();
        let hyper = Hyperparameters::new(1.0, 1.2, 0.5, 1.0).unwrap();
        let obs = center_observations(&randn_matrix(rng, d, n)).unwrap();
        let state = ModelState::new(basis, assignments, None, hyper).unwrap();
        (state, obs)
    }

    #[test]
    fn dataset_marginal_single_point_equals_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let (state, obs) = small_state(&mut rng, 4, 2, 1);
        let total = dataset_log_marginal(&state, &obs).unwrap();
        let y = obs.point(0).into_owned();
        let single = marginal_log_likelihood_point(
            &y,
            &state.basis,
            &state.assignments.point_mask(0),
            state.hyper.sigma_x,
            state.hyper.sigma_y,
        )
        .unwrap();
        assert_relative_eq!(total, single, epsilon = 1e-10);
    }

    #[test]
    fn dataset_marginal_duplicated_point_doubles() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let w = random_orthonormal(&mut rng, 4, 2);
        let basis = ProjectionBasis::new(w, true).unwrap();
        let y = randn_vector(&mut rng, 4);
        let mut data = DMatrix::zeros(4, 2);
        data.column_mut(0).copy_from(&y);
        data.column_mut(1).copy_from(&y);
        let obs = ObservationSet::from_parts(data, DVector::zeros(4)).unwrap();
        let assignments = FeatureAssignments::all_ones(2, 2);
        let hyper = Hyperparameters::new(1.0, 1.0, 0.5, 1.0).unwrap();
        let state = ModelState::new(basis, assignments, None, hyper).unwrap();
        let total = dataset_log_marginal(&state, &obs).unwrap();
        let single = marginal_log_likelihood_point(
            &y,
            &state.basis,
            &[1, 1],
            state.hyper.sigma_x,
            state.hyper.sigma_y,
        )
        .unwrap();
        assert_relative_eq!(total, 2.0 * single, epsilon = 1e-10);
    }

    #[test]
    fn dataset_marginal_equals_sum_of_pointwise_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let (state, obs) = small_state(&mut rng, 5, 3, 5);
        let total = dataset_log_marginal(&state, &obs).unwrap();
        let mut sum = 0.0;
        for n in 0..5 {
            let y = obs.point(n).into_owned();
            sum += marginal_log_likelihood_point(
                &y,
                &state.basis,
                &state.assignments.point_mask(n),
                state.hyper.sigma_x,
                state.hyper.sigma_y,
            )
            .unwrap();
        }
        assert_relative_eq!(total, sum, epsilon = 1e-9);
    }

    #[test]
    fn orthonormal_basis_rejects_too_many_columns() {
        let w = DMatrix::<f64>::identity(2, 2);
        let mut wide = DMatrix::zeros(2, 3);
        wide.view_mut((0, 0), (2, 2)).copy_from(&w);
        assert!(ProjectionBasis::new(wide, true).is_err());
    }

    #[test]
    fn feature_assignment_counts_stay_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let mut fa = FeatureAssignments::new(DMatrix::from_fn(3, 8, |_, _| {
            (rng.random::<f64>() < 0.5) as u8
        }))
        .unwrap();
        for _ in 0..200 {
            let k = (rng.random::<f64>() * 3.0) as usize;
            let n = (rng.random::<f64>() * 8.0) as usize;
            fa.set(k, n, rng.random::<f64>() < 0.5);
            assert_eq!(fa.feature_counts(), fa.recomputed_counts().as_slice());
        }
    }

    #[test]
    fn degenerate_sigma_y_is_reported() {
        let basis = ProjectionBasis::new(DMatrix::identity(3, 1), true).unwrap();
        let y = DVector::zeros(3);
        let err = marginal_log_likelihood_point(&y, &basis, &[1], 1.0, 0.0).unwrap_err();
        assert!(err.to_string().contains("sigma_y"));
    }
}
