//! Reference reducers used for comparisons: classical PCA, probabilistic
//! PCA fitted by EM, and mixtures of probabilistic principal component
//! analyzers (MPPCA).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{ObservationSet, LN_2PI, SOLVE_JITTER};

/// Convergence tolerance on the relative log-likelihood change.
const EM_REL_TOL: f64 = 1e-10;

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

/// Top-k principal directions and the projection of the data onto them.
#[derive(Debug, Clone)]
pub struct PcaFit {
    pub basis: DMatrix<f64>,
    pub reconstruction: DMatrix<f64>,
}

/// Principal component analysis of a centered observation set by singular
/// value decomposition; the reconstruction is the orthogonal projection
/// onto the span of the top-k left singular vectors.
pub fn pca_fit(obs: &ObservationSet, k: usize) -> Result<PcaFit> {
    let (d, n) = (obs.dims(), obs.n_points());
    if k == 0 || k > d.min(n) {
        return Err(Error::InvalidInput(format!(
            "PCA target dimension {k} out of range 1..={}",
            d.min(n)
        )));
    }
    let svd = nalgebra::SVD::new(obs.data().clone(), true, false);
    let u = svd.u.as_ref().expect("SVD with u requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].partial_cmp(&svd.singular_values[i]).unwrap());
    let mut basis = DMatrix::zeros(d, k);
    for (col, &i) in order.iter().take(k).enumerate() {
        basis.column_mut(col).copy_from(&u.column(i));
    }
    let reconstruction = &basis * (basis.transpose() * obs.data());
    Ok(PcaFit { basis, reconstruction })
}

// ---------------------------------------------------------------------------
// PPCA
// ---------------------------------------------------------------------------

/// EM-fitted probabilistic PCA model `y ~ N(0, W W^T + sigma^2 I)`.
#[derive(Debug, Clone)]
pub struct PpcaFit {
    pub basis: DMatrix<f64>,
    pub noise_variance: f64,
    pub log_likelihood: f64,
    pub log_likelihood_trace: Vec<f64>,
    pub converged: bool,
}

impl PpcaFit {
    /// Posterior-mean reconstruction `W M^-1 W^T y` with `M = W^T W + sigma^2 I`.
    pub fn reconstruct(&self, obs: &ObservationSet) -> DMatrix<f64> {
        let k = self.basis.ncols();
        let mut m = self.basis.transpose() * &self.basis;
        for i in 0..k {
            m[(i, i)] += self.noise_variance;
        }
        let chol = nalgebra::Cholesky::new(m).expect("M is SPD for sigma^2 > 0");
        let coeffs = chol.solve(&(self.basis.transpose() * obs.data()));
        &self.basis * coeffs
    }
}

/// Log-density of the PPCA marginal `N(y; 0, W W^T + sigma^2 I)`, evaluated
/// densely in the observed space. Deliberately shares no code with the
/// masked marginal likelihood so it can serve as an independent oracle for
/// the all-features-active special case.
pub fn ppca_log_density(y: &DVector<f64>, w: &DMatrix<f64>, noise_variance: f64) -> f64 {
    let d = y.len();
    let mut c = w * w.transpose();
    for i in 0..d {
        c[(i, i)] += noise_variance;
    }
    let chol = nalgebra::Cholesky::new(c).expect("covariance is SPD for sigma^2 > 0");
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let solved = chol.solve(y);
    -0.5 * (d as f64 * LN_2PI + log_det + y.dot(&solved))
}

struct PpcaUpdate {
    w: DMatrix<f64>,
    sigma2: f64,
    log_likelihood: f64,
}

/// One EM step for PPCA against a sample covariance `s` (`tr_s` its trace),
/// returning the updated parameters and the log-likelihood of the *current*
/// ones.
fn ppca_em_step(s: &DMatrix<f64>, tr_s: f64, n: usize, w: &DMatrix<f64>, sigma2: f64) -> PpcaUpdate {
    let (d, k) = (w.nrows(), w.ncols());
    let mut m = w.transpose() * w;
    for i in 0..k {
        m[(i, i)] += sigma2;
    }
    let m_chol = nalgebra::Cholesky::new(m.clone())
        .unwrap_or_else(|| {
            let mut mj = m;
            for i in 0..k {
                mj[(i, i)] += SOLVE_JITTER;
            }
            nalgebra::Cholesky::new(mj).expect("jittered M must be SPD")
        });
    let sw = s * w; // D x K
    let m_inv_wt_sw = m_chol.solve(&(w.transpose() * &sw)); // K x K
    let log_det_m = 2.0 * m_chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let log_det_c = (d as f64 - k as f64) * sigma2.ln() + log_det_m;
    let tr_cinv_s = (tr_s - m_inv_wt_sw.trace()) / sigma2;
    let log_likelihood = -0.5 * n as f64 * (d as f64 * LN_2PI + log_det_c + tr_cinv_s);

    // W_new = S W (sigma^2 I + M^-1 W^T S W)^-1
    let mut inner = m_inv_wt_sw.clone();
    for i in 0..k {
        inner[(i, i)] += sigma2;
    }
    let w_new = match inner.clone().lu().solve(&DMatrix::identity(k, k)) {
        Some(inv) => &sw * inv,
        None => w.clone(),
    };
    // sigma^2_new = tr(S - S W M^-1 W_new^T) / D
    let m_inv_wt_s = m_chol.solve(&(w.transpose() * s)); // K x D
    let tr_update = (&m_inv_wt_s * &w_new).trace();
    let sigma2_new = ((tr_s - tr_update) / d as f64).max(1e-12);
    PpcaUpdate { w: w_new, sigma2: sigma2_new, log_likelihood }
}

/// Fits PPCA with latent dimension `k` by EM. Returns the best parameters
/// seen, with `converged = false` when the relative log-likelihood change
/// never fell below tolerance within `iters` steps.
pub fn ppca_em_fit<R: Rng + ?Sized>(
    obs: &ObservationSet,
    k: usize,
    iters: usize,
    rng: &mut R,
) -> Result<PpcaFit> {
    let (d, n) = (obs.dims(), obs.n_points());
    if k == 0 || k >= d {
        return Err(Error::InvalidInput(format!("PPCA latent dimension {k} out of range 1..{d}")));
    }
    let s = obs.data() * obs.data().transpose() / n as f64;
    let tr_s = s.trace();
    let mut w = DMatrix::from_fn(d, k, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
    let mut sigma2 = (tr_s / d as f64).max(1e-6);
    let mut trace = Vec::with_capacity(iters);
    let mut converged = false;
    let mut last_ll = f64::NEG_INFINITY;
    for _ in 0..iters {
        let step = ppca_em_step(&s, tr_s, n, &w, sigma2);
        trace.push(step.log_likelihood);
        if (step.log_likelihood - last_ll).abs() < EM_REL_TOL * (1.0 + step.log_likelihood.abs()) {
            converged = true;
            break;
        }
        last_ll = step.log_likelihood;
        w = step.w;
        sigma2 = step.sigma2;
    }
    // Log-likelihood of the final parameters.
    let final_ll = ppca_em_step(&s, tr_s, n, &w, sigma2).log_likelihood;
    if !converged {
        log::debug!("PPCA EM did not converge in {iters} iterations; returning best-so-far");
    }
    Ok(PpcaFit {
        basis: w,
        noise_variance: sigma2,
        log_likelihood: final_ll,
        log_likelihood_trace: trace,
        converged,
    })
}

// ---------------------------------------------------------------------------
// MPPCA
// ---------------------------------------------------------------------------

/// Parameters of a mixture of probabilistic principal component analyzers.
#[derive(Debug, Clone)]
pub struct MppcaModel {
    pub component_weights: Vec<f64>,
    pub component_means: Vec<DVector<f64>>,
    pub component_bases: Vec<DMatrix<f64>>,
    pub component_noise: Vec<f64>,
}

impl MppcaModel {
    pub fn validate(&self) -> Result<()> {
        let m = self.component_weights.len();
        if m == 0
            || self.component_means.len() != m
            || self.component_bases.len() != m
            || self.component_noise.len() != m
        {
            return Err(Error::InvalidInput("mixture components are inconsistent".into()));
        }
        let total: f64 = self.component_weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidInput(format!("mixture weights sum to {total}, not 1")));
        }
        if self.component_noise.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidInput("mixture noise variances must be positive".into()));
        }
        Ok(())
    }

    pub fn n_components(&self) -> usize {
        self.component_weights.len()
    }

    /// Per-component log joint `log pi_j + log N(y_n; mu_j, C_j)` for every
    /// point; rows are components.
    pub fn log_joint(&self, obs: &ObservationSet) -> DMatrix<f64> {
        let (d, n, m) = (obs.dims(), obs.n_points(), self.n_components());
        let mut out = DMatrix::zeros(m, n);
        for j in 0..m {
            let w = &self.component_bases[j];
            let k = w.ncols();
            let sigma2 = self.component_noise[j];
            let mut mj = w.transpose() * w;
            for i in 0..k {
                mj[(i, i)] += sigma2;
            }
            let chol = nalgebra::Cholesky::new(mj).expect("M is SPD for sigma^2 > 0");
            let log_det_m = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let log_det_c = (d as f64 - k as f64) * sigma2.ln() + log_det_m;
            let log_pi = self.component_weights[j].max(1e-300).ln();
            for nn in 0..n {
                let r = obs.point(nn) - &self.component_means[j];
                let h = w.transpose() * &r;
                let quad = (r.norm_squared() - h.dot(&chol.solve(&h))) / sigma2;
                out[(j, nn)] =
                    log_pi - 0.5 * (d as f64 * LN_2PI + log_det_c + quad);
            }
        }
        out
    }

    /// Maximum-responsibility component index for every point.
    pub fn assignments(&self, obs: &ObservationSet) -> Vec<usize> {
        let lj = self.log_joint(obs);
        (0..obs.n_points())
            .map(|n| {
                (0..self.n_components())
                    .max_by(|&a, &b| lj[(a, n)].partial_cmp(&lj[(b, n)]).unwrap())
                    .unwrap()
            })
            .collect()
    }

    /// Hard-assignment reconstruction: each point is reconstructed by its
    /// maximum-responsibility component's posterior mean.
    pub fn reconstruct(&self, obs: &ObservationSet) -> DMatrix<f64> {
        let assignments = self.assignments(obs);
        let (d, n) = (obs.dims(), obs.n_points());
        let mut out = DMatrix::zeros(d, n);
        let solvers: Vec<_> = (0..self.n_components())
            .map(|j| {
                let w = &self.component_bases[j];
                let mut mj = w.transpose() * w;
                for i in 0..w.ncols() {
                    mj[(i, i)] += self.component_noise[j];
                }
                nalgebra::Cholesky::new(mj).expect("M is SPD")
            })
            .collect();
        for nn in 0..n {
            let j = assignments[nn];
            let w = &self.component_bases[j];
            let r = obs.point(nn) - &self.component_means[j];
            let coeff = solvers[j].solve(&(w.transpose() * &r));
            let rec = &self.component_means[j] + w * coeff;
            out.column_mut(nn).copy_from(&rec);
        }
        out
    }

    /// Total log-likelihood of the data under the mixture.
    pub fn log_likelihood(&self, obs: &ObservationSet) -> f64 {
        let lj = self.log_joint(obs);
        (0..obs.n_points()).map(|n| log_sum_exp(lj.column(n).as_slice())).sum()
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// An EM-fitted mixture together with its likelihood history.
#[derive(Debug, Clone)]
pub struct MppcaFit {
    pub model: MppcaModel,
    pub log_likelihood: f64,
    pub log_likelihood_trace: Vec<f64>,
    pub converged: bool,
}

/// Fits an MPPCA mixture with `m` components of latent dimension `k`,
/// keeping the best of 10 random restarts by final log-likelihood.
pub fn mppca_em_fit<R: Rng + ?Sized>(
    obs: &ObservationSet,
    m: usize,
    k: usize,
    iters: usize,
    rng: &mut R,
) -> Result<MppcaFit> {
    mppca_em_fit_with_restarts(obs, m, k, iters, 10, rng)
}

pub fn mppca_em_fit_with_restarts<R: Rng + ?Sized>(
    obs: &ObservationSet,
    m: usize,
    k: usize,
    iters: usize,
    restarts: usize,
    rng: &mut R,
) -> Result<MppcaFit> {
    if m == 0 {
        return Err(Error::InvalidInput("mixture needs at least one component".into()));
    }
    let d = obs.dims();
    if k == 0 || k >= d {
        return Err(Error::InvalidInput(format!("MPPCA latent dimension {k} out of range 1..{d}")));
    }
    if obs.n_points() < m {
        return Err(Error::InvalidInput("fewer points than mixture components".into()));
    }
    let mut best: Option<MppcaFit> = None;
    for _ in 0..restarts.max(1) {
        let fit = mppca_em_run(obs, m, k, iters, rng)?;
        if best.as_ref().map_or(true, |b| fit.log_likelihood > b.log_likelihood) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// k-means++ style seeding of component means followed by a few Lloyd
/// iterations.
fn seed_means<R: Rng + ?Sized>(obs: &ObservationSet, m: usize, rng: &mut R) -> Vec<DVector<f64>> {
    let n = obs.n_points();
    let mut centers: Vec<DVector<f64>> = Vec::with_capacity(m);
    centers.push(obs.point((rng.random::<f64>() * n as f64) as usize % n).into_owned());
    while centers.len() < m {
        let dists: Vec<f64> = (0..n)
            .map(|nn| {
                centers
                    .iter()
                    .map(|c| (obs.point(nn) - c).norm_squared())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = dists.iter().sum();
        if total <= 0.0 {
            centers.push(obs.point((rng.random::<f64>() * n as f64) as usize % n).into_owned());
            continue;
        }
        let mut target = rng.random::<f64>() * total;
        let mut chosen = n - 1;
        for (nn, &w) in dists.iter().enumerate() {
            target -= w;
            if target <= 0.0 {
                chosen = nn;
                break;
            }
        }
        centers.push(obs.point(chosen).into_owned());
    }
    for _ in 0..5 {
        let mut sums = vec![DVector::<f64>::zeros(obs.dims()); m];
        let mut counts = vec![0usize; m];
        for nn in 0..n {
            let j = (0..m)
                .min_by(|&a, &b| {
                    let da = (obs.point(nn) - &centers[a]).norm_squared();
                    let db = (obs.point(nn) - &centers[b]).norm_squared();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            sums[j] += obs.point(nn);
            counts[j] += 1;
        }
        for j in 0..m {
            if counts[j] > 0 {
                centers[j] = &sums[j] / counts[j] as f64;
            }
        }
    }
    centers
}

fn mppca_em_run<R: Rng + ?Sized>(
    obs: &ObservationSet,
    m: usize,
    k: usize,
    iters: usize,
    rng: &mut R,
) -> Result<MppcaFit> {
    let (d, n) = (obs.dims(), obs.n_points());
    let global_var = obs.data().iter().map(|v| v * v).sum::<f64>() / (d * n) as f64;
    let means = seed_means(obs, m, rng);
    let mut model = MppcaModel {
        component_weights: vec![1.0 / m as f64; m],
        component_means: means,
        component_bases: (0..m)
            .map(|_| DMatrix::from_fn(d, k, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal)))
            .collect(),
        component_noise: vec![global_var.max(1e-6); m],
    };
    let mut trace = Vec::with_capacity(iters);
    let mut converged = false;
    let mut last_ll = f64::NEG_INFINITY;
    for _ in 0..iters {
        // E-step: responsibilities.
        let lj = model.log_joint(obs);
        let mut ll = 0.0;
        let mut resp = DMatrix::zeros(m, n);
        for nn in 0..n {
            let lse = log_sum_exp(lj.column(nn).as_slice());
            ll += lse;
            for j in 0..m {
                resp[(j, nn)] = (lj[(j, nn)] - lse).exp();
            }
        }
        trace.push(ll);
        if (ll - last_ll).abs() < EM_REL_TOL * (1.0 + ll.abs()) {
            converged = true;
            break;
        }
        last_ll = ll;

        // M-step.
        for j in 0..m {
            let nj: f64 = (0..n).map(|nn| resp[(j, nn)]).sum();
            if nj < 1e-8 * n as f64 {
                // Empty component: re-seed from the worst reconstructed point.
                let rec = model.reconstruct(obs);
                let worst = (0..n)
                    .max_by(|&a, &b| {
                        let ea = (obs.point(a) - rec.column(a)).norm_squared();
                        let eb = (obs.point(b) - rec.column(b)).norm_squared();
                        ea.partial_cmp(&eb).unwrap()
                    })
                    .unwrap();
                log::debug!("MPPCA component {j} went empty; re-seeding at point {worst}");
                model.component_means[j] = obs.point(worst).into_owned();
                model.component_bases[j] =
                    DMatrix::from_fn(d, k, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
                model.component_noise[j] = global_var.max(1e-6);
                model.component_weights[j] = 1.0 / n as f64;
                continue;
            }
            model.component_weights[j] = nj / n as f64;
            let mut mu = DVector::zeros(d);
            for nn in 0..n {
                mu.axpy(resp[(j, nn)], &obs.point(nn), 1.0);
            }
            mu /= nj;
            let mut s_j = DMatrix::zeros(d, d);
            for nn in 0..n {
                let r = obs.point(nn) - &mu;
                s_j.ger(resp[(j, nn)] / nj, &r, &r, 1.0);
            }
            let tr_sj = s_j.trace();
            let step = ppca_em_step(&s_j, tr_sj, 1, &model.component_bases[j], model.component_noise[j]);
            model.component_means[j] = mu;
            model.component_bases[j] = step.w;
            model.component_noise[j] = step.sigma2;
        }
        // Renormalize weights (re-seeding can perturb the sum).
        let total: f64 = model.component_weights.iter().sum();
        for w in &mut model.component_weights {
            *w /= total;
        }
    }
    let log_likelihood = model.log_likelihood(obs);
    if !converged {
        log::debug!("MPPCA EM did not converge in {iters} iterations");
    }
    Ok(MppcaFit { model, log_likelihood, log_likelihood_trace: trace, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::model::{center_observations, mean_absolute_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn pca_full_rank_reconstructs_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = center_observations(&randn(&mut rng, 5, 40)).unwrap();
        let fit = pca_fit(&obs, 5).unwrap();
        assert!(mean_absolute_error(obs.data(), &fit.reconstruction).unwrap() < 1e-8);
    }

    #[test]
    fn pca_rank_one_data_is_exact_with_one_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dir = randn(&mut rng, 6, 1);
        let coeffs = randn(&mut rng, 1, 50);
        let obs = center_observations(&(&dir * &coeffs)).unwrap();
        let fit = pca_fit(&obs, 1).unwrap();
        assert!(mean_absolute_error(obs.data(), &fit.reconstruction).unwrap() < 1e-8);
    }

    #[test]
    fn pca_basis_is_orthonormal_and_mae_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let obs = center_observations(&randn(&mut rng, 8, 60)).unwrap();
        let mut last = f64::INFINITY;
        for k in 1..=8 {
            let fit = pca_fit(&obs, k).unwrap();
            assert!(crate::model::gram_residual(&fit.basis) < 1e-10);
            let mae = mean_absolute_error(obs.data(), &fit.reconstruction).unwrap();
            assert!(mae <= last + 1e-12, "MAE increased at k={k}: {mae} > {last}");
            last = mae;
        }
    }

    #[test]
    fn pca_rejects_out_of_range_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let obs = center_observations(&randn(&mut rng, 4, 10)).unwrap();
        assert!(pca_fit(&obs, 0).is_err());
        assert!(pca_fit(&obs, 5).is_err());
    }

    #[test]
    fn ppca_log_likelihood_is_non_decreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let obs = center_observations(&randn(&mut rng, 6, 80)).unwrap();
        let fit = ppca_em_fit(&obs, 2, 100, &mut rng).unwrap();
        for pair in fit.log_likelihood_trace.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-9, "EM decreased: {} -> {}", pair[0], pair[1]);
        }
    }

    #[test]
    fn ppca_recovers_isotropic_noise_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let true_sigma2: f64 = 0.49;
        let mut total_rel_err = 0.0;
        for _ in 0..10 {
            let data = randn(&mut rng, 8, 4000) * true_sigma2.sqrt();
            let obs = center_observations(&data).unwrap();
            let fit = ppca_em_fit(&obs, 2, 300, &mut rng).unwrap();
            total_rel_err += (fit.noise_variance - true_sigma2).abs() / true_sigma2;
        }
        let mean_rel_err = total_rel_err / 10.0;
        assert!(mean_rel_err < 0.05, "mean relative sigma^2 error {mean_rel_err}");
    }

    #[test]
    fn ppca_matches_generating_likelihood_on_planted_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (d, k, n) = (5, 4, 3000);
        let w_true = randn(&mut rng, d, k);
        let x = randn(&mut rng, k, n);
        let noise = randn(&mut rng, d, n) * 0.4;
        let obs = center_observations(&(&w_true * &x + noise)).unwrap();
        let fit = ppca_em_fit(&obs, k, 500, &mut rng).unwrap();
        let generating_ll: f64 =
            (0..n).map(|nn| ppca_log_density(&obs.point(nn).into_owned(), &w_true, 0.16)).sum();
        assert!(
            fit.log_likelihood >= generating_ll - 0.01 * generating_ll.abs(),
            "fitted ll {} vs generating {}",
            fit.log_likelihood,
            generating_ll
        );
    }

    #[test]
    fn ppca_low_noise_limit_approaches_pca_subspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = SyntheticSpec {
            dims: 6,
            k_plus: 2,
            n_points: 500,
            sigma_x: 1.5,
            sigma_y: 0.01,
            seed: 99,
        };
        let synth = generate_synthetic(&spec).unwrap();
        let obs = center_observations(&synth.y).unwrap();
        let pca = pca_fit(&obs, 2).unwrap();
        let fit = ppca_em_fit(&obs, 2, 2000, &mut rng).unwrap();
        // Orthonormalize the fitted basis and compare principal angles.
        let q = {
            let svd = nalgebra::SVD::new(fit.basis.clone(), true, false);
            svd.u.unwrap()
        };
        let overlap = pca.basis.transpose() * &q;
        let svals = nalgebra::SVD::new(overlap, false, false).singular_values;
        let min_cos = svals.iter().cloned().fold(f64::INFINITY, f64::min).min(1.0);
        let max_angle_deg = min_cos.acos().to_degrees();
        assert!(max_angle_deg < 1.0, "largest principal angle {max_angle_deg} deg");
    }

    #[test]
    fn mppca_single_component_collapses_to_ppca() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let obs = center_observations(&randn(&mut rng, 5, 300)).unwrap();
        let ppca = ppca_em_fit(&obs, 2, 3000, &mut rng).unwrap();
        let mppca = mppca_em_fit_with_restarts(&obs, 1, 2, 3000, 2, &mut rng).unwrap();
        assert!(
            (ppca.log_likelihood - mppca.log_likelihood).abs() < 1e-6 * ppca.log_likelihood.abs(),
            "PPCA ll {} vs MPPCA(M=1) ll {}",
            ppca.log_likelihood,
            mppca.log_likelihood
        );
    }

    #[test]
    fn mppca_log_likelihood_is_non_decreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let obs = center_observations(&randn(&mut rng, 6, 200)).unwrap();
        let fit = mppca_em_fit_with_restarts(&obs, 2, 2, 60, 1, &mut rng).unwrap();
        for pair in fit.log_likelihood_trace.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-9, "EM decreased: {} -> {}", pair[0], pair[1]);
        }
    }

    #[test]
    fn mppca_separates_two_planted_subspaces() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 8;
        let n_half = 150;
        // Two well-separated clusters, each on its own 1-D subspace.
        let dir_a = DVector::from_fn(d, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let dir_b = DVector::from_fn(d, |i, _| if i == 1 { 1.0 } else { 0.0 });
        let mut data = DMatrix::zeros(d, 2 * n_half);
        for i in 0..n_half {
            let xa: f64 = rng.sample(StandardNormal);
            let xb: f64 = rng.sample(StandardNormal);
            let mut col_a = &dir_a * (3.0 * xa);
            col_a[2] += 12.0; // offset cluster A
            let col_b = &dir_b * (3.0 * xb);
            for r in 0..d {
                data[(r, i)] = col_a[r] + 0.05 * rng.sample::<f64, _>(StandardNormal);
                data[(r, n_half + i)] = col_b[r] + 0.05 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let obs = center_observations(&data).unwrap();
        let fit = mppca_em_fit_with_restarts(&obs, 2, 1, 100, 3, &mut rng).unwrap();
        let assignments = fit.model.assignments(&obs);
        // Majority label of each half must be internally consistent >= 95%.
        let label_a = assignments[..n_half]
            .iter()
            .filter(|&&a| a == assignments[0])
            .count() as f64
            / n_half as f64;
        let label_b = assignments[n_half..]
            .iter()
            .filter(|&&a| a != assignments[0])
            .count() as f64
            / n_half as f64;
        assert!(label_a >= 0.95, "cluster A purity {label_a}");
        assert!(label_b >= 0.95, "cluster B purity {label_b}");
    }

    #[test]
    fn mppca_model_validates_weights() {
        let model = MppcaModel {
            component_weights: vec![0.6, 0.5],
            component_means: vec![DVector::zeros(2), DVector::zeros(2)],
            component_bases: vec![DMatrix::zeros(2, 1), DMatrix::zeros(2, 1)],
            component_noise: vec![0.1, 0.1],
        };
        assert!(model.validate().is_err());
    }
}
