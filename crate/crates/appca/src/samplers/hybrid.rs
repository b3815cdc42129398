//! The hybrid Gibbs sweep: activation updates and births exactly as in the
//! collapsed chain but over an unconstrained basis, followed by an
//! expectation step for the latent coefficients and maximization steps for
//! the basis and both scale parameters.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ibp::{
    propose_and_accept_births, prune_dead_features, z_conditional_probability, BirthOutcome,
    ZLikelihoodMode,
};
use crate::model::{MarginalEvaluator, ModelState, ObservationSet, SOLVE_JITTER};
use crate::samplers::{sweep_order, RunConfig};

/// One full hybrid iteration: (a) activation sweep with uniform-sphere
/// birth proposals, (b) posterior expectation of the latent coefficients
/// for every point, (c) maximization updates of the basis and of both
/// scale parameters.
pub fn hybrid_sweep<R: Rng + ?Sized>(
    state: &mut ModelState,
    obs: &ObservationSet,
    cfg: &RunConfig,
    rng: &mut R,
) -> Result<()> {
    if state.latents.is_none() {
        return Err(Error::InvalidInput("hybrid sweep requires latent coefficients".into()));
    }
    state.validate()?;
    if !cfg.freeze_z {
        match cfg.z_likelihood {
            ZLikelihoodMode::Marginal => z_sweep_marginal(state, obs, cfg, rng)?,
            ZLikelihoodMode::AtCurrentLatents => z_sweep_at_latents(state, obs, cfg, rng)?,
        }
        prune_dead_features(state);
    }
    e_step(state, obs)?;
    m_step(state, obs, cfg.em_exact)?;
    Ok(())
}

/// Activation sweep under the collapsed marginal likelihood; new features
/// need no latent value, so the conditional is well defined for both
/// directions of the toggle.
fn z_sweep_marginal<R: Rng + ?Sized>(
    state: &mut ModelState,
    obs: &ObservationSet,
    cfg: &RunConfig,
    rng: &mut R,
) -> Result<()> {
    let n_points = obs.n_points();
    let mut eval =
        MarginalEvaluator::new(&state.basis, obs, state.hyper.sigma_x, state.hyper.sigma_y)?;
    for n in sweep_order(n_points, cfg.random_scan, rng) {
        let mut active = state.assignments.active_features(n);
        let mut current_ll = eval.log_marginal(n, &active);
        for k in 0..state.k_plus() {
            let m_minus = state.assignments.count_excluding(k, n);
            let is_active = state.assignments.is_active(k, n);
            if m_minus == 0 {
                if is_active {
                    state.assignments.set(k, n, false);
                    active.retain(|&a| a != k);
                    current_ll = eval.log_marginal(n, &active);
                }
                continue;
            }
            let toggled: Vec<usize> = if is_active {
                active.iter().copied().filter(|&a| a != k).collect()
            } else {
                let mut t = active.clone();
                let pos = t.partition_point(|&a| a < k);
                t.insert(pos, k);
                t
            };
            let toggled_ll = eval.log_marginal(n, &toggled);
            let (l1, l0) =
                if is_active { (current_ll, toggled_ll) } else { (toggled_ll, current_ll) };
            let p1 = z_conditional_probability(l1, l0, m_minus, n_points);
            let now_active = rng.random::<f64>() < p1;
            if now_active != is_active {
                state.assignments.set(k, n, now_active);
                active = toggled;
                current_ll = toggled_ll;
            }
        }
        if let BirthOutcome::Accepted(_) =
            propose_and_accept_births(n, state, obs, cfg.birth_rate, rng)?
        {
            eval.push_columns(&state.basis, obs);
        }
    }
    Ok(())
}

/// Activation sweep under the point likelihood at the current latent
/// coefficients. Toggling feature `k` shifts the residual by
/// `±x_{kn} w_k`, so each candidate is evaluated in `O(D)`.
fn z_sweep_at_latents<R: Rng + ?Sized>(
    state: &mut ModelState,
    obs: &ObservationSet,
    cfg: &RunConfig,
    rng: &mut R,
) -> Result<()> {
    let n_points = obs.n_points();
    let sy2 = state.hyper.sigma_y * state.hyper.sigma_y;
    for n in sweep_order(n_points, cfg.random_scan, rng) {
        let mut residual = obs.point(n).into_owned();
        {
            let latents = state.latents.as_ref().expect("checked in hybrid_sweep");
            let w = state.basis.matrix();
            for k in 0..state.k_plus() {
                if state.assignments.is_active(k, n) {
                    residual.axpy(-latents.x[(k, n)], &w.column(k), 1.0);
                }
            }
        }
        let mut rss = residual.norm_squared();
        for k in 0..state.k_plus() {
            let m_minus = state.assignments.count_excluding(k, n);
            let is_active = state.assignments.is_active(k, n);
            let x_kn = state.latents.as_ref().expect("checked").x[(k, n)];
            if m_minus == 0 {
                if is_active {
                    let w_k = state.basis.matrix().column(k).into_owned();
                    residual.axpy(x_kn, &w_k, 1.0);
                    rss = residual.norm_squared();
                    state.assignments.set(k, n, false);
                }
                continue;
            }
            let w_k = state.basis.matrix().column(k).into_owned();
            let dot = w_k.dot(&residual);
            let ww = w_k.norm_squared();
            // Residual sum of squares with the toggle applied.
            let toggled_rss = if is_active {
                // adding x w back: ||r + x w||^2
                rss + 2.0 * x_kn * dot + x_kn * x_kn * ww
            } else {
                rss - 2.0 * x_kn * dot + x_kn * x_kn * ww
            };
            let (rss1, rss0) = if is_active { (rss, toggled_rss) } else { (toggled_rss, rss) };
            // The Gaussian normalizer is shared; only the exponent differs.
            let p1 = z_conditional_probability(
                -rss1 / (2.0 * sy2),
                -rss0 / (2.0 * sy2),
                m_minus,
                n_points,
            );
            let now_active = rng.random::<f64>() < p1;
            if now_active != is_active {
                let sign = if now_active { -x_kn } else { x_kn };
                residual.axpy(sign, &w_k, 1.0);
                rss = toggled_rss;
                state.assignments.set(k, n, now_active);
            }
        }
        propose_and_accept_births(n, state, obs, cfg.birth_rate, rng)?;
    }
    Ok(())
}

/// Per-point posterior expectations of the masked latent coefficients:
///
/// ```text
/// x_n   = (sx^-2 I + sy^-2 A W^T W A)^-1 (sy^-2 A W^T y_n)
/// Psi_n = (sx^-2 I + sy^-2 A W^T W A)^-1 + x_n x_n^T
/// ```
///
/// Inactive coordinates carry their prior moments (zero mean, variance
/// `sigma_x^2`) and the cross blocks vanish.
pub(crate) fn e_step(state: &mut ModelState, obs: &ObservationSet) -> Result<()> {
    let k = state.k_plus();
    let n_points = obs.n_points();
    let w = state.basis.matrix();
    let gram = w.transpose() * w;
    let proj = w.transpose() * obs.data();
    let sx2 = state.hyper.sigma_x * state.hyper.sigma_x;
    let sy2 = state.hyper.sigma_y * state.hyper.sigma_y;

    let masks: Vec<Vec<usize>> = (0..n_points).map(|n| state.assignments.active_features(n)).collect();
    let per_point: Vec<(DVector<f64>, DMatrix<f64>)> = (0..n_points)
        .into_par_iter()
        .map(|n| {
            let active = &masks[n];
            let s = active.len();
            let mut x_n = DVector::zeros(k);
            let mut psi = DMatrix::zeros(k, k);
            for kk in 0..k {
                psi[(kk, kk)] = sx2;
            }
            if s == 0 {
                return (x_n, psi);
            }
            let mut m = DMatrix::<f64>::zeros(s, s);
            let mut h = DVector::<f64>::zeros(s);
            for (i, &ki) in active.iter().enumerate() {
                h[i] = proj[(ki, n)] / sy2;
                for (j, &kj) in active.iter().enumerate() {
                    m[(i, j)] = gram[(ki, kj)] / sy2 + if i == j { 1.0 / sx2 } else { 0.0 };
                }
            }
            let chol = nalgebra::Cholesky::new(m.clone()).unwrap_or_else(|| {
                let mut mj = m;
                for i in 0..s {
                    mj[(i, i)] += SOLVE_JITTER;
                }
                nalgebra::Cholesky::new(mj).expect("jittered E-step system must be SPD")
            });
            let mean = chol.solve(&h);
            let cov = chol.solve(&DMatrix::identity(s, s));
            for (i, &ki) in active.iter().enumerate() {
                x_n[ki] = mean[i];
                for (j, &kj) in active.iter().enumerate() {
                    psi[(ki, kj)] = cov[(i, j)] + mean[i] * mean[j];
                }
            }
            (x_n, psi)
        })
        .collect();

    let mut x = DMatrix::zeros(k, n_points);
    let mut psis = Vec::with_capacity(n_points);
    for (n, (x_n, psi)) in per_point.into_iter().enumerate() {
        x.column_mut(n).copy_from(&x_n);
        psis.push(psi);
    }
    let latents = state.latents.as_mut().expect("checked in hybrid_sweep");
    latents.x = x;
    latents.psi = Some(psis);
    Ok(())
}

/// Maximization updates, in order: the basis, then the noise variance at
/// the new basis, then the latent variance.
///
/// ```text
/// W       = (sum_n y_n (A x_n)^T) (sum_n A x_n x_n^T A)^-1
/// sigma_y^2 = 1/(N D) sum_n (y_n^T y_n - 2 x_n^T A W^T y_n + tr(A W^T W A Psi_n))
/// sigma_x^2 = 1/(N K) sum_n tr(Psi_n)
/// ```
///
/// With `em_exact` the basis update uses the expected second moments
/// `A Psi_n A` in place of the outer products, which is the exact EM
/// sufficient statistic. A numerically singular system falls back to a
/// jittered solve and, failing that, skips the basis update for this sweep.
pub(crate) fn m_step(state: &mut ModelState, obs: &ObservationSet, em_exact: bool) -> Result<()> {
    let k = state.k_plus();
    let n_points = obs.n_points();
    let d = obs.dims();
    let latents = state.latents.as_ref().expect("checked in hybrid_sweep");
    let psis = latents
        .psi
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("M-step requires E-step second moments".into()))?;

    // Masked loadings already carry zeros at inactive coordinates.
    let sxy = obs.data() * latents.x.transpose(); // D x K
    let mut sxx = if em_exact {
        let mut acc = DMatrix::<f64>::zeros(k, k);
        for n in 0..n_points {
            let active = state.assignments.active_features(n);
            let psi = &psis[n];
            for &i in &active {
                for &j in &active {
                    acc[(i, j)] += psi[(i, j)];
                }
            }
        }
        acc
    } else {
        &latents.x * latents.x.transpose()
    };

    for i in 0..k {
        sxx[(i, i)] += SOLVE_JITTER;
    }
    // The verbatim moment matrix is rank deficient whenever several fresh
    // features share a single active point (their outer-product block has
    // rank one), so a conditioning check must back the jittered solve: a
    // near-singular system would otherwise scale the new basis by the
    // inverse jitter.
    let well_conditioned = |chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>| {
        let diag = chol.l_dirty().diagonal();
        let max = diag.iter().cloned().fold(f64::MIN, f64::max);
        let min = diag.iter().cloned().fold(f64::MAX, f64::min);
        min > 1e-5 * max
    };
    match nalgebra::Cholesky::new(sxx) {
        Some(chol) if well_conditioned(&chol) => {
            let w_new_t = chol.solve(&sxy.transpose());
            state.basis.set_matrix(w_new_t.transpose());
        }
        _ => {
            log::debug!("M-step moment matrix singular despite jitter; basis update skipped");
        }
    }

    // Noise variance at the (possibly updated) basis.
    let w = state.basis.matrix();
    let gram = w.transpose() * w;
    let proj = w.transpose() * obs.data(); // K x N
    let mut total = 0.0;
    for n in 0..n_points {
        let active = state.assignments.active_features(n);
        let y = obs.point(n);
        let mut term = y.norm_squared();
        let psi = &psis[n];
        for &i in &active {
            term -= 2.0 * latents.x[(i, n)] * proj[(i, n)];
            for &j in &active {
                term += gram[(i, j)] * psi[(j, i)];
            }
        }
        total += term;
    }
    let sigma_y2 = total / (n_points * d) as f64;
    assert!(sigma_y2 > 0.0, "noise variance must stay positive, got {sigma_y2}");

    let psi_trace: f64 = psis.iter().map(|p| p.trace()).sum();
    let sigma_x2 = psi_trace / (n_points * k) as f64;
    assert!(sigma_x2 > 0.0, "latent variance must stay positive, got {sigma_x2}");

    state.hyper.sigma_y = sigma_y2.sqrt();
    state.hyper.sigma_x = sigma_x2.sqrt();
    Ok(())
}
