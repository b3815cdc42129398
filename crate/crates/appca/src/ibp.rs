//! Indian buffet process machinery: prior simulation, per-entry Gibbs
//! updates of the activation matrix, Metropolis-Hastings birth proposals
//! for new features, and dead-feature pruning.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::directional::{orthonormal_complement, sample_bingham, sample_unit_sphere, BinghamParameter};
use crate::error::{Error, Result};
use crate::model::{
    marginal_log_likelihood_point, point_log_likelihood, FeatureAssignments, ModelState,
    ObservationSet,
};

/// Which rate the per-point Poisson birth draw uses. `alpha/N` is the
/// standard finite-data Gibbs rate; `alpha/n` (the 1-based point index) is
/// kept as a fidelity toggle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BirthRateConvention {
    AlphaOverN,
    AlphaOverPointIndex,
}

/// Likelihood used inside the two-point conditional for `z_{kn}`: the
/// collapsed marginal, or the point likelihood at the current latent
/// coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZLikelihoodMode {
    Marginal,
    AtCurrentLatents,
}

/// A block of proposed new features for one point.
#[derive(Debug, Clone)]
pub struct BirthProposal {
    pub kappa: usize,
    pub new_columns: DMatrix<f64>,
    pub target_point: usize,
}

/// What happened to a birth proposal.
#[derive(Debug, Clone)]
pub enum BirthOutcome {
    /// Poisson draw was zero, or the orthonormality cap left no room.
    NoProposal,
    Rejected(BirthProposal),
    Accepted(BirthProposal),
}

fn sample_poisson<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> usize {
    if rate <= 0.0 {
        return 0;
    }
    let draw: f64 = Poisson::new(rate).expect("positive finite rate").sample(rng);
    draw as usize
}

/// Draws an activation matrix from the IBP restaurant process: customer 1
/// takes `Poisson(alpha)` dishes, customer `n` takes each existing dish `k`
/// with probability `m_k / n` and then `Poisson(alpha / n)` new dishes.
pub fn sample_ibp_prior<R: Rng + ?Sized>(
    n_points: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<FeatureAssignments> {
    if n_points == 0 {
        return Err(Error::InvalidInput("IBP prior needs at least one point".into()));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::InvalidInput(format!("alpha must be finite and non-negative, got {alpha}")));
    }
    let mut rows: Vec<Vec<u8>> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for customer in 1..=n_points {
        // Counts snapshot excludes the current customer.
        let prior_counts = counts.clone();
        for (k, &m_k) in prior_counts.iter().enumerate() {
            if rng.random::<f64>() < m_k as f64 / customer as f64 {
                rows[k][customer - 1] = 1;
                counts[k] += 1;
            }
        }
        let new_dishes = sample_poisson(alpha / customer as f64, rng);
        for _ in 0..new_dishes {
            let mut row = vec![0u8; n_points];
            row[customer - 1] = 1;
            rows.push(row);
            counts.push(1);
        }
    }
    let k = rows.len();
    let z = DMatrix::from_fn(k, n_points, |i, j| rows[i][j]);
    FeatureAssignments::new(z)
}

/// The exact two-point conditional probability `P(z_{kn} = 1)` given
/// log-likelihoods under both states and the prior weights
/// `m_{k,-n}/N` and `(N - m_{k,-n})/N`.
pub fn z_conditional_probability(
    log_like_active: f64,
    log_like_inactive: f64,
    m_minus: usize,
    n_points: usize,
) -> f64 {
    if m_minus == 0 {
        return 0.0;
    }
    if m_minus >= n_points {
        return 1.0;
    }
    // m / (m + (N - m) e^{l0 - l1}); equal likelihoods give exactly m/N.
    let m = m_minus as f64;
    let rest = (n_points - m_minus) as f64;
    let ratio = (log_like_inactive - log_like_active).exp();
    m / (m + rest * ratio)
}

/// Resamples a single entry `z_{kn}` from its two-point conditional and
/// keeps the cached feature counts consistent.
///
/// When no other point holds feature `k` the prior weight for keeping it is
/// exactly zero, so the entry is set to 0 deterministically; singleton
/// features for a point are created only through birth proposals.
pub fn gibbs_update_z_entry<R: Rng + ?Sized>(
    n: usize,
    k: usize,
    state: &mut ModelState,
    obs: &ObservationSet,
    mode: ZLikelihoodMode,
    rng: &mut R,
) -> Result<()> {
    let n_points = obs.n_points();
    if k >= state.k_plus() || n >= n_points {
        return Err(Error::InvalidInput(format!(
            "z update indices out of range: feature {k}, point {n}"
        )));
    }
    let m_minus = state.assignments.count_excluding(k, n);
    if m_minus == 0 {
        state.assignments.set(k, n, false);
        return Ok(());
    }
    let y = obs.point(n).into_owned();
    let mut mask = state.assignments.point_mask(n);
    let (log_l1, log_l0) = match mode {
        ZLikelihoodMode::Marginal => {
            mask[k] = 1;
            let l1 = marginal_log_likelihood_point(
                &y,
                &state.basis,
                &mask,
                state.hyper.sigma_x,
                state.hyper.sigma_y,
            )?;
            mask[k] = 0;
            let l0 = marginal_log_likelihood_point(
                &y,
                &state.basis,
                &mask,
                state.hyper.sigma_x,
                state.hyper.sigma_y,
            )?;
            (l1, l0)
        }
        ZLikelihoodMode::AtCurrentLatents => {
            let latents = state.latents.as_ref().ok_or_else(|| {
                Error::InvalidInput("z update at current latents requires latent coefficients".into())
            })?;
            let x = latents.x.column(n).into_owned();
            mask[k] = 1;
            let l1 = point_log_likelihood(&y, &state.basis, &x, &mask, state.hyper.sigma_y)?;
            mask[k] = 0;
            let l0 = point_log_likelihood(&y, &state.basis, &x, &mask, state.hyper.sigma_y)?;
            (l1, l0)
        }
    };
    let p1 = z_conditional_probability(log_l1, log_l0, m_minus, n_points);
    state.assignments.set(k, n, rng.random::<f64>() < p1);
    Ok(())
}

/// Log of the Metropolis-Hastings likelihood ratio for adding `new_columns`
/// as features active for point `n` only. Proposals are drawn from the
/// prior over new columns, so the prior terms cancel and only the
/// likelihood of point `n` remains.
///
/// Collapsed states use the marginal likelihood with the extended mask;
/// hybrid states use the marginal restricted to the new features with the
/// current loadings kept for the old ones.
pub(crate) fn birth_log_likelihood_ratio(
    state: &ModelState,
    obs: &ObservationSet,
    n: usize,
    new_columns: &DMatrix<f64>,
) -> Result<f64> {
    let y = obs.point(n).into_owned();
    let kappa = new_columns.ncols();
    let sx2 = state.hyper.sigma_x * state.hyper.sigma_x;
    let sy2 = state.hyper.sigma_y * state.hyper.sigma_y;
    if state.basis.is_orthonormal() {
        let mask = state.assignments.point_mask(n);
        let log_curr = marginal_log_likelihood_point(
            &y,
            &state.basis,
            &mask,
            state.hyper.sigma_x,
            state.hyper.sigma_y,
        )?;
        let mut w_prop = state.basis.clone();
        w_prop.push_columns(new_columns);
        let mut mask_prop = mask;
        mask_prop.extend(std::iter::repeat(1).take(kappa));
        let log_prop = marginal_log_likelihood_point(
            &y,
            &w_prop,
            &mask_prop,
            state.hyper.sigma_x,
            state.hyper.sigma_y,
        )?;
        Ok(log_prop - log_curr)
    } else {
        let latents = state.latents.as_ref().ok_or_else(|| {
            Error::InvalidInput("hybrid birth ratio requires latent coefficients".into())
        })?;
        // Residual of point n at the current loadings.
        let mut residual = y;
        let w = state.basis.matrix();
        for k in 0..state.k_plus() {
            if state.assignments.is_active(k, n) {
                residual.axpy(-latents.x[(k, n)], &w.column(k), 1.0);
            }
        }
        // log N(r; 0, sy2 I + sx2 U U^T) - log N(r; 0, sy2 I) via Woodbury.
        let h = new_columns.transpose() * &residual;
        let mut m = new_columns.transpose() * new_columns;
        for i in 0..kappa {
            m[(i, i)] += sy2 / sx2;
        }
        let chol = nalgebra::Cholesky::new(m).ok_or(Error::DegenerateScale {
            name: "sigma_x",
            value: state.hyper.sigma_x,
        })?;
        let log_det_m = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let solved = chol.solve(&h);
        let log_det_term = kappa as f64 * (sx2 / sy2).ln() + log_det_m;
        Ok(-0.5 * log_det_term + 0.5 * h.dot(&solved) / sy2)
    }
}

/// Draws `kappa ~ Poisson(rate)` new subspaces for point `n`, builds the
/// proposed columns (Bingham-from-complement for an orthonormal basis,
/// uniform on the sphere otherwise), and accepts or rejects the whole block
/// with a Metropolis-Hastings step on the likelihood of point `n` alone.
pub fn propose_and_accept_births<R: Rng + ?Sized>(
    n: usize,
    state: &mut ModelState,
    obs: &ObservationSet,
    convention: BirthRateConvention,
    rng: &mut R,
) -> Result<BirthOutcome> {
    propose_and_accept_births_with_scatter(n, state, obs, convention, None, rng)
}

/// As [`propose_and_accept_births`] but reusing a precomputed data scatter
/// `Y Y^T` for the collapsed proposal distribution.
pub(crate) fn propose_and_accept_births_with_scatter<R: Rng + ?Sized>(
    n: usize,
    state: &mut ModelState,
    obs: &ObservationSet,
    convention: BirthRateConvention,
    s_yy: Option<&DMatrix<f64>>,
    rng: &mut R,
) -> Result<BirthOutcome> {
    if n >= obs.n_points() {
        return Err(Error::InvalidInput(format!("birth proposal point {n} out of range")));
    }
    let n_points = obs.n_points();
    let rate = match convention {
        BirthRateConvention::AlphaOverN => state.hyper.alpha / n_points as f64,
        BirthRateConvention::AlphaOverPointIndex => state.hyper.alpha / (n + 1) as f64,
    };
    let mut kappa = sample_poisson(rate, rng);
    if kappa == 0 {
        return Ok(BirthOutcome::NoProposal);
    }
    let d = obs.dims();
    if state.basis.is_orthonormal() {
        let free = d - state.k_plus();
        if free == 0 {
            log::debug!("birth proposal skipped: no free orthonormal directions (K+ = D = {d})");
            return Ok(BirthOutcome::NoProposal);
        }
        kappa = kappa.min(free);
    }

    let new_columns = if state.basis.is_orthonormal() {
        let owned_scatter;
        let scatter = match s_yy {
            Some(m) => m,
            None => {
                owned_scatter = obs.data() * obs.data().transpose();
                &owned_scatter
            }
        };
        let mut w_prop = state.basis.matrix().clone();
        let mut cols = DMatrix::zeros(d, kappa);
        for i in 0..kappa {
            let b = orthonormal_complement(&w_prop)?;
            let param = BinghamParameter::new(b.transpose() * scatter * &b * state.hyper.sigma_v)?;
            let v = sample_bingham(&param, rng);
            let w_new = &b * v;
            cols.column_mut(i).copy_from(&w_new);
            let mut grown = DMatrix::zeros(d, w_prop.ncols() + 1);
            grown.view_mut((0, 0), (d, w_prop.ncols())).copy_from(&w_prop);
            grown.column_mut(w_prop.ncols()).copy_from(&w_new);
            w_prop = grown;
        }
        cols
    } else {
        let mut cols = DMatrix::zeros(d, kappa);
        for i in 0..kappa {
            cols.column_mut(i).copy_from(&sample_unit_sphere(d, rng));
        }
        cols
    };

    let proposal = BirthProposal { kappa, new_columns, target_point: n };
    let log_ratio = birth_log_likelihood_ratio(state, obs, n, &proposal.new_columns)?;
    if rng.random::<f64>().ln() < log_ratio {
        state.basis.push_columns(&proposal.new_columns);
        state.assignments.push_features_for_point(proposal.kappa, n);
        if let Some(latents) = state.latents.as_mut() {
            latents.push_zero_rows(proposal.kappa);
        }
        Ok(BirthOutcome::Accepted(proposal))
    } else {
        Ok(BirthOutcome::Rejected(proposal))
    }
}

/// Removes every feature with `m_k = 0` from the basis, assignments and
/// latents consistently. If all features are dead the most recently born
/// one is kept with a zero activation row and the state is flagged.
pub fn prune_dead_features(state: &mut ModelState) -> usize {
    let counts = state.assignments.feature_counts().to_vec();
    let keep: Vec<usize> = (0..counts.len()).filter(|&k| counts[k] > 0).collect();
    if keep.len() == counts.len() {
        state.floored = false;
        return 0;
    }
    let removed;
    if keep.is_empty() {
        // Keep the most recently born feature as a placeholder.
        let last = counts.len() - 1;
        removed = counts.len() - 1;
        state.basis.retain_columns(&[last]);
        state.assignments.retain_features(&[last]);
        if let Some(latents) = state.latents.as_mut() {
            latents.retain_rows(&[last]);
        }
        state.floored = true;
        log::debug!("all features died; retained one placeholder feature");
    } else {
        removed = counts.len() - keep.len();
        state.basis.retain_columns(&keep);
        state.assignments.retain_features(&keep);
        if let Some(latents) = state.latents.as_mut() {
            latents.retain_rows(&keep);
        }
        state.floored = false;
    }
    removed
}
