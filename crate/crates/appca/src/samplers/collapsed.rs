//! The collapsed Gibbs sweep: per-entry activation updates under the
//! marginal likelihood, orthonormal birth proposals, and Bingham
//! resampling of every basis column from its conditional.

use nalgebra::DMatrix;
use rand::Rng;

use crate::directional::{column_parameter_from_sums, orthonormal_complement, sample_bingham};
use crate::error::{Error, Result};
use crate::ibp::{
    propose_and_accept_births_with_scatter, prune_dead_features, z_conditional_probability,
};
use crate::model::{ModelState, ObservationSet, LN_2PI};
use crate::samplers::{sweep_order, RunConfig};

/// One full collapsed Gibbs iteration: (a) for each point, resample every
/// activation entry and run the birth proposal; (b) prune dead features;
/// (c) resample every basis column from its Bingham conditional, column 1
/// first and then ascending. The basis stays orthonormal throughout.
pub fn collapsed_sweep<R: Rng + ?Sized>(
    state: &mut ModelState,
    obs: &ObservationSet,
    cfg: &RunConfig,
    rng: &mut R,
) -> Result<()> {
    let scatter = obs.data() * obs.data().transpose();
    collapsed_sweep_with_scatter(state, obs, &scatter, cfg, rng)
}

pub(crate) fn collapsed_sweep_with_scatter<R: Rng + ?Sized>(
    state: &mut ModelState,
    obs: &ObservationSet,
    scatter: &DMatrix<f64>,
    cfg: &RunConfig,
    rng: &mut R,
) -> Result<()> {
    if !state.basis.is_orthonormal() {
        return Err(Error::InvalidInput("collapsed sweep requires an orthonormal basis".into()));
    }
    state.validate()?;
    let n_points = obs.n_points();
    let d = obs.dims() as f64;
    let sx2 = state.hyper.sigma_x * state.hyper.sigma_x;
    let sy2 = state.hyper.sigma_y * state.hyper.sigma_y;
    let shrink = sx2 / (sx2 + sy2);
    // Closed-form marginal for an orthonormal basis, parameterized by the
    // active count `s` and the active projection mass `q`.
    let log_marginal = |yy: f64, q: f64, s: f64| -> f64 {
        let log_det = (d - s) * sy2.ln() + s * (sx2 + sy2).ln();
        -0.5 * (d * LN_2PI + log_det + (yy - shrink * q) / sy2)
    };

    if !cfg.freeze_z {
        for n in sweep_order(n_points, cfg.random_scan, rng) {
            let y = obs.point(n);
            let yy = y.norm_squared();
            let k_now = state.k_plus();
            // Projections of this point onto every current basis column.
            let h: Vec<f64> = (0..k_now)
                .map(|k| state.basis.matrix().column(k).dot(&y))
                .collect();
            let mut q = 0.0;
            let mut s = 0usize;
            for k in 0..k_now {
                if state.assignments.is_active(k, n) {
                    q += h[k] * h[k];
                    s += 1;
                }
            }
            for k in 0..k_now {
                let m_minus = state.assignments.count_excluding(k, n);
                let is_active = state.assignments.is_active(k, n);
                if m_minus == 0 {
                    if is_active {
                        state.assignments.set(k, n, false);
                        q -= h[k] * h[k];
                        s -= 1;
                    }
                    continue;
                }
                let hk2 = h[k] * h[k];
                let (q1, s1) = if is_active { (q, s) } else { (q + hk2, s + 1) };
                let (q0, s0) = if is_active { (q - hk2, s - 1) } else { (q, s) };
                let l1 = log_marginal(yy, q1, s1 as f64);
                let l0 = log_marginal(yy, q0, s0 as f64);
                let p1 = z_conditional_probability(l1, l0, m_minus, n_points);
                let now_active = rng.random::<f64>() < p1;
                if now_active != is_active {
                    state.assignments.set(k, n, now_active);
                    if now_active {
                        q += hk2;
                        s += 1;
                    } else {
                        q -= hk2;
                        s -= 1;
                    }
                }
            }
            // The activation loop for this point is complete, so the stale
            // projection cache can be dropped; the next point recomputes it
            // against the possibly grown basis.
            propose_and_accept_births_with_scatter(
                n,
                state,
                obs,
                cfg.birth_rate,
                Some(scatter),
                rng,
            )?;
        }
        prune_dead_features(state);
    }

    resample_basis_collapsed(state, obs, Some(scatter), rng)?;
    Ok(())
}

/// Resamples every column of the orthonormal basis from its Bingham
/// conditional: the first column on the full sphere, then each subsequent
/// column inside the orthogonal complement of the columns already drawn.
pub fn resample_basis_collapsed<R: Rng + ?Sized>(
    state: &mut ModelState,
    obs: &ObservationSet,
    scatter: Option<&DMatrix<f64>>,
    rng: &mut R,
) -> Result<()> {
    let owned;
    let s_yy = match scatter {
        Some(m) => m,
        None => {
            owned = obs.data() * obs.data().transpose();
            &owned
        }
    };
    let (dims, k) = (obs.dims(), state.k_plus());
    let mut new_w = DMatrix::<f64>::zeros(dims, k);
    for j in 0..k {
        let s_zy = weighted_scatter(obs, state, j);
        if j == 0 {
            let param = column_parameter_from_sums(s_yy, &s_zy, &state.hyper, None)?;
            let v = sample_bingham(&param, rng);
            new_w.column_mut(0).copy_from(&v);
        } else {
            let head = new_w.columns(0, j).into_owned();
            let b = orthonormal_complement(&head)?;
            let param = column_parameter_from_sums(s_yy, &s_zy, &state.hyper, Some(&b))?;
            let v = sample_bingham(&param, rng);
            let w_j = &b * v;
            new_w.column_mut(j).copy_from(&w_j);
        }
    }
    state.basis.set_matrix(new_w);
    Ok(())
}

/// `sum_{n: z_{jn} = 1} y_n y_n^T`.
fn weighted_scatter(obs: &ObservationSet, state: &ModelState, feature: usize) -> DMatrix<f64> {
    let d = obs.dims();
    let active: Vec<usize> =
        (0..obs.n_points()).filter(|&n| state.assignments.is_active(feature, n)).collect();
    let mut selected = DMatrix::zeros(d, active.len());
    for (col, &n) in active.iter().enumerate() {
        selected.column_mut(col).copy_from(&obs.point(n));
    }
    &selected * selected.transpose()
}
