//! Adaptive probabilistic PCA (A-PPCA).
//!
//! A latent feature extension of probabilistic PCA: every data point
//! activates its own subset of 1-D linear subspaces, with an Indian buffet
//! process prior over the unbounded binary activation matrix. Inference is
//! by Markov chain Monte Carlo, with two interchangeable procedures:
//!
//! * a collapsed Gibbs sampler that integrates the continuous loadings out
//!   analytically and resamples orthonormal subspace directions from their
//!   Bingham conditionals, and
//! * a hybrid Gibbs sampler that keeps the discrete activation sweep but
//!   replaces the direction and scale updates with EM-style expectation and
//!   maximization steps over an unconstrained basis.
//!
//! The crate also ships the reference reducers the method is usually
//! compared against (PCA, probabilistic PCA, mixtures of probabilistic
//! PCA), a synthetic data generator, and CSV ingestion utilities. The
//! `appca-cli` crate exposes all of it on the command line.

pub mod baselines;
pub mod data;
pub mod directional;
pub mod error;
pub mod ibp;
pub mod model;
pub mod samplers;

pub use error::{Error, Result};
pub use model::{
    center_observations, dataset_log_marginal, mean_absolute_error, reconstruct,
    FeatureAssignments, Hyperparameters, LatentCoefficients, MarginalEvaluator, ModelState,
    ObservationSet, ProjectionBasis,
};
pub use samplers::{fit, FitResult, RunConfig, SamplerKind};
