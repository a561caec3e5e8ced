//! Monte Carlo contribution estimators.
//!
//! `v(S, x*)` is approximated by `(1/K) Σ_k f(x*_S, x_S̄^[k])` where the
//! `x_S̄^[k]` come from one of three samplers:
//!
//! * independence: training rows drawn uniformly, ignoring `x*_S`;
//! * empirical: training rows near `x*_S`, weighted by a Gaussian kernel;
//! * gaussian: the closed-form conditional of a fitted multivariate normal.

mod gaussian;
mod samplers;

pub use gaussian::{
    cholesky_with_jitter, conditional_gaussian, fit_gaussian, sample_standard_normals, Conditioner,
    GaussianModel, JITTER_LADDER,
};
pub use samplers::{
    empirical_sample, independence_sample, McConfig, MonteCarloEstimator, PreparedMonteCarlo,
    SamplerKind,
};
