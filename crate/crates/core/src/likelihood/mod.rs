//! Marginal likelihood of the measurement model and its maximization.

mod bfgs;
mod fit;
mod marginal;

pub use fit::{fit_ml, loglik_gradient, FitOptions, FittedModel};
pub use marginal::{
    covariance_condition_range, dense_center_covariance, gls_beta, marginal_loglik,
    marginal_loglik_dense,
};
