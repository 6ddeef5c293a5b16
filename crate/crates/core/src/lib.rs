//! Three-level factor measurement model, empirical-Bayes factor scores and
//! weighted dose-response estimation for classroom quality data.

pub mod balance;
pub mod eb;
pub mod error;
pub mod drf;
pub mod ident;
pub mod io;
pub mod likelihood;
pub mod linalg;
pub mod model;
pub mod sim;
pub mod table;
pub mod vpc;

#[cfg(test)]
mod properties;
#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use likelihood::{fit_ml, loglik_gradient, marginal_loglik, FitOptions, FittedModel};
pub use model::*;
pub use table::ClassroomTable;
