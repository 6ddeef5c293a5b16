//! Variance partition coefficients and factor correlations.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{ItemCatalog, ParameterSet};

pub const NOT_IDENTIFIED: &str = "not point-identified";

#[derive(Debug, Clone, PartialEq)]
pub struct ItemVpc {
    pub item_id: String,
    pub factor: usize,
    pub lambda: f64,
    /// Residual (item-level) variance.
    pub v1: f64,
    /// Classroom-level variance `L_i^T Psi L_i`.
    pub v2: f64,
    /// Center-level variance.
    pub v3: f64,
    pub pi1: f64,
    pub pi2: f64,
    pub pi3: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VpcTable {
    pub items: Vec<ItemVpc>,
    pub pi1_bar: f64,
    pub pi2_bar: f64,
    pub pi3_bar: f64,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelShares {
    pub v1: f64,
    pub v2: f64,
    pub v3: f64,
    pub pi1: f64,
    pub pi2: f64,
    pub pi3: f64,
}

fn shares(v1: f64, v2: f64, v3: f64) -> LevelShares {
    let total = v1 + v2 + v3;
    LevelShares {
        v1,
        v2,
        v3,
        pi1: v1 / total,
        pi2: v2 / total,
        pi3: v3 / total,
    }
}

/// Per-item shares and overall shares. Overall shares apply the share
/// formula to the weighted mean classroom variance; they are not averages of
/// the per-item shares. `weights` defaults to equal weights.
pub fn item_vpc(theta: &ParameterSet, catalog: &ItemCatalog, weights: Option<&[f64]>) -> Result<VpcTable> {
    let ni = theta.n_items();
    if catalog.n_items() != ni {
        return Err(Error::DimensionMismatch("catalog does not match the model".into()));
    }
    let w: Vec<f64> = match weights {
        Some(w) if w.len() != ni => {
            return Err(Error::DimensionMismatch(format!("{} weights for {ni} items", w.len())))
        }
        Some(w) => w.to_vec(),
        None => vec![1.0; ni],
    };
    let wsum: f64 = w.iter().sum();
    if !(wsum > 0.0) {
        return Err(Error::ZeroWeightVector);
    }
    let mut items = Vec::with_capacity(ni);
    let mut v2_bar = 0.0;
    for i in 0..ni {
        let l = theta.lambda.row(i).transpose();
        let v2 = (l.transpose() * &theta.psi2 * &l)[0];
        v2_bar += w[i] * v2 / wsum;
        let s = shares(theta.sigma2_eps, v2, theta.sigma2_alpha);
        items.push(ItemVpc {
            item_id: catalog.item(i).item_id.clone(),
            factor: theta.meta.factor_of[i],
            lambda: theta.loading(i),
            v1: s.v1,
            v2: s.v2,
            v3: s.v3,
            pi1: s.pi1,
            pi2: s.pi2,
            pi3: s.pi3,
        });
    }
    let overall = shares(theta.sigma2_eps, v2_bar, theta.sigma2_alpha);
    Ok(VpcTable {
        items,
        pi1_bar: overall.pi1,
        pi2_bar: overall.pi2,
        pi3_bar: overall.pi3,
        weights: w,
    })
}

/// Level split of `Var(w^T y)` for a weighted composite of the items of one
/// classroom.
pub fn composite_vpc(theta: &ParameterSet, weights: &[f64]) -> Result<LevelShares> {
    if weights.len() != theta.n_items() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} items",
            weights.len(),
            theta.n_items()
        )));
    }
    if weights.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroWeightVector);
    }
    let w = DVector::from_column_slice(weights);
    let lw = theta.lambda.transpose() * &w;
    let v2 = (lw.transpose() * &theta.psi2 * &lw)[0];
    let v3 = theta.sigma2_alpha * w.sum().powi(2);
    let v1 = theta.sigma2_eps * w.norm_squared();
    Ok(shares(v1, v2, v3))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorCorrelations {
    pub matrix: DMatrix<f64>,
    /// `identified[f][g]` is false for pairs never observed together.
    pub identified: Vec<Vec<bool>>,
}

impl FactorCorrelations {
    pub fn annotation(&self, f: usize, g: usize) -> Option<&'static str> {
        (!self.identified[f][g]).then_some(NOT_IDENTIFIED)
    }
}

pub fn factor_correlations(theta: &ParameterSet) -> Result<FactorCorrelations> {
    let nf = theta.n_factors();
    for f in 0..nf {
        let v = theta.psi2[(f, f)];
        if !(v > 0.0) {
            return Err(Error::DegenerateFactor { factor: f + 1, value: v });
        }
    }
    let matrix = DMatrix::from_fn(nf, nf, |f, g| {
        if f == g {
            1.0
        } else {
            theta.psi2[(f, g)] / (theta.psi2[(f, f)] * theta.psi2[(g, g)]).sqrt()
        }
    });
    Ok(FactorCorrelations {
        matrix,
        identified: theta.meta.identified.clone(),
    })
}

/// Largest entrywise change of `Lambda Psi Lambda^T` under the rescaling
/// `Lambda -> Lambda D^{-1}`, `Psi -> D Psi D`.
pub fn rescaling_invariance_check(theta: &ParameterSet, d: &[f64]) -> Result<f64> {
    if d.len() != theta.n_factors() || d.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidParameters("rescaling needs one positive entry per factor".into()));
    }
    let (lam, psi) = rescale(theta, d);
    let before = theta.implied_factor_covariance();
    let after = &lam * &psi * lam.transpose();
    Ok(crate::linalg::max_abs(&(after - before)))
}

/// Rescaled loadings and factor covariance.
pub fn rescale(theta: &ParameterSet, d: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let dm = DMatrix::from_diagonal(&DVector::from_column_slice(d));
    let dinv = DMatrix::from_diagonal(&DVector::from_iterator(d.len(), d.iter().map(|v| 1.0 / v)));
    (&theta.lambda * dinv, &dm * &theta.psi2 * &dm)
}
