use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::catalog::ItemCatalog;
use crate::error::{Error, Result};

/// Structural metadata that every parameter set carries along.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintMeta {
    /// Zero-based factor of each item.
    pub factor_of: Vec<usize>,
    /// Marker item of each factor, loading fixed at 1.
    pub anchors: Vec<usize>,
    /// Factor pairs whose covariance enters the likelihood.
    pub identified: Vec<Vec<bool>>,
}

impl ConstraintMeta {
    pub fn from_catalog(catalog: &ItemCatalog) -> Self {
        Self {
            factor_of: catalog.factor_assignment(),
            anchors: catalog.anchors().to_vec(),
            identified: catalog.identified_mask(),
        }
    }

    pub fn n_items(&self) -> usize {
        self.factor_of.len()
    }

    pub fn n_factors(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_anchor(&self, i: usize) -> bool {
        self.anchors[self.factor_of[i]] == i
    }

    /// Items whose loading is estimated, in item order.
    pub fn free_loading_items(&self) -> Vec<usize> {
        (0..self.n_items()).filter(|&i| !self.is_anchor(i)).collect()
    }
}

/// Measurement-model parameters: item intercepts, loadings, classroom factor
/// covariance, center intercept variance and residual variance.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub beta: DVector<f64>,
    pub lambda: DMatrix<f64>,
    pub psi2: DMatrix<f64>,
    pub sigma2_alpha: f64,
    pub sigma2_eps: f64,
    pub meta: ConstraintMeta,
}

/// Starting values for the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StartValues {
    pub loading: f64,
    pub psi_diag: f64,
    pub sigma2_alpha: f64,
    pub sigma2_eps: f64,
}

impl Default for StartValues {
    fn default() -> Self {
        Self {
            loading: 1.0,
            psi_diag: 0.5,
            sigma2_alpha: 0.1,
            sigma2_eps: 0.5,
        }
    }
}

impl ParameterSet {
    /// Simple-structure parameter set built from per-item loadings on the
    /// catalog's designated factors. Anchor entries of `loadings` are ignored.
    pub fn from_loadings(
        meta: ConstraintMeta,
        beta: DVector<f64>,
        loadings: &[f64],
        psi2: DMatrix<f64>,
        sigma2_alpha: f64,
        sigma2_eps: f64,
    ) -> Result<Self> {
        let ni = meta.n_items();
        let nf = meta.n_factors();
        if loadings.len() != ni || beta.len() != ni {
            return Err(Error::DimensionMismatch(format!(
                "expected {ni} items, got {} loadings and {} intercepts",
                loadings.len(),
                beta.len()
            )));
        }
        let mut lambda = DMatrix::zeros(ni, nf);
        for i in 0..ni {
            let f = meta.factor_of[i];
            lambda[(i, f)] = if meta.is_anchor(i) { 1.0 } else { loadings[i] };
        }
        let p = Self {
            beta,
            lambda,
            psi2,
            sigma2_alpha,
            sigma2_eps,
            meta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn starting(catalog: &ItemCatalog, start: &StartValues) -> Self {
        let meta = ConstraintMeta::from_catalog(catalog);
        let ni = meta.n_items();
        let nf = meta.n_factors();
        Self::from_loadings(
            meta,
            DVector::zeros(ni),
            &vec![start.loading; ni],
            DMatrix::identity(nf, nf) * start.psi_diag,
            start.sigma2_alpha,
            start.sigma2_eps,
        )
        .expect("starting values are valid")
    }

    pub fn n_items(&self) -> usize {
        self.meta.n_items()
    }

    pub fn n_factors(&self) -> usize {
        self.meta.n_factors()
    }

    /// Loading of item `i` on its designated factor.
    pub fn loading(&self, i: usize) -> f64 {
        self.lambda[(i, self.meta.factor_of[i])]
    }

    pub fn validate(&self) -> Result<()> {
        self.check_shape()?;
        let ni = self.n_items();
        let nf = self.n_factors();
        for i in 0..ni {
            for f in 0..nf {
                if f != self.meta.factor_of[i] && self.lambda[(i, f)] != 0.0 {
                    return Err(Error::InvalidParameters(format!(
                        "cross-loading of item {i} on factor {f} must be zero"
                    )));
                }
            }
        }
        for (f, &a) in self.meta.anchors.iter().enumerate() {
            if self.lambda[(a, f)] != 1.0 {
                return Err(Error::InvalidParameters(format!(
                    "anchor loading of factor {f} must be 1"
                )));
            }
        }
        self.check_variances()
    }

    /// Shape and variance checks without the anchor/zero pattern, for
    /// reparameterized (anchor-released) models.
    pub fn validate_unconstrained(&self) -> Result<()> {
        self.check_shape()?;
        self.check_variances()
    }

    fn check_shape(&self) -> Result<()> {
        let ni = self.n_items();
        let nf = self.n_factors();
        if self.beta.len() != ni
            || self.lambda.shape() != (ni, nf)
            || self.psi2.shape() != (nf, nf)
            || self.meta.identified.len() != nf
        {
            return Err(Error::DimensionMismatch(
                "parameter blocks do not match the constraint metadata".into(),
            ));
        }
        Ok(())
    }

    fn check_variances(&self) -> Result<()> {
        let nf = self.n_factors();
        for f in 0..nf {
            for g in 0..f {
                let (a, b) = (self.psi2[(f, g)], self.psi2[(g, f)]);
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::InvalidParameters("psi2 is not symmetric".into()));
                }
            }
        }
        if self.psi2.clone().cholesky().is_none() {
            return Err(Error::InvalidParameters(
                "psi2 is not positive definite".into(),
            ));
        }
        if !(self.sigma2_eps > 0.0) || !self.sigma2_eps.is_finite() {
            return Err(Error::InvalidParameters("sigma2_eps must be positive".into()));
        }
        if !(self.sigma2_alpha >= 0.0) || !self.sigma2_alpha.is_finite() {
            return Err(Error::InvalidParameters(
                "sigma2_alpha must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Model-implied classroom-level covariance of the full item vector,
    /// Lambda Psi Lambda^T.
    pub fn implied_factor_covariance(&self) -> DMatrix<f64> {
        &self.lambda * &self.psi2 * self.lambda.transpose()
    }
}
