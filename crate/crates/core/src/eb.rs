//! Empirical-Bayes prediction of classroom factors and center intercepts.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::likelihood::{dense_center_covariance, FittedModel};
use crate::linalg;
use crate::model::{AgeGroup, CenterBlock, DesignBundle, ParameterSet};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassroomScore {
    pub class_id: String,
    pub center_id: String,
    pub group: AgeGroup,
    pub eta_eb: DVector<f64>,
    pub post_cov: DMatrix<f64>,
    /// Factor has at least one observed indicator in this classroom.
    pub directly_measured: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenterScore {
    pub center_id: String,
    pub alpha_eb: f64,
    pub alpha_post_var: f64,
}

/// Scores ordered by center id, then class id.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorScoreSet {
    pub classrooms: Vec<ClassroomScore>,
    pub centers: Vec<CenterScore>,
}

impl FactorScoreSet {
    /// `(class_id, center_id, score)` of every classroom where factor `f` is
    /// directly measured. Model-based imputations are skipped unless
    /// `allow_indirect` is set.
    pub fn dose(&self, f: usize, allow_indirect: bool) -> Vec<(String, String, f64)> {
        self.classrooms
            .iter()
            .filter(|c| allow_indirect || c.directly_measured[f])
            .map(|c| (c.class_id.clone(), c.center_id.clone(), c.eta_eb[f]))
            .collect()
    }

    pub fn classroom(&self, class_id: &str) -> Option<&ClassroomScore> {
        self.classrooms.iter().find(|c| c.class_id == class_id)
    }
}

fn check(theta: &ParameterSet, bundle: &DesignBundle) -> Result<()> {
    if bundle.n_items != theta.n_items() || bundle.n_factors != theta.n_factors() {
        return Err(Error::DimensionMismatch(format!(
            "design has {} items / {} factors, model has {} / {}",
            bundle.n_items,
            bundle.n_factors,
            theta.n_items(),
            theta.n_factors()
        )));
    }
    Ok(())
}

fn measured_mask(theta: &ParameterSet, items: &[usize]) -> Vec<bool> {
    let mut mask = vec![false; theta.n_factors()];
    for &i in items {
        for (f, m) in mask.iter_mut().enumerate() {
            if theta.lambda[(i, f)] != 0.0 {
                *m = true;
            }
        }
    }
    mask
}

/// `Z G` for one center: row r holds `Psi lambda_i` in its classroom block and
/// `sigma2_alpha` in the last column.
fn zg_matrix(theta: &ParameterSet, center: &CenterBlock) -> DMatrix<f64> {
    let nf = theta.n_factors();
    let m = nf * center.classrooms.len() + 1;
    let pl = &theta.psi2 * theta.lambda.transpose();
    let mut zg = DMatrix::zeros(center.n_obs(), m);
    let mut r = 0;
    for (j, room) in center.classrooms.iter().enumerate() {
        for &i in &room.items {
            for f in 0..nf {
                zg[(r, j * nf + f)] = pl[(f, i)];
            }
            zg[(r, m - 1)] = theta.sigma2_alpha;
            r += 1;
        }
    }
    zg
}

fn residual(theta: &ParameterSet, center: &CenterBlock) -> DVector<f64> {
    DVector::from_iterator(
        center.n_obs(),
        center
            .classrooms
            .iter()
            .flat_map(|room| room.items.iter().zip(&room.values).map(|(&i, &y)| y - theta.beta[i])),
    )
}

fn predict_center(theta: &ParameterSet, center: &CenterBlock) -> Result<(Vec<ClassroomScore>, CenterScore)> {
    let nf = theta.n_factors();
    let m = nf * center.classrooms.len() + 1;
    let chol = linalg::cholesky(dense_center_covariance(theta, center)).ok_or_else(|| {
        Error::SingularCovariance {
            center_id: center.center_id.clone(),
        }
    })?;
    let zg = zg_matrix(theta, center);
    let r = residual(theta, center);
    let mean = zg.tr_mul(&chol.solve(&r));
    let vinv_zg = chol.solve(&zg);
    // posterior covariance G - G Z^T V^{-1} Z G, assembled block by block
    let cov_full = zg.tr_mul(&vinv_zg);
    let mut rooms = Vec::with_capacity(center.classrooms.len());
    for (j, room) in center.classrooms.iter().enumerate() {
        let eta = mean.rows(j * nf, nf).into_owned();
        let mut cov = &theta.psi2 - cov_full.view((j * nf, j * nf), (nf, nf));
        linalg::symmetrize(&mut cov);
        rooms.push(ClassroomScore {
            class_id: room.class_id.clone(),
            center_id: center.center_id.clone(),
            group: room.group,
            eta_eb: eta,
            post_cov: cov,
            directly_measured: measured_mask(theta, &room.items),
        });
    }
    let alpha = CenterScore {
        center_id: center.center_id.clone(),
        alpha_eb: mean[m - 1],
        alpha_post_var: (theta.sigma2_alpha - cov_full[(m - 1, m - 1)]).max(0.0),
    };
    Ok((rooms, alpha))
}

/// Posterior means and covariances of every classroom factor vector and center
/// intercept, conditional on the fitted parameters.
pub fn eb_predict(model: &FittedModel, bundle: &DesignBundle) -> Result<FactorScoreSet> {
    let theta = &model.theta_hat;
    check(theta, bundle)?;
    let parts: Vec<_> = bundle
        .centers
        .par_iter()
        .map(|c| predict_center(theta, c))
        .collect::<Result<_>>()?;
    let mut out = FactorScoreSet {
        classrooms: Vec::new(),
        centers: Vec::new(),
    };
    for (rooms, center) in parts {
        out.classrooms.extend(rooms);
        out.centers.push(center);
    }
    Ok(out)
}

/// Regression factor-score matrix of one classroom,
/// `Psi Lambda_j^T (Lambda_j Psi Lambda_j^T + sigma2_eps I)^{-1}`.
pub fn factor_score_matrix(theta: &ParameterSet, items: &[usize]) -> Result<DMatrix<f64>> {
    let nf = theta.n_factors();
    let lam = DMatrix::from_fn(items.len(), nf, |r, f| theta.lambda[(items[r], f)]);
    let mut s = &lam * &theta.psi2 * lam.transpose();
    for d in 0..items.len() {
        s[(d, d)] += theta.sigma2_eps;
    }
    let chol = linalg::cholesky(s).ok_or_else(|| Error::SingularCovariance {
        center_id: "classroom block".into(),
    })?;
    Ok(chol.solve(&(lam * &theta.psi2)).transpose())
}

/// Recomputes classroom scores by applying the factor-score matrix to item
/// residuals net of the predicted center intercept.
pub fn eb_residualized(model: &FittedModel, bundle: &DesignBundle, scores: &FactorScoreSet) -> Result<FactorScoreSet> {
    let theta = &model.theta_hat;
    check(theta, bundle)?;
    let alpha: std::collections::HashMap<&str, f64> = scores
        .centers
        .iter()
        .map(|c| (c.center_id.as_str(), c.alpha_eb))
        .collect();
    let mut out = scores.clone();
    let mut k = 0;
    for center in &bundle.centers {
        let a = *alpha
            .get(center.center_id.as_str())
            .ok_or_else(|| Error::DimensionMismatch(format!("no score for center {}", center.center_id)))?;
        for room in &center.classrooms {
            let b = factor_score_matrix(theta, &room.items)?;
            let r = DVector::from_iterator(
                room.items.len(),
                room.items.iter().zip(&room.values).map(|(&i, &y)| y - theta.beta[i] - a),
            );
            let slot = &mut out.classrooms[k];
            if slot.class_id != room.class_id {
                return Err(Error::DimensionMismatch(format!(
                    "scores are not aligned with classroom {}",
                    room.class_id
                )));
            }
            slot.eta_eb = b * r;
            k += 1;
        }
    }
    Ok(out)
}

/// Ridge-type residual maker that removes the center intercept,
/// `I - 1 (1^T R^{-1} 1 + 1/sigma2_alpha)^{-1} 1^T R^{-1}` with
/// `R = sigma2_eps I`.
pub fn partial_out_operator(theta: &ParameterSet, center: &CenterBlock) -> DMatrix<f64> {
    let n = center.n_obs();
    let c = if theta.sigma2_alpha > 0.0 {
        theta.sigma2_alpha / (n as f64 * theta.sigma2_alpha + theta.sigma2_eps)
    } else {
        0.0
    };
    DMatrix::identity(n, n) - DMatrix::from_element(n, n, c)
}

/// Classroom factor vectors of one center from the mixed-model equations with
/// the center intercept eliminated by the residual maker `m`; stacked
/// classroom by classroom.
pub fn eliminated_solve(theta: &ParameterSet, center: &CenterBlock, m: &DMatrix<f64>) -> Result<DVector<f64>> {
    let nf = theta.n_factors();
    let nj = center.classrooms.len();
    let n = center.n_obs();
    let mut z = DMatrix::zeros(n, nf * nj);
    let mut r = 0;
    for (j, room) in center.classrooms.iter().enumerate() {
        for &i in &room.items {
            for f in 0..nf {
                z[(r, j * nf + f)] = theta.lambda[(i, f)];
            }
            r += 1;
        }
    }
    let psi_inv = linalg::cholesky(theta.psi2.clone())
        .ok_or_else(|| Error::InvalidParameters("psi2 is not positive definite".into()))?
        .inverse();
    let s2 = theta.sigma2_eps;
    let mz = m * &z;
    let mut lhs = z.tr_mul(&mz) / s2;
    for j in 0..nj {
        let mut blk = lhs.view_mut((j * nf, j * nf), (nf, nf));
        blk += &psi_inv;
    }
    let rhs = z.tr_mul(&(m * residual(theta, center))) / s2;
    lhs.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::SingularCovariance {
            center_id: center.center_id.clone(),
        })
}
