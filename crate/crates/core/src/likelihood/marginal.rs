//! Marginal Gaussian log-likelihood of the three-level factor model.
//!
//! Each center contributes `log N(y_k; X_k beta, V_k)` with
//! `V_k = Z_k G_k Z_k^T + sigma2_eps I`. The primary route never forms
//! `V_k`: writing `G_k = H H^T` with `H = blockdiag(I (x) chol(Psi), sigma_alpha)`
//! and `U = Z_k H`, the determinant lemma and Woodbury identity reduce every
//! solve to the `q x q` matrix `K = sigma2_eps I + U^T U`, where
//! `q = F J_k + 1`. A dense route that factors `V_k` directly is kept for
//! cross-checking.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{self, Chol};
use crate::model::{CenterBlock, DesignBundle, ParameterSet};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Per-center factorization shared by the GLS, likelihood and gradient passes.
pub(crate) struct CenterWork {
    /// `U = Z H`, rows in the center's stacked order.
    pub u: DMatrix<f64>,
    pub chol_k: Chol,
    pub logdet_v: f64,
}

pub(crate) fn center_work(theta: &ParameterSet, psi_chol: &DMatrix<f64>, center: &CenterBlock) -> Option<CenterWork> {
    let nf = theta.n_factors();
    let j = center.classrooms.len();
    let q = nf * j + 1;
    let n = center.n_obs();
    let s_alpha = theta.sigma2_alpha.sqrt();
    let s2 = theta.sigma2_eps;

    // row of U for item i: lambda_i^T L in the classroom block, sigma_alpha last
    let ml = theta.lambda.clone() * psi_chol;
    let mut u = DMatrix::zeros(n, q);
    let mut r = 0;
    for (jj, room) in center.classrooms.iter().enumerate() {
        for &i in &room.items {
            for f in 0..nf {
                u[(r, jj * nf + f)] = ml[(i, f)];
            }
            u[(r, q - 1)] = s_alpha;
            r += 1;
        }
    }
    let mut k = u.tr_mul(&u);
    for d in 0..q {
        k[(d, d)] += s2;
    }
    let chol_k = linalg::cholesky(k)?;
    let logdet_v = (n as f64 - q as f64) * s2.ln() + linalg::chol_logdet(&chol_k);
    if !logdet_v.is_finite() {
        return None;
    }
    Some(CenterWork { u, chol_k, logdet_v })
}

fn psi_cholesky(theta: &ParameterSet) -> Result<DMatrix<f64>> {
    linalg::cholesky(theta.psi2.clone())
        .map(|c| c.l())
        .ok_or_else(|| Error::InvalidParameters("psi2 is not positive definite".into()))
}

pub(crate) fn all_center_work(theta: &ParameterSet, bundle: &DesignBundle) -> Result<Vec<CenterWork>> {
    let l = psi_cholesky(theta)?;
    bundle
        .centers
        .par_iter()
        .map(|c| {
            center_work(theta, &l, c).ok_or_else(|| Error::SingularCovariance {
                center_id: c.center_id.clone(),
            })
        })
        .collect()
}

fn stacked_residual(theta: &ParameterSet, center: &CenterBlock) -> DVector<f64> {
    let mut r = DVector::zeros(center.n_obs());
    let mut k = 0;
    for room in &center.classrooms {
        for (&i, &y) in room.items.iter().zip(&room.values) {
            r[k] = y - theta.beta[i];
            k += 1;
        }
    }
    r
}

/// Generalized least squares intercepts at fixed covariance parameters.
pub(crate) fn gls_beta_with(
    theta: &ParameterSet,
    bundle: &DesignBundle,
    work: &[CenterWork],
) -> Result<DVector<f64>> {
    let ni = theta.n_items();
    let s2 = theta.sigma2_eps;
    let parts: Vec<(DMatrix<f64>, DVector<f64>)> = bundle
        .centers
        .par_iter()
        .zip(work.par_iter())
        .map(|(center, w)| {
            let q = w.u.ncols();
            // U^T X (q x I), X^T X (diagonal counts), U^T y, X^T y
            let mut utx = DMatrix::zeros(q, ni);
            let mut xtx = DVector::<f64>::zeros(ni);
            let mut xty = DVector::zeros(ni);
            let mut uty = DVector::zeros(q);
            let mut r = 0;
            for room in &center.classrooms {
                for (&i, &y) in room.items.iter().zip(&room.values) {
                    for c in 0..q {
                        let urc = w.u[(r, c)];
                        utx[(c, i)] += urc;
                        uty[c] += urc * y;
                    }
                    xtx[i] += 1.0;
                    xty[i] += y;
                    r += 1;
                }
            }
            let kinv_utx = w.chol_k.solve(&utx);
            let mut a = -(utx.tr_mul(&kinv_utx));
            for i in 0..ni {
                a[(i, i)] += xtx[i];
            }
            let b = xty - kinv_utx.tr_mul(&uty);
            (a / s2, b / s2)
        })
        .collect();
    let mut a = DMatrix::zeros(ni, ni);
    let mut b = DVector::zeros(ni);
    for (pa, pb) in parts {
        a += pa;
        b += pb;
    }
    for (i, &c) in bundle.item_counts().iter().enumerate() {
        if c == 0 {
            return Err(Error::EmptyItem(format!("item index {i}")));
        }
    }
    linalg::symmetrize(&mut a);
    let chol = linalg::cholesky(a)
        .ok_or_else(|| Error::DimensionMismatch("GLS normal matrix is singular".into()))?;
    Ok(chol.solve(&b))
}

/// Per-center log-likelihood contribution and, optionally, its partial
/// derivatives with respect to beta, Lambda, Psi and the two variances.
pub(crate) struct CenterTerms {
    pub loglik: f64,
    pub grad: Option<RawGradient>,
}

/// Partial derivatives of the log-likelihood in the natural parameters.
#[derive(Clone)]
pub(crate) struct RawGradient {
    pub beta: DVector<f64>,
    pub lambda: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub sigma2_alpha: f64,
    pub sigma2_eps: f64,
}

impl RawGradient {
    fn zeros(ni: usize, nf: usize) -> Self {
        Self {
            beta: DVector::zeros(ni),
            lambda: DMatrix::zeros(ni, nf),
            psi: DMatrix::zeros(nf, nf),
            sigma2_alpha: 0.0,
            sigma2_eps: 0.0,
        }
    }

    fn add(&mut self, other: &RawGradient) {
        self.beta += &other.beta;
        self.lambda += &other.lambda;
        self.psi += &other.psi;
        self.sigma2_alpha += other.sigma2_alpha;
        self.sigma2_eps += other.sigma2_eps;
    }
}

pub(crate) fn center_terms(
    theta: &ParameterSet,
    center: &CenterBlock,
    w: &CenterWork,
    with_grad: bool,
) -> CenterTerms {
    let n = center.n_obs();
    let q = w.u.ncols();
    let nf = theta.n_factors();
    let ni = theta.n_items();
    let s2 = theta.sigma2_eps;
    let r = stacked_residual(theta, center);

    let s = w.u.tr_mul(&r);
    let kappa = w.chol_k.solve(&s);
    let quad = (r.dot(&r) - s.dot(&kappa)) / s2;
    let loglik = -0.5 * (n as f64 * LN_2PI + w.logdet_v + quad);
    if !with_grad {
        return CenterTerms { loglik, grad: None };
    }

    // a = V^{-1} r
    let a = (&r - &w.u * &kappa) / s2;
    let kinv = w.chol_k.inverse();
    let mut g = RawGradient::zeros(ni, nf);

    // residual variance: 0.5 (a^T a - tr V^{-1}), tr V^{-1} = (n - q + s2 tr K^{-1}) / s2
    let tr_vinv = (n as f64 - q as f64 + s2 * kinv.trace()) / s2;
    g.sigma2_eps = 0.5 * (a.dot(&a) - tr_vinv);

    // center variance: 0.5 ((1^T a)^2 - 1^T V^{-1} 1)
    let u1 = w.u.row_sum().transpose();
    let one_vinv_one = (n as f64 - u1.dot(&w.chol_k.solve(&u1))) / s2;
    let sum_a = a.sum();
    g.sigma2_alpha = 0.5 * (sum_a * sum_a - one_vinv_one);

    // Z G, row r: (Psi lambda_i) in its classroom block, sigma2_alpha last
    let psi_lambda_t = &theta.psi2 * theta.lambda.transpose(); // F x I
    let mut zg = DMatrix::zeros(n, q);
    let mut row = 0;
    for (jj, room) in center.classrooms.iter().enumerate() {
        for &i in &room.items {
            for f in 0..nf {
                zg[(row, jj * nf + f)] = psi_lambda_t[(f, i)];
            }
            zg[(row, q - 1)] = theta.sigma2_alpha;
            row += 1;
        }
    }
    // P = K^{-1} U^T Z G
    let p = &kinv * w.u.tr_mul(&zg);
    let atzg = zg.tr_mul(&a);

    let mut row = 0;
    for (jj, room) in center.classrooms.iter().enumerate() {
        let nj = room.items.len();
        let rows = row..row + nj;
        let lam_j = DMatrix::from_fn(nj, nf, |rr, f| theta.lambda[(room.items[rr], f)]);
        let a_j = a.rows(rows.start, nj);
        let u_j = w.u.rows(rows.start, nj);

        // Psi: 0.5 sum_j Lambda_j^T (a_j a_j^T - (V^{-1})_jj) Lambda_j
        let gj = lam_j.tr_mul(&a_j);
        let lu = lam_j.tr_mul(&u_j);
        let vinv_block = (lam_j.tr_mul(&lam_j) - &lu * &kinv * lu.transpose()) / s2;
        g.psi += (&gj * gj.transpose() - vinv_block) * 0.5;

        // Lambda: sum over rows of (W Z G)_{r, (j, f)}
        let u_p = u_j * p.columns(jj * nf, nf);
        for (rr, &i) in room.items.iter().enumerate() {
            g.beta[i] += a_j[rr];
            for f in 0..nf {
                let vinv_zg = (zg[(row + rr, jj * nf + f)] - u_p[(rr, f)]) / s2;
                g.lambda[(i, f)] += a_j[rr] * atzg[jj * nf + f] - vinv_zg;
            }
        }
        row += nj;
    }
    CenterTerms {
        loglik,
        grad: Some(g),
    }
}

pub(crate) fn sum_terms(
    theta: &ParameterSet,
    bundle: &DesignBundle,
    work: &[CenterWork],
    with_grad: bool,
) -> (f64, Option<RawGradient>) {
    let terms: Vec<CenterTerms> = bundle
        .centers
        .par_iter()
        .zip(work.par_iter())
        .map(|(c, w)| center_terms(theta, c, w, with_grad))
        .collect();
    // fixed reduction order keeps results independent of the thread count
    let mut ll = 0.0;
    let mut grad = with_grad.then(|| RawGradient::zeros(theta.n_items(), theta.n_factors()));
    for t in &terms {
        ll += t.loglik;
        if let (Some(acc), Some(g)) = (grad.as_mut(), t.grad.as_ref()) {
            acc.add(g);
        }
    }
    (ll, grad)
}

/// Marginal log-likelihood at `theta` (intercepts taken as given).
pub fn marginal_loglik(theta: &ParameterSet, bundle: &DesignBundle) -> Result<f64> {
    check_dims(theta, bundle)?;
    let work = all_center_work(theta, bundle)?;
    Ok(sum_terms(theta, bundle, &work, false).0)
}

/// Same quantity computed by factoring each dense `V_k`.
pub fn marginal_loglik_dense(theta: &ParameterSet, bundle: &DesignBundle) -> Result<f64> {
    check_dims(theta, bundle)?;
    let mut total = 0.0;
    for center in &bundle.centers {
        let v = dense_center_covariance(theta, center);
        let chol = linalg::cholesky(v).ok_or_else(|| Error::SingularCovariance {
            center_id: center.center_id.clone(),
        })?;
        let r = stacked_residual(theta, center);
        let sol = chol.solve(&r);
        total += -0.5 * (r.len() as f64 * LN_2PI + linalg::chol_logdet(&chol) + r.dot(&sol));
    }
    Ok(total)
}

/// `V_k = blockdiag_j(Lambda_j Psi Lambda_j^T) + sigma2_alpha 1 1^T + sigma2_eps I`.
pub fn dense_center_covariance(theta: &ParameterSet, center: &CenterBlock) -> DMatrix<f64> {
    let n = center.n_obs();
    let cov = theta.implied_factor_covariance();
    let mut v = DMatrix::from_element(n, n, theta.sigma2_alpha);
    let mut start = 0;
    for room in &center.classrooms {
        for (a, &i) in room.items.iter().enumerate() {
            for (b, &k) in room.items.iter().enumerate() {
                v[(start + a, start + b)] += cov[(i, k)];
            }
        }
        start += room.items.len();
    }
    for d in 0..n {
        v[(d, d)] += theta.sigma2_eps;
    }
    v
}

/// Intercepts that maximize the likelihood at the covariance parameters of
/// `theta`.
pub fn gls_beta(theta: &ParameterSet, bundle: &DesignBundle) -> Result<DVector<f64>> {
    check_dims(theta, bundle)?;
    let work = all_center_work(theta, bundle)?;
    gls_beta_with(theta, bundle, &work)
}

pub(crate) fn check_dims(theta: &ParameterSet, bundle: &DesignBundle) -> Result<()> {
    if bundle.n_items != theta.n_items() || bundle.n_factors != theta.n_factors() {
        return Err(Error::DimensionMismatch(format!(
            "design has {} items / {} factors, parameters have {} / {}",
            bundle.n_items,
            bundle.n_factors,
            theta.n_items(),
            theta.n_factors()
        )));
    }
    if bundle.centers.is_empty() {
        return Err(Error::DimensionMismatch("design has no centers".into()));
    }
    Ok(())
}

/// Condition numbers of the dense `V_k` across centers, `(min, max)`.
pub fn covariance_condition_range(theta: &ParameterSet, bundle: &DesignBundle) -> (f64, f64) {
    let conds: Vec<f64> = bundle
        .centers
        .par_iter()
        .map(|c| {
            let eig = dense_center_covariance(theta, c).symmetric_eigen().eigenvalues;
            let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
            max / min
        })
        .collect();
    conds
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &c| (lo.min(c), hi.max(c)))
}
