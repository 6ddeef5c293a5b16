//! Stage-2 dose-response estimation: center-mean centering, weighted linear
//! fits with sandwich standard errors and weighted penalized-spline fits with
//! REML smoothing selection.

use std::collections::BTreeMap;
use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::erfc;

use crate::balance::{ebct_solve_with, effective_sample_size, gps_glm_weights, BalanceProblem, EbctOptions, Method};
use crate::eb::FactorScoreSet;
use crate::error::{Error, Result};
use crate::linalg;
use crate::table::ClassroomTable;

#[derive(Debug, Clone, PartialEq)]
pub struct CenteredOutcome {
    pub class_id: String,
    pub center_id: String,
    pub z: f64,
    /// Number of children behind the classroom mean, when known.
    pub n_children: Option<usize>,
}

fn center_means(values: &[f64], centers: &[String]) -> Vec<f64> {
    let mut acc: HashMap<&str, (f64, usize)> = HashMap::new();
    for (v, c) in values.iter().zip(centers) {
        let e = acc.entry(c.as_str()).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    values
        .iter()
        .zip(centers)
        .map(|(v, c)| {
            let (s, n) = acc[c.as_str()];
            v - s / n as f64
        })
        .collect()
}

/// Subtracts the center mean from each classroom outcome. Classrooms alone in
/// their center get `z = 0`.
pub fn center_mean_center(class_ids: &[String], center_ids: &[String], y: &[f64]) -> Vec<CenteredOutcome> {
    let z = center_means(y, center_ids);
    class_ids
        .iter()
        .zip(center_ids)
        .zip(z)
        .map(|((id, c), z)| CenteredOutcome {
            class_id: id.clone(),
            center_id: c.clone(),
            z,
            n_children: None,
        })
        .collect()
}

pub fn demean_dose(dose: &[f64], center_ids: &[String]) -> Vec<f64> {
    center_means(dose, center_ids)
}

/// One weighted dose-response problem. Weights need not be normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct DoseData {
    pub z: Vec<f64>,
    pub dose: Vec<f64>,
    pub weights: Vec<f64>,
    pub center_ids: Vec<String>,
}

impl DoseData {
    pub fn uniform(z: Vec<f64>, dose: Vec<f64>) -> Self {
        let n = z.len();
        Self {
            z,
            dose,
            weights: vec![1.0; n],
            center_ids: (0..n).map(|i| i.to_string()).collect(),
        }
    }

    fn check(&self) -> Result<()> {
        let n = self.z.len();
        if self.dose.len() != n || self.weights.len() != n || self.center_ids.len() != n {
            return Err(Error::DimensionMismatch("outcome, dose, weights and centers differ in length".into()));
        }
        if self.weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidBalanceProblem("weights must be positive".into()));
        }
        if self.z.iter().chain(&self.dose).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameters("non-finite outcome or dose".into()));
        }
        Ok(())
    }

    /// Weights rescaled to mean one.
    fn unit_weights(&self) -> Vec<f64> {
        let s: f64 = self.weights.iter().sum();
        let n = self.weights.len() as f64;
        self.weights.iter().map(|w| w * n / s).collect()
    }

    fn grid(&self, size: usize) -> Vec<f64> {
        let lo = self.dose.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.dose.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if size <= 1 {
            return vec![0.5 * (lo + hi)];
        }
        (0..size).map(|g| lo + (hi - lo) * g as f64 / (size - 1) as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitKind {
    Linear,
    Gam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub d: f64,
    pub fit: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub gamma0: f64,
    pub gamma1: f64,
    pub se_gamma1: f64,
    pub p_value: f64,
    /// Sandwich covariance of `(gamma0, gamma1)`.
    pub cov: DMatrix<f64>,
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GamBasis {
    pub dim: usize,
    /// Full clamped knot vector of the cubic B-splines.
    pub knots: Vec<f64>,
    /// Maps B-spline coefficients to the `dim - 1` constrained smooth
    /// coefficients: first the unpenalized linear direction, then the
    /// penalized directions scaled to unit penalty.
    pub transform: DMatrix<f64>,
}

impl GamBasis {
    pub fn description(&self) -> String {
        format!("cubic B-spline, k={}, knots at weighted dose quantiles", self.dim)
    }

    /// Smooth-term design row at `x` (intercept excluded).
    pub fn row(&self, x: f64) -> DVector<f64> {
        let b = bspline(&self.knots, 4, x, 0);
        self.transform.transpose() * DVector::from_vec(b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GamFit {
    pub basis: GamBasis,
    /// Intercept followed by the smooth coefficients.
    pub coefficients: DVector<f64>,
    pub lambda: f64,
    /// Effective degrees of freedom of the smooth term.
    pub edf: f64,
    /// Diagonal of `(X^T W X + S)^{-1} X^T W X`, one entry per coefficient.
    pub edf_per_coef: Vec<f64>,
    pub p_value: f64,
    /// Bayesian covariance `phi (X^T W X + S)^{-1}`.
    pub cov: DMatrix<f64>,
    pub scale: f64,
    /// Smoothing parameter search ended on a bound.
    pub lambda_at_bound: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoseResponseFit {
    pub kind: FitKind,
    pub linear: Option<LinearFit>,
    pub gam: Option<GamFit>,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WlsOptions {
    /// Cluster the sandwich by center instead of HC1.
    pub cluster: bool,
    pub grid_size: usize,
}

impl Default for WlsOptions {
    fn default() -> Self {
        Self {
            cluster: false,
            grid_size: 100,
        }
    }
}

const Z_CRIT: f64 = 1.959963984540054;

fn normal_two_sided(t: f64) -> f64 {
    erfc(t.abs() / std::f64::consts::SQRT_2)
}

fn weighted_mean(x: &[f64], w: &[f64]) -> f64 {
    x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / w.iter().sum::<f64>()
}

pub fn wls_fit(data: &DoseData, opts: &WlsOptions) -> Result<DoseResponseFit> {
    data.check()?;
    let n = data.z.len();
    let w = data.unit_weights();
    let dbar = weighted_mean(&data.dose, &w);
    let sdd: f64 = data.dose.iter().zip(&w).map(|(d, w)| w * (d - dbar).powi(2)).sum();
    let scale = data.dose.iter().map(|d| d.abs()).fold(0.0, f64::max).max(1.0);
    if n < 3 || !(sdd > 1e-24 * n as f64 * scale * scale) {
        return Err(Error::DegenerateDose);
    }
    let zbar = weighted_mean(&data.z, &w);
    let sdz: f64 = (0..n).map(|i| w[i] * (data.dose[i] - dbar) * (data.z[i] - zbar)).sum();
    let gamma1 = sdz / sdd;
    let gamma0 = zbar - gamma1 * dbar;
    let resid: Vec<f64> = (0..n).map(|i| data.z[i] - gamma0 - gamma1 * data.dose[i]).collect();

    let mut bread = DMatrix::<f64>::zeros(2, 2);
    for i in 0..n {
        let x = [1.0, data.dose[i]];
        for r in 0..2 {
            for c in 0..2 {
                bread[(r, c)] += w[i] * x[r] * x[c];
            }
        }
    }
    let bread_inv = bread.try_inverse().ok_or(Error::DegenerateDose)?;
    let mut meat = DMatrix::<f64>::zeros(2, 2);
    let factor = if opts.cluster {
        let mut groups: BTreeMap<&str, [f64; 2]> = BTreeMap::new();
        for i in 0..n {
            let g = groups.entry(data.center_ids[i].as_str()).or_insert([0.0; 2]);
            let s = w[i] * resid[i];
            g[0] += s;
            g[1] += s * data.dose[i];
        }
        for s in groups.values() {
            for r in 0..2 {
                for c in 0..2 {
                    meat[(r, c)] += s[r] * s[c];
                }
            }
        }
        let g = groups.len() as f64;
        if g < 2.0 {
            return Err(Error::DegenerateDose);
        }
        g / (g - 1.0) * (n as f64 - 1.0) / (n as f64 - 2.0)
    } else {
        for i in 0..n {
            let x = [1.0, data.dose[i]];
            let s = (w[i] * resid[i]).powi(2);
            for r in 0..2 {
                for c in 0..2 {
                    meat[(r, c)] += s * x[r] * x[c];
                }
            }
        }
        n as f64 / (n as f64 - 2.0)
    };
    let mut cov = &bread_inv * meat * &bread_inv * factor;
    linalg::symmetrize(&mut cov);
    let se = cov[(1, 1)].max(0.0).sqrt();
    let p_value = if se > 0.0 {
        normal_two_sided(gamma1 / se)
    } else if gamma1 == 0.0 {
        1.0
    } else {
        0.0
    };
    let curve = data
        .grid(opts.grid_size)
        .into_iter()
        .map(|d| {
            let fit = gamma0 + gamma1 * d;
            let v = cov[(0, 0)] + 2.0 * d * cov[(0, 1)] + d * d * cov[(1, 1)];
            let h = Z_CRIT * v.max(0.0).sqrt();
            CurvePoint {
                d,
                fit,
                lower: fit - h,
                upper: fit + h,
            }
        })
        .collect();
    Ok(DoseResponseFit {
        kind: FitKind::Linear,
        linear: Some(LinearFit {
            gamma0,
            gamma1,
            se_gamma1: se,
            p_value,
            cov,
            residuals: resid,
        }),
        gam: None,
        curve,
    })
}

/// Values (or derivatives of order `nd`) of all B-splines of the given
/// order on the knot vector `t` at `x`. Right-continuous except at the last
/// knot, which belongs to the final nonempty interval.
fn bspline(t: &[f64], order: usize, x: f64, nd: usize) -> Vec<f64> {
    let m = t.len();
    if nd > 0 {
        let lower = bspline(t, order - 1, x, nd - 1);
        let k = (order - 1) as f64;
        return (0..m - order)
            .map(|i| {
                let a = t[i + order - 1] - t[i];
                let b = t[i + order] - t[i + 1];
                let left = if a > 0.0 { lower[i] / a } else { 0.0 };
                let right = if b > 0.0 { lower[i + 1] / b } else { 0.0 };
                k * (left - right)
            })
            .collect();
    }
    let mut b = vec![0.0; m - 1];
    let last = t[m - 1];
    let x = x.clamp(t[0], last);
    if x >= last {
        if let Some(i) = (0..m - 1).rev().find(|&i| t[i] < t[i + 1]) {
            b[i] = 1.0;
        }
    } else if let Some(i) = (0..m - 1).find(|&i| t[i] <= x && x < t[i + 1]) {
        b[i] = 1.0;
    }
    for p in 2..=order {
        let mut next = vec![0.0; m - p];
        for i in 0..m - p {
            let a = t[i + p - 1] - t[i];
            let c = t[i + p] - t[i + 1];
            if a > 0.0 {
                next[i] += (x - t[i]) / a * b[i];
            }
            if c > 0.0 {
                next[i] += (t[i + p] - x) / c * b[i + 1];
            }
        }
        b = next;
    }
    b
}

/// `int B''(x) B''(x)^T dx` over the knot range.
fn second_derivative_penalty(t: &[f64], dim: usize) -> DMatrix<f64> {
    let nodes = [-(0.6f64).sqrt(), 0.0, (0.6f64).sqrt()];
    let gw = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
    let mut s = DMatrix::zeros(dim, dim);
    for j in 0..t.len() - 1 {
        let (a, b) = (t[j], t[j + 1]);
        if b <= a {
            continue;
        }
        let h = 0.5 * (b - a);
        for (u, g) in nodes.iter().zip(gw) {
            // stay strictly inside so the active interval is unambiguous
            let d2 = DVector::from_vec(bspline(t, 4, a + h * (1.0 + u), 2));
            s += &d2 * d2.transpose() * (g * h);
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GamOptions {
    pub basis_dim: usize,
    pub grid_size: usize,
    /// Fixed smoothing parameter; `f64::INFINITY` keeps only the null space.
    /// `None` selects it by REML.
    #[serde(skip)]
    pub lambda: Option<f64>,
    /// Half-width of the REML search in log units around the data scale.
    pub log_lambda_span: f64,
}

impl Default for GamOptions {
    fn default() -> Self {
        Self {
            basis_dim: 10,
            grid_size: 100,
            lambda: None,
            log_lambda_span: 18.0,
        }
    }
}

/// Basis, design and cross products of a weighted smoothing problem.
struct Smoother {
    basis: GamBasis,
    /// `[1, null, range...]`.
    x: DMatrix<f64>,
    z: Vec<f64>,
    w: Vec<f64>,
    xtwx: DMatrix<f64>,
    xtwz: DVector<f64>,
    tss: f64,
}

impl Smoother {
    fn new(data: &DoseData, dim: usize) -> Result<Self> {
        data.check()?;
        if dim < 4 {
            return Err(Error::Config("spline basis dimension must be at least 4".into()));
        }
        let mut distinct = data.dose.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        if distinct.len() < dim + 2 {
            return Err(Error::TooFewDistinctDoses {
                distinct: distinct.len(),
                required: dim + 2,
            });
        }
        let w = data.unit_weights();
        let n = data.z.len();
        let (lo, hi) = (distinct[0], distinct[distinct.len() - 1]);
        let n_inner = dim - 4;
        let mut inner: Vec<f64> = (1..=n_inner)
            .map(|j| linalg::weighted_quantile(&data.dose, &w, j as f64 / (n_inner + 1) as f64))
            .collect();
        let ok = inner.windows(2).all(|p| p[0] < p[1]) && inner.iter().all(|&k| k > lo && k < hi);
        if !ok {
            inner = (1..=n_inner)
                .map(|j| lo + (hi - lo) * j as f64 / (n_inner + 1) as f64)
                .collect();
        }
        let mut knots = vec![lo; 4];
        knots.extend(inner);
        knots.extend([hi; 4]);

        let mut b = DMatrix::zeros(n, dim);
        for i in 0..n {
            let row = bspline(&knots, 4, data.dose[i], 0);
            for (c, v) in row.into_iter().enumerate() {
                b[(i, c)] = v;
            }
        }
        // weighted sum-to-zero constraint on the smooth
        let wv = DVector::from_vec(w.clone());
        let c = b.transpose() * &wv;
        let c = &c / c.norm();
        let proj = DMatrix::identity(dim, dim) - &c * c.transpose();
        let eig = proj.symmetric_eigen();
        let mut keep: Vec<usize> = (0..dim).filter(|&j| eig.eigenvalues[j] > 0.5).collect();
        keep.sort();
        let z = DMatrix::from_fn(dim, keep.len(), |r, j| eig.eigenvectors[(r, keep[j])]);

        let s = second_derivative_penalty(&knots, dim);
        let mut st = z.transpose() * &s * &z;
        linalg::symmetrize(&mut st);
        let se = st.symmetric_eigen();
        let mut order: Vec<usize> = (0..dim - 1).collect();
        order.sort_by(|&a, &b| se.eigenvalues[a].total_cmp(&se.eigenvalues[b]));
        // the constrained penalty has a one-dimensional (linear) null space
        let mut u = DMatrix::zeros(dim - 1, dim - 1);
        for (j, &o) in order.iter().enumerate() {
            let mut col = se.eigenvectors.column(o).into_owned();
            if j > 0 {
                col /= se.eigenvalues[o].sqrt();
            } else {
                let bn = &b * &z * &col;
                let rms = (bn.iter().zip(&w).map(|(v, w)| w * v * v).sum::<f64>() / n as f64).sqrt();
                col /= rms;
                // fix the sign so the linear direction increases with dose
                if bn[data.dose.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0]
                    < bn[data.dose.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0]
                {
                    col = -col;
                }
            }
            u.set_column(j, &col);
        }
        let transform = z * u;
        let smooth = &b * &transform;
        let mut x = DMatrix::from_element(n, dim, 1.0);
        x.view_mut((0, 1), (n, dim - 1)).copy_from(&smooth);
        let mut xw = x.clone();
        for i in 0..n {
            xw.row_mut(i).scale_mut(w[i]);
        }
        let xtwx = x.transpose() * &xw;
        let zv = DVector::from_column_slice(&data.z);
        let xtwz = xw.transpose() * &zv;
        let zbar = weighted_mean(&data.z, &w);
        let tss: f64 = data.z.iter().zip(&w).map(|(z, w)| w * (z - zbar).powi(2)).sum();
        Ok(Self {
            basis: GamBasis { dim, knots, transform },
            x,
            z: data.z.clone(),
            w,
            xtwx,
            xtwz,
            tss,
        })
    }

    fn n_range(&self) -> usize {
        self.basis.dim - 2
    }

    fn lambda_scale(&self) -> f64 {
        let r = self.n_range();
        let tr: f64 = (2..2 + r).map(|j| self.xtwx[(j, j)]).sum();
        (tr / r as f64).max(f64::MIN_POSITIVE)
    }
}

struct Solution {
    beta: DVector<f64>,
    a_inv: DMatrix<f64>,
    edf: Vec<f64>,
    rss: f64,
    /// Penalized deviance, floored.
    dp: f64,
    logdet_a: f64,
}

fn solve_at(sm: &Smoother, lambda: f64) -> Option<Solution> {
    let p = sm.basis.dim;
    let active = if lambda.is_infinite() { 2 } else { p };
    let mut a = sm.xtwx.view((0, 0), (active, active)).into_owned();
    if lambda.is_finite() {
        for j in 2..p {
            a[(j, j)] += lambda;
        }
    }
    let chol = linalg::cholesky(a)?;
    let rhs = sm.xtwz.rows(0, active).into_owned();
    let b_act = chol.solve(&rhs);
    let a_inv_act = chol.inverse();
    let f = &a_inv_act * sm.xtwx.view((0, 0), (active, active));
    let mut beta = DVector::zeros(p);
    beta.rows_mut(0, active).copy_from(&b_act);
    let mut a_inv = DMatrix::zeros(p, p);
    a_inv.view_mut((0, 0), (active, active)).copy_from(&a_inv_act);
    let mut edf = vec![0.0; p];
    for j in 0..active {
        edf[j] = f[(j, j)];
    }
    // residual sum of squares computed directly to avoid cancellation
    let fitted = sm.x.columns(0, active) * &b_act;
    let rss: f64 = (0..sm.x.nrows())
        .map(|i| sm.w[i] * (sm.z[i] - fitted[i]).powi(2))
        .sum();
    let pen = if lambda.is_finite() {
        lambda * beta.rows(2, p - 2).norm_squared()
    } else {
        0.0
    };
    let dp = (rss + pen).max(1e-12 * sm.tss).max(f64::MIN_POSITIVE);
    Some(Solution {
        beta,
        a_inv,
        edf,
        rss,
        dp,
        logdet_a: linalg::chol_logdet(&chol),
    })
}

/// Negative restricted log-likelihood up to a constant, with the scale
/// profiled out.
fn reml_objective(sm: &Smoother, rho: f64) -> f64 {
    let n = sm.x.nrows() as f64;
    let lambda = rho.exp();
    match solve_at(sm, lambda) {
        Some(s) => (n - 2.0) * s.dp.ln() + s.logdet_a - sm.n_range() as f64 * rho,
        None => f64::INFINITY,
    }
}

fn select_lambda(sm: &Smoother, span: f64) -> (f64, bool) {
    let center = sm.lambda_scale().ln();
    let (lo, hi) = (center - span, center + span);
    let steps = (4.0 * span).ceil() as usize;
    let grid: Vec<f64> = (0..=steps).map(|g| lo + (hi - lo) * g as f64 / steps as f64).collect();
    let vals: Vec<f64> = grid.iter().map(|&r| reml_objective(sm, r)).collect();
    let best = (0..vals.len()).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    if best == 0 || best == vals.len() - 1 {
        return (grid[best].exp(), true);
    }
    // golden section inside the bracketing grid cells
    let (mut a, mut b) = (grid[best - 1], grid[best + 1]);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = reml_objective(sm, c);
    let mut fd = reml_objective(sm, d);
    while b - a > 1e-8 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = reml_objective(sm, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = reml_objective(sm, d);
        }
    }
    ((0.5 * (a + b)).exp(), false)
}

fn chi2_sf(k: usize, t: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    ChiSquared::new(k as f64).map(|c| c.sf(t)).unwrap_or(f64::NAN)
}

/// Wald statistic of `beta` against a rank-`r` pseudo-inverse of its
/// covariance.
fn smooth_wald(beta: &DVector<f64>, cov: &DMatrix<f64>, rank: usize) -> f64 {
    let mut v = cov.clone();
    linalg::symmetrize(&mut v);
    let eig = v.symmetric_eigen();
    let mut order: Vec<usize> = (0..beta.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut t = 0.0;
    for &j in order.iter().take(rank) {
        let ev = eig.eigenvalues[j];
        let proj = eig.eigenvectors.column(j).dot(beta);
        if ev > 0.0 {
            t += proj * proj / ev;
        } else if proj.abs() > 0.0 {
            return f64::INFINITY;
        }
    }
    t
}

/// Penalized cubic-spline fit of `z` on the dose with observation weights in
/// both the fitting and the REML criterion.
pub fn gam_fit(data: &DoseData, opts: &GamOptions) -> Result<DoseResponseFit> {
    let sm = Smoother::new(data, opts.basis_dim)?;
    let (lambda, at_bound) = match opts.lambda {
        Some(l) if l >= 0.0 => (l, false),
        Some(_) => return Err(Error::Config("smoothing parameter must be nonnegative".into())),
        None => select_lambda(&sm, opts.log_lambda_span),
    };
    let sol = solve_at(&sm, lambda).ok_or(Error::DegenerateDose)?;
    let n = data.z.len() as f64;
    let edf_total: f64 = sol.edf.iter().sum();
    let scale = sol.rss / (n - edf_total).max(1.0);
    let cov = &sol.a_inv * scale;
    let edf = edf_total - sol.edf[0];

    let ks = sm.basis.dim - 1;
    // test in the space of fitted values: X_s = QR, f = R beta_s
    let mut xs = sm.x.columns(1, ks).into_owned();
    for i in 0..xs.nrows() {
        xs.row_mut(i).scale_mut(sm.w[i].sqrt());
    }
    let r = xs.qr().r();
    let bs = &r * sol.beta.rows(1, ks);
    let vs = &r * cov.view((1, 1), (ks, ks)) * r.transpose();
    let rank = (edf.round() as usize).clamp(1, ks);
    let p_value = chi2_sf(rank, smooth_wald(&bs, &vs, rank));

    let curve = data
        .grid(opts.grid_size)
        .into_iter()
        .map(|d| {
            let mut x = DVector::from_element(sm.basis.dim, 1.0);
            x.rows_mut(1, ks).copy_from(&sm.basis.row(d));
            let fit = x.dot(&sol.beta);
            let h = Z_CRIT * (x.transpose() * &cov * &x)[0].max(0.0).sqrt();
            CurvePoint {
                d,
                fit,
                lower: fit - h,
                upper: fit + h,
            }
        })
        .collect();
    Ok(DoseResponseFit {
        kind: FitKind::Gam,
        linear: None,
        gam: Some(GamFit {
            basis: sm.basis,
            coefficients: sol.beta,
            lambda,
            edf,
            edf_per_coef: sol.edf,
            p_value,
            cov,
            scale,
            lambda_at_bound: at_bound,
        }),
        curve,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DrfConfig {
    pub method: Method,
    pub poly_order: usize,
    pub ebct: EbctOptions,
    pub wls: WlsOptions,
    pub gam: GamOptions,
    /// Demean doses and covariates within center before balancing and
    /// fitting, which gives the fixed-effects estimator.
    pub demean_dose: bool,
    /// Use model-based scores for factors not measured in a classroom.
    pub allow_indirect: bool,
}

impl Default for DrfConfig {
    fn default() -> Self {
        Self {
            method: Method::Ebct,
            poly_order: 2,
            ebct: EbctOptions::default(),
            wls: WlsOptions::default(),
            gam: GamOptions::default(),
            demean_dose: false,
            allow_indirect: false,
        }
    }
}

/// Balancing weights of one factor's dose, shared by every outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorWeights {
    pub factor: usize,
    pub factor_name: String,
    pub class_ids: Vec<String>,
    pub center_ids: Vec<String>,
    pub dose: Vec<f64>,
    pub problem: BalanceProblem,
    pub weights: crate::balance::WeightSet,
}

pub fn factor_weights(
    scores: &FactorScoreSet,
    factor: usize,
    factor_name: &str,
    covariates: Option<&ClassroomTable>,
    cfg: &DrfConfig,
) -> Result<FactorWeights> {
    let mut class_ids = Vec::new();
    let mut center_ids = Vec::new();
    let mut dose: Vec<f64> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (cls, center, d) in scores.dose(factor, cfg.allow_indirect) {
        let row = match covariates {
            Some(t) => match t.complete_row(&cls) {
                Some(r) => r,
                None => continue,
            },
            None => Vec::new(),
        };
        class_ids.push(cls);
        center_ids.push(center);
        dose.push(d);
        rows.push(row);
    }
    let q = covariates.map_or(0, |t| t.columns.len());
    let names = covariates.map_or_else(Vec::new, |t| t.columns.clone());
    let mut x = DMatrix::from_fn(dose.len(), q, |i, c| rows[i][c]);
    if cfg.demean_dose {
        // balance the within-center dose that is actually fitted
        dose = demean_dose(&dose, &center_ids);
        for c in 0..q {
            let col: Vec<f64> = x.column(c).iter().copied().collect();
            x.set_column(c, &DVector::from_vec(demean_dose(&col, &center_ids)));
        }
    }
    let dv = DVector::from_column_slice(&dose);
    let problem = BalanceProblem::new(dv.clone(), x.clone(), names, None, cfg.poly_order)?;
    let weights = match cfg.method {
        Method::Ebct => ebct_solve_with(&problem, &cfg.ebct, None)?,
        Method::GpsGlm => gps_glm_weights(&dv, &x)?,
    };
    Ok(FactorWeights {
        factor,
        factor_name: factor_name.to_string(),
        class_ids,
        center_ids,
        dose,
        problem,
        weights,
    })
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DrfRow {
    pub response: String,
    pub dose: String,
    pub n: usize,
    pub estimate: f64,
    pub se: f64,
    pub p_value: f64,
    pub edf: Option<f64>,
    pub gam_p: Option<f64>,
    pub lambda_at_bound: bool,
    pub ess: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrfCell {
    pub row: DrfRow,
    pub linear: DoseResponseFit,
    pub gam: Option<DoseResponseFit>,
    /// Why the spline fit is missing.
    pub gam_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedCell {
    pub response: String,
    pub dose: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DrfResult {
    pub weights: Vec<FactorWeights>,
    /// Outcome-major, factor-minor order.
    pub cells: Vec<DrfCell>,
    pub skipped: Vec<SkippedCell>,
}

fn run_cell(fw: &FactorWeights, outcomes: &ClassroomTable, col: usize, cfg: &DrfConfig) -> std::result::Result<DrfCell, String> {
    let response = outcomes.columns[col].clone();
    let mut y = Vec::new();
    let mut d = Vec::new();
    let mut w = Vec::new();
    let mut centers = Vec::new();
    let mut ids = Vec::new();
    for (i, cls) in fw.class_ids.iter().enumerate() {
        if let Some(v) = outcomes.get(cls, col) {
            y.push(v);
            d.push(fw.dose[i]);
            w.push(fw.weights.weights[i]);
            centers.push(fw.center_ids[i].clone());
            ids.push(cls.clone());
        }
    }
    if y.len() < 3 {
        return Err(format!("{} classrooms with outcome and dose", y.len()));
    }
    let z: Vec<f64> = center_mean_center(&ids, &centers, &y).into_iter().map(|c| c.z).collect();
    let ess = effective_sample_size(&DVector::from_column_slice(&w));
    let data = DoseData {
        z,
        dose: d,
        weights: w,
        center_ids: centers,
    };
    let linear = wls_fit(&data, &cfg.wls).map_err(|e| e.to_string())?;
    let (gam, gam_error) = match gam_fit(&data, &cfg.gam) {
        Ok(g) => (Some(g), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let lf = linear.linear.as_ref().expect("linear fit");
    let gf = gam.as_ref().and_then(|g| g.gam.as_ref());
    Ok(DrfCell {
        row: DrfRow {
            response,
            dose: fw.factor_name.clone(),
            n: data.z.len(),
            estimate: lf.gamma1,
            se: lf.se_gamma1,
            p_value: lf.p_value,
            edf: gf.map(|g| g.edf),
            gam_p: gf.map(|g| g.p_value),
            lambda_at_bound: gf.is_some_and(|g| g.lambda_at_bound),
            ess,
        },
        linear,
        gam,
        gam_error,
    })
}

/// Linear and spline dose-response fits for every outcome column and every
/// factor dose. Cells whose dose or weights cannot be formed are skipped
/// with a reason.
pub fn drf_pipeline(
    scores: &FactorScoreSet,
    factor_names: &[String],
    outcomes: &ClassroomTable,
    covariates: Option<&ClassroomTable>,
    cfg: &DrfConfig,
) -> Result<DrfResult> {
    use rayon::prelude::*;
    let per_factor: Vec<std::result::Result<FactorWeights, String>> = factor_names
        .par_iter()
        .enumerate()
        .map(|(f, name)| factor_weights(scores, f, name, covariates, cfg).map_err(|e| e.to_string()))
        .collect();
    let cells: Vec<(usize, usize)> = (0..outcomes.columns.len())
        .flat_map(|o| (0..factor_names.len()).map(move |f| (o, f)))
        .collect();
    let results: Vec<std::result::Result<DrfCell, String>> = cells
        .par_iter()
        .map(|&(o, f)| match &per_factor[f] {
            Ok(fw) => run_cell(fw, outcomes, o, cfg),
            Err(e) => Err(format!("weights: {e}")),
        })
        .collect();
    let mut out = DrfResult::default();
    for (&(o, f), r) in cells.iter().zip(results) {
        match r {
            Ok(c) => out.cells.push(c),
            Err(reason) => out.skipped.push(SkippedCell {
                response: outcomes.columns[o].clone(),
                dose: factor_names[f].clone(),
                reason,
            }),
        }
    }
    out.weights = per_factor.into_iter().filter_map(|r| r.ok()).collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eb::{CenterScore, ClassroomScore};
    use crate::model::AgeGroup;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        rng.sample(StandardNormal)
    }

    #[test]
    fn centering_examples() {
        let z: Vec<f64> = center_mean_center(&ids(&["a"]), &ids(&["k"]), &[3.7]).iter().map(|c| c.z).collect();
        assert_eq!(z, vec![0.0]);
        let z: Vec<f64> = center_mean_center(&ids(&["a", "b"]), &ids(&["k", "k"]), &[5.0, 2.0])
            .iter()
            .map(|c| c.z)
            .collect();
        assert_eq!(z, vec![1.5, -1.5]);
        let c = ids(&["k", "m", "k", "k"]);
        let z = demean_dose(&[1.0, 9.0, 2.0, 6.0], &c);
        assert_eq!(z, vec![-2.0, 0.0, -1.0, 3.0]);
    }

    #[test]
    fn centered_sums_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let centers: Vec<String> = (0..500).map(|i| format!("c{}", i % 37)).collect();
        let y: Vec<f64> = (0..500).map(|_| 10.0 * normal(&mut rng)).collect();
        let z = demean_dose(&y, &centers);
        let mut sums: HashMap<&str, f64> = HashMap::new();
        for (c, v) in centers.iter().zip(&z) {
            *sums.entry(c).or_default() += v;
        }
        assert!(sums.values().all(|s| s.abs() < 1e-12));
    }

    #[test]
    fn wls_exact_line_and_hand_example() {
        let d: Vec<f64> = (0..8).map(|i| i as f64 * 0.3).collect();
        let z: Vec<f64> = d.iter().map(|v| 2.0 * v).collect();
        let f = wls_fit(&DoseData::uniform(z, d), &WlsOptions::default()).unwrap();
        let l = f.linear.unwrap();
        assert!((l.gamma1 - 2.0).abs() < 1e-14 && l.gamma0.abs() < 1e-14);
        assert!(l.residuals.iter().all(|r| r.abs() < 1e-14));

        // direct 2x2 normal equations
        let (d, z, w) = ([0.0, 1.0, 2.0], [0.0, 1.0, 4.0], [0.5, 0.25, 0.25]);
        let sw: f64 = w.iter().sum();
        let swd: f64 = (0..3).map(|i| w[i] * d[i]).sum();
        let swdd: f64 = (0..3).map(|i| w[i] * d[i] * d[i]).sum();
        let swz: f64 = (0..3).map(|i| w[i] * z[i]).sum();
        let swdz: f64 = (0..3).map(|i| w[i] * d[i] * z[i]).sum();
        let det = sw * swdd - swd * swd;
        let g0 = (swdd * swz - swd * swdz) / det;
        let g1 = (sw * swdz - swd * swz) / det;
        let data = DoseData {
            z: z.to_vec(),
            dose: d.to_vec(),
            weights: w.to_vec(),
            center_ids: ids(&["a", "b", "c"]),
        };
        let l = wls_fit(&data, &WlsOptions::default()).unwrap().linear.unwrap();
        assert!((l.gamma1 - g1).abs() < 1e-14 && (l.gamma0 - g0).abs() < 1e-14);
        assert!((g1 - 21.0 / 11.0).abs() < 1e-14);
    }

    #[test]
    fn sandwich_matches_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 60;
        let d: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let z: Vec<f64> = d.iter().map(|v| 0.5 * v + (1.0 + v.abs()) * normal(&mut rng)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..2.0)).collect();
        let centers: Vec<String> = (0..n).map(|i| format!("c{}", i / 3)).collect();
        let data = DoseData {
            z: z.clone(),
            dose: d.clone(),
            weights: w.clone(),
            center_ids: centers.clone(),
        };
        let x = DMatrix::from_fn(n, 2, |i, c| if c == 0 { 1.0 } else { d[i] });
        let wm = DMatrix::from_diagonal(&DVector::from_vec(w.clone()));
        let zv = DVector::from_vec(z);
        let bread = (x.transpose() * &wm * &x).try_inverse().unwrap();
        let beta = &bread * x.transpose() * &wm * &zv;
        let e = &zv - &x * &beta;
        let mut meat = DMatrix::zeros(2, 2);
        for i in 0..n {
            let s = x.row(i).transpose() * (w[i] * e[i]);
            meat += &s * s.transpose();
        }
        let v = &bread * meat * &bread * (n as f64 / (n as f64 - 2.0));
        let l = wls_fit(&data, &WlsOptions::default()).unwrap().linear.unwrap();
        assert!((l.gamma1 - beta[1]).abs() < 1e-12);
        assert!((l.se_gamma1 - v[(1, 1)].sqrt()).abs() < 1e-12);

        let mut meat = DMatrix::zeros(2, 2);
        for g in 0..n / 3 {
            let mut s = DVector::zeros(2);
            for i in 3 * g..3 * g + 3 {
                s += x.row(i).transpose() * (w[i] * e[i]);
            }
            meat += &s * s.transpose();
        }
        let gc = (n / 3) as f64;
        let v = &bread * meat * &bread * (gc / (gc - 1.0) * (n as f64 - 1.0) / (n as f64 - 2.0));
        let opts = WlsOptions {
            cluster: true,
            ..Default::default()
        };
        let l = wls_fit(&data, &opts).unwrap().linear.unwrap();
        assert!((l.se_gamma1 - v[(1, 1)].sqrt()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_dose() {
        let data = DoseData::uniform(vec![1.0, 2.0, 3.0], vec![0.4; 3]);
        assert!(matches!(wls_fit(&data, &WlsOptions::default()), Err(Error::DegenerateDose)));
    }

    #[test]
    fn fixed_effects_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = 25;
        let mut centers = Vec::new();
        let mut y = Vec::new();
        let mut d = Vec::new();
        for c in 0..k {
            let u = 2.0 * normal(&mut rng);
            for _ in 0..rng.gen_range(1..5) {
                let dv = u + normal(&mut rng);
                centers.push(format!("c{c}"));
                d.push(dv);
                y.push(0.7 * dv + 3.0 * u + normal(&mut rng));
            }
        }
        let n = y.len();
        // y on d plus one indicator per center
        let x = DMatrix::from_fn(n, k + 1, |i, c| {
            if c == 0 {
                d[i]
            } else if centers[i] == format!("c{}", c - 1) {
                1.0
            } else {
                0.0
            }
        });
        let yv = DVector::from_vec(y.clone());
        let beta = (x.transpose() * &x).lu().solve(&(x.transpose() * &yv)).unwrap();
        let idv: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let z: Vec<f64> = center_mean_center(&idv, &centers, &y).iter().map(|c| c.z).collect();
        let data = DoseData::uniform(z, demean_dose(&d, &centers));
        let l = wls_fit(&data, &WlsOptions::default()).unwrap().linear.unwrap();
        assert!((l.gamma1 - beta[0]).abs() < 1e-8);
    }

    #[test]
    fn regression_calibration() {
        let (tau2, s2, b1, n, reps) = (1.0f64, 0.5f64, 1.3, 2000, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shrink = tau2 / (tau2 + s2);
        let (mut raw, mut cal) = (Vec::new(), Vec::new());
        for _ in 0..reps {
            let eta: Vec<f64> = (0..n).map(|_| tau2.sqrt() * normal(&mut rng)).collect();
            let proxy: Vec<f64> = eta.iter().map(|e| e + s2.sqrt() * normal(&mut rng)).collect();
            let z: Vec<f64> = eta.iter().map(|e| b1 * e + normal(&mut rng)).collect();
            let post: Vec<f64> = proxy.iter().map(|p| shrink * p).collect();
            let o = WlsOptions::default();
            raw.push(wls_fit(&DoseData::uniform(z.clone(), proxy), &o).unwrap().linear.unwrap().gamma1);
            cal.push(wls_fit(&DoseData::uniform(z, post), &o).unwrap().linear.unwrap().gamma1);
        }
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
            (m, sd / (v.len() as f64).sqrt())
        };
        let (m, se) = stats(&cal);
        assert!((m - b1).abs() < 3.0 * se, "{m} {se}");
        let (m, se) = stats(&raw);
        assert!((m - b1 * shrink).abs() < 3.0 * se, "{m} {se}");
    }

    #[test]
    fn bspline_basics() {
        let t = [0.0, 0.0, 0.0, 0.0, 0.3, 0.5, 1.2, 2.0, 2.0, 2.0, 2.0];
        for x in [0.0, 0.1, 0.3, 0.77, 1.9999, 2.0] {
            let b = bspline(&t, 4, x, 0);
            assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            // Greville abscissae reproduce the identity
            let lin: f64 = (0..b.len()).map(|i| b[i] * (t[i + 1] + t[i + 2] + t[i + 3]) / 3.0).sum();
            assert!((lin - x).abs() < 1e-13);
        }
        // second derivative by central differences
        let h = 1e-4;
        let x = 0.77;
        let num: Vec<f64> = (0..7)
            .map(|i| {
                (bspline(&t, 4, x + h, 0)[i] - 2.0 * bspline(&t, 4, x, 0)[i] + bspline(&t, 4, x - h, 0)[i]) / (h * h)
            })
            .collect();
        let ana = bspline(&t, 4, x, 2);
        for i in 0..7 {
            assert!((num[i] - ana[i]).abs() < 1e-4);
        }
        let s = second_derivative_penalty(&t, 7);
        let g = DVector::from_fn(7, |i, _| (t[i + 1] + t[i + 2] + t[i + 3]) / 3.0);
        let one = DVector::from_element(7, 1.0);
        assert!((g.transpose() * &s * &g)[0].abs() < 1e-9);
        assert!((one.transpose() * &s * &one)[0].abs() < 1e-9);
        // a pure quadratic has penalty 4 * length
        let quad = DVector::from_fn(7, |i, _| t[i + 1] * t[i + 2] + t[i + 1] * t[i + 3] + t[i + 2] * t[i + 3]);
        let quad = quad / 3.0;
        assert!(((quad.transpose() * &s * &quad)[0] - 8.0).abs() < 1e-9);
    }

    fn spread_doses(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn gam_noiseless_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = spread_doses(200, &mut rng);
        let z: Vec<f64> = d.iter().map(|v| 0.3 + 1.7 * v).collect();
        let w: Vec<f64> = (0..200).map(|_| rng.gen_range(0.5..1.5)).collect();
        let data = DoseData {
            z,
            dose: d,
            weights: w,
            center_ids: (0..200).map(|i| i.to_string()).collect(),
        };
        let g = gam_fit(&data, &GamOptions::default()).unwrap();
        let l = wls_fit(&data, &WlsOptions::default()).unwrap();
        let gf = g.gam.as_ref().unwrap();
        assert!((gf.edf - 1.0).abs() < 0.05, "edf {}", gf.edf);
        for (a, b) in g.curve.iter().zip(&l.curve) {
            assert!((a.fit - b.fit).abs() < 1e-6);
            assert!(((a.upper - a.fit) - (a.fit - a.lower)).abs() < 1e-12);
        }
    }

    #[test]
    fn gam_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = spread_doses(400, &mut rng);
        let z: Vec<f64> = d.iter().map(|v| v * v - 1.0 + 0.1 * normal(&mut rng)).collect();
        let data = DoseData::uniform(z, d);
        let g = gam_fit(&data, &GamOptions::default()).unwrap();
        let gf = g.gam.as_ref().unwrap();
        assert!(gf.edf > 1.5 && gf.p_value < 0.01);
        assert!(!gf.lambda_at_bound);
        let (lo, hi) = (g.curve[0].d, g.curve.last().unwrap().d);
        for pt in &g.curve {
            if pt.d < lo + 0.1 * (hi - lo) || pt.d > hi - 0.1 * (hi - lo) {
                continue;
            }
            let se = (pt.upper - pt.fit) / Z_CRIT;
            assert!((pt.fit - (pt.d * pt.d - 1.0)).abs() < 3.0 * se);
        }
    }

    #[test]
    fn infinite_penalty_is_linear_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = spread_doses(150, &mut rng);
        let z: Vec<f64> = d.iter().map(|v| v.sin() + 0.3 * normal(&mut rng)).collect();
        let w: Vec<f64> = (0..150).map(|_| rng.gen_range(0.2..3.0)).collect();
        let data = DoseData {
            z,
            dose: d,
            weights: w,
            center_ids: (0..150).map(|i| i.to_string()).collect(),
        };
        let opts = GamOptions {
            lambda: Some(f64::INFINITY),
            ..Default::default()
        };
        let g = gam_fit(&data, &opts).unwrap();
        let l = wls_fit(&data, &WlsOptions::default()).unwrap();
        assert!((g.gam.as_ref().unwrap().edf - 1.0).abs() < 1e-10);
        for (a, b) in g.curve.iter().zip(&l.curve) {
            assert!((a.fit - b.fit).abs() < 1e-6);
        }
        // a very large finite penalty approaches the same limit
        let opts = GamOptions {
            lambda: Some(1e12),
            ..Default::default()
        };
        let g = gam_fit(&data, &opts).unwrap();
        for (a, b) in g.curve.iter().zip(&l.curve) {
            assert!((a.fit - b.fit).abs() < 1e-6);
        }
    }

    #[test]
    fn edf_trace_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = spread_doses(120, &mut rng);
        let z: Vec<f64> = d.iter().map(|v| (2.0 * v).cos() + 0.2 * normal(&mut rng)).collect();
        let w: Vec<f64> = (0..120).map(|_| rng.gen_range(0.5..2.0)).collect();
        let data = DoseData {
            z,
            dose: d.clone(),
            weights: w.clone(),
            center_ids: (0..120).map(|i| i.to_string()).collect(),
        };
        let mut prev = f64::INFINITY;
        for g in 0..20 {
            let lambda = 10f64.powf(-4.0 + 0.5 * g as f64);
            let opts = GamOptions {
                lambda: Some(lambda),
                ..Default::default()
            };
            let fit = gam_fit(&data, &opts).unwrap();
            let gf = fit.gam.unwrap();
            assert!(gf.edf <= prev + 1e-10);
            assert!(gf.edf >= 1.0 - 1e-8 && gf.edf <= 9.0 + 1e-8);
            prev = gf.edf;
            // hat matrix of the full fit on the unit-mean weights
            let sw: f64 = w.iter().sum();
            let wu: Vec<f64> = w.iter().map(|v| v * 120.0 / sw).collect();
            let x = DMatrix::from_fn(120, 10, |i, c| if c == 0 { 1.0 } else { gf.basis.row(d[i])[c - 1] });
            let wm = DMatrix::from_diagonal(&DVector::from_vec(wu));
            let mut pen = DMatrix::zeros(10, 10);
            for j in 2..10 {
                pen[(j, j)] = lambda;
            }
            let a = x.transpose() * &wm * &x + pen;
            let hat = &x * a.try_inverse().unwrap() * x.transpose() * &wm;
            let total: f64 = gf.edf_per_coef.iter().sum();
            assert!((hat.trace() - total).abs() < 1e-8);
        }
    }

    #[test]
    fn too_few_distinct_doses() {
        let d: Vec<f64> = (0..50).map(|i| (i % 8) as f64).collect();
        let z = d.clone();
        let r = gam_fit(&DoseData::uniform(z, d), &GamOptions::default());
        assert!(matches!(r, Err(Error::TooFewDistinctDoses { distinct: 8, required: 12 })));
    }

    fn synthetic_scores(rng: &mut ChaCha8Rng, k: usize, bx: f64) -> (FactorScoreSet, ClassroomTable, ClassroomTable) {
        let mut classrooms = Vec::new();
        let mut centers = Vec::new();
        let mut class_ids = Vec::new();
        let mut cids = Vec::new();
        let mut cov = Vec::new();
        let mut out = Vec::new();
        for c in 0..k {
            let cid = format!("C{c}");
            let u = normal(rng);
            centers.push(CenterScore {
                center_id: cid.clone(),
                alpha_eb: 0.0,
                alpha_post_var: 0.0,
            });
            for j in 0..3 {
                let x = normal(rng);
                let eta = DVector::from_vec(vec![0.6 * x + normal(rng), -0.4 * x + normal(rng)]);
                let id = format!("{cid}-{j}");
                out.push(u + eta[0] + bx * x + 0.5 * normal(rng));
                classrooms.push(ClassroomScore {
                    class_id: id.clone(),
                    center_id: cid.clone(),
                    group: AgeGroup::Toddler,
                    eta_eb: eta,
                    post_cov: DMatrix::zeros(2, 2),
                    directly_measured: vec![true, true],
                });
                class_ids.push(id);
                cids.push(cid.clone());
                cov.push(x);
            }
        }
        let n = class_ids.len();
        let covs = ClassroomTable::new(ids(&["x"]), class_ids.clone(), None, DMatrix::from_vec(n, 1, cov)).unwrap();
        let outs = ClassroomTable::new(ids(&["z"]), class_ids, Some(cids), DMatrix::from_vec(n, 1, out)).unwrap();
        (FactorScoreSet { classrooms, centers }, covs, outs)
    }

    #[test]
    fn pipeline_recovers_effects() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (scores, covs, outs) = synthetic_scores(&mut rng, 400, 0.8);
        let names = ids(&["f1", "f2"]);
        let cfg = DrfConfig::default();
        let r = drf_pipeline(&scores, &names, &outs, Some(&covs), &cfg).unwrap();
        assert_eq!(r.cells.len(), 2);
        assert!(r.skipped.is_empty());
        let a = &r.cells[0].row;
        assert!(a.p_value < 0.01 && a.gam_p.unwrap() < 0.01, "{a:?}");
        assert!(a.edf.unwrap() < 2.5, "{a:?}");
        // centering only the outcome shrinks the slope by 1 - 1/3 with three rooms per center
        assert!((a.estimate - 2.0 / 3.0).abs() < 3.0 * a.se, "{a:?}");
        let b = &r.cells[1].row;
        assert!(b.estimate.abs() < 3.0 * b.se, "{b:?}");
        let again = drf_pipeline(&scores, &names, &outs, Some(&covs), &cfg).unwrap();
        assert_eq!(r.cells, again.cells);

        let fe = DrfConfig {
            demean_dose: true,
            ..Default::default()
        };
        let r = drf_pipeline(&scores, &names, &outs, Some(&covs), &fe).unwrap();
        let a = &r.cells[0].row;
        assert!(a.p_value < 0.01 && (a.estimate - 1.0).abs() < 3.0 * a.se, "{a:?}");
        assert!(a.edf.unwrap() < 2.5, "{a:?}");
        let b = &r.cells[1].row;
        assert!(b.estimate.abs() < 3.0 * b.se, "{b:?}");
    }

    #[test]
    fn pipeline_linear_truth_gives_unit_edf() {
        // x drives both doses but reaches the outcome only through factor 1
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (scores, covs, outs) = synthetic_scores(&mut rng, 400, 0.0);
        let names = ids(&["f1", "f2"]);
        let fe = DrfConfig {
            demean_dose: true,
            ..Default::default()
        };
        let r = drf_pipeline(&scores, &names, &outs, Some(&covs), &fe).unwrap();
        let a = &r.cells[0].row;
        assert!(a.p_value < 0.01 && (a.estimate - 1.0).abs() < 3.0 * a.se, "{a:?}");
        assert!((a.edf.unwrap() - 1.0).abs() < 0.1, "{a:?}");
        let b = &r.cells[1].row;
        assert!(b.estimate.abs() < 3.0 * b.se, "{b:?}");
    }
}
