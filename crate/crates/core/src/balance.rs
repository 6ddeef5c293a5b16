//! Covariate-balancing weights for a continuous dose.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceProblem {
    pub dose: DVector<f64>,
    /// `n x q` balancing functions of the covariates.
    pub covariates: DMatrix<f64>,
    pub covariate_names: Vec<String>,
    /// Positive, summing to one.
    pub base_weights: DVector<f64>,
    pub poly_order: usize,
    /// Weighted covariate means to reach; defaults to the base-weighted means.
    pub targets: Option<DVector<f64>>,
}

impl BalanceProblem {
    pub fn new(
        dose: DVector<f64>,
        covariates: DMatrix<f64>,
        covariate_names: Vec<String>,
        base_weights: Option<DVector<f64>>,
        poly_order: usize,
    ) -> Result<Self> {
        let n = dose.len();
        if covariates.nrows() != n || covariate_names.len() != covariates.ncols() {
            return Err(Error::InvalidBalanceProblem(format!(
                "{n} doses, {}x{} covariates, {} names",
                covariates.nrows(),
                covariates.ncols(),
                covariate_names.len()
            )));
        }
        if dose.iter().chain(covariates.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidBalanceProblem("non-finite dose or covariate".into()));
        }
        let base = match base_weights {
            Some(w) => {
                if w.len() != n || w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                    return Err(Error::InvalidBalanceProblem(
                        "base weights must be positive, one per unit".into(),
                    ));
                }
                let s = w.sum();
                w / s
            }
            None => DVector::from_element(n, 1.0 / n as f64),
        };
        let q = covariates.ncols();
        let m = q + poly_order + q * poly_order;
        if n <= m {
            return Err(Error::InvalidBalanceProblem(format!(
                "{n} units for {m} balance constraints"
            )));
        }
        Ok(Self {
            dose,
            covariates,
            covariate_names,
            base_weights: base,
            poly_order,
            targets: None,
        })
    }

    pub fn n(&self) -> usize {
        self.dose.len()
    }

    /// Balance functions `g_i` (rows) whose weighted mean must vanish:
    /// centered covariates, centered dose powers `r = 1..p`, and the
    /// products of centered covariates with centered dose powers.
    pub fn constraint_matrix(&self) -> DMatrix<f64> {
        let n = self.n();
        let q = self.covariates.ncols();
        let p = self.poly_order;
        let base = &self.base_weights;
        let wmean = |v: &DVector<f64>| base.dot(v);
        let d_mean = wmean(&self.dose);
        let dt = self.dose.map(|d| d - d_mean);
        let mut g = DMatrix::zeros(n, q + p + q * p);
        let mut xt = DMatrix::zeros(n, q);
        for c in 0..q {
            let col = self.covariates.column(c).into_owned();
            let target = match &self.targets {
                Some(t) => t[c],
                None => wmean(&col),
            };
            xt.set_column(c, &col.map(|v| v - target));
        }
        g.view_mut((0, 0), (n, q)).copy_from(&xt);
        for r in 1..=p {
            let pow = dt.map(|v| v.powi(r as i32));
            let m = wmean(&pow);
            g.set_column(q + r - 1, &pow.map(|v| v - m));
            for c in 0..q {
                g.set_column(q + p + (r - 1) * q + c, &xt.column(c).component_mul(&pow));
            }
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "EBCT")]
    Ebct,
    #[serde(rename = "GPS_GLM")]
    GpsGlm,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Ebct => "EBCT",
            Method::GpsGlm => "GPS_GLM",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightDiagnostics {
    /// Largest `|sum_i w_i g_i|` over the balance constraints (EBCT only).
    pub max_abs_balance_violation: f64,
    pub ess: f64,
    pub max_weight: f64,
    /// Constraint columns removed as collinear.
    pub pruned: Vec<usize>,
    pub iterations: usize,
    /// Weights were capped; the estimand changes.
    pub trimmed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub weights: DVector<f64>,
    pub method: Method,
    pub dual: Option<DVector<f64>>,
    pub diagnostics: WeightDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EbctOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Cap weights at this quantile of the solved weights.
    pub trim_quantile: Option<f64>,
    pub prune_tol: f64,
}

impl Default for EbctOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 200,
            trim_quantile: None,
            prune_tol: 1e-10,
        }
    }
}

/// Columns kept after a rank-revealing QR of the scaled constraint matrix.
fn independent_columns(g: &DMatrix<f64>, tol: f64) -> Vec<usize> {
    let m = g.ncols();
    if m == 0 {
        return Vec::new();
    }
    let qr = g.clone().col_piv_qr();
    let r = qr.r();
    let mut order = DMatrix::from_fn(1, m, |_, c| c as f64);
    qr.p().permute_columns(&mut order);
    let r00 = r[(0, 0)].abs();
    let rank = (0..r.nrows().min(m))
        .take_while(|&k| r00 > 0.0 && r[(k, k)].abs() > tol * r00)
        .count();
    let mut keep: Vec<usize> = (0..rank).map(|k| order[(0, k)] as usize).collect();
    keep.sort_unstable();
    keep
}

/// Exponential-tilting weights `q_i exp(lambda^T g_i)`, normalized, plus the
/// log-partition value.
fn tilt(g: &DMatrix<f64>, base: &DVector<f64>, lambda: &DVector<f64>) -> (DVector<f64>, f64) {
    let eta = g * lambda;
    let mx = eta.max();
    let un = DVector::from_fn(base.len(), |i, _| base[i] * (eta[i] - mx).exp());
    let s = un.sum();
    (un / s, s.ln() + mx)
}

/// KL-minimal weights that zero every balance function: damped Newton on the
/// convex dual `log sum_i q_i exp(lambda^T g_i)`.
pub fn ebct_solve(problem: &BalanceProblem) -> Result<WeightSet> {
    ebct_solve_with(problem, &EbctOptions::default(), None)
}

/// As [`ebct_solve`] with explicit options and an optional dual start (in the
/// scaled coordinates of the retained constraints).
pub fn ebct_solve_with(
    problem: &BalanceProblem,
    opts: &EbctOptions,
    start: Option<&DVector<f64>>,
) -> Result<WeightSet> {
    let g_raw = problem.constraint_matrix();
    let base = &problem.base_weights;
    let n = problem.n();
    // scale columns to unit base-weighted RMS
    let scale: Vec<f64> = (0..g_raw.ncols())
        .map(|c| {
            let rms = g_raw.column(c).iter().zip(base.iter()).map(|(v, w)| w * v * v).sum::<f64>().sqrt();
            if rms > 0.0 { rms } else { 0.0 }
        })
        .collect();
    let scaled = DMatrix::from_fn(n, g_raw.ncols(), |i, c| {
        if scale[c] > 0.0 { g_raw[(i, c)] / scale[c] } else { 0.0 }
    });
    let keep = independent_columns(&scaled, opts.prune_tol);
    let pruned: Vec<usize> = (0..g_raw.ncols()).filter(|c| !keep.contains(c)).collect();
    let g = DMatrix::from_fn(n, keep.len(), |i, c| scaled[(i, keep[c])]);
    let m = keep.len();

    let mut lambda = match start {
        Some(s) if s.len() == m => s.clone(),
        Some(s) => {
            return Err(Error::InvalidBalanceProblem(format!(
                "dual start of length {} for {m} constraints",
                s.len()
            )))
        }
        None => DVector::zeros(m),
    };
    let (mut w, mut obj) = tilt(&g, base, &lambda);
    let mut iterations = 0;
    let mut residual = if m == 0 { 0.0 } else { linalg::max_abs_vec(&(g.tr_mul(&w))) };
    while residual >= opts.tol {
        if iterations >= opts.max_iter || !lambda.iter().all(|v| v.is_finite()) {
            return Err(Error::InfeasibleConstraints { residual });
        }
        iterations += 1;
        let mean = g.tr_mul(&w);
        let gw = DMatrix::from_fn(n, m, |i, c| g[(i, c)] * w[i]);
        let mut h = g.tr_mul(&gw) - &mean * mean.transpose();
        linalg::symmetrize(&mut h);
        let step = match linalg::cholesky(h.clone()) {
            Some(c) => c.solve(&mean),
            None => {
                let ridge = 1e-12 * h.diagonal().amax().max(1e-300);
                let mut hr = h;
                for d in 0..m {
                    hr[(d, d)] += ridge;
                }
                match hr.lu().solve(&mean) {
                    Some(s) => s,
                    None => return Err(Error::InfeasibleConstraints { residual }),
                }
            }
        };
        // step halving on the dual objective
        let mut t = 1.0;
        let slope = -mean.dot(&step);
        loop {
            let trial = &lambda - &step * t;
            let (wt, ot) = tilt(&g, base, &trial);
            if ot.is_finite() && ot <= obj + 1e-4 * t * slope + 1e-15 * obj.abs().max(1.0) {
                lambda = trial;
                w = wt;
                obj = ot;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                return Err(Error::InfeasibleConstraints { residual });
            }
        }
        residual = linalg::max_abs_vec(&(g.tr_mul(&w)));
    }

    let mut trimmed = false;
    if let Some(qt) = opts.trim_quantile {
        let cap = linalg::weighted_quantile(w.as_slice(), &vec![1.0; n], qt);
        if w.iter().any(|&v| v > cap) {
            w = w.map(|v| v.min(cap));
            let s = w.sum();
            w /= s;
            trimmed = true;
        }
    }
    let violation = if g_raw.ncols() == 0 { 0.0 } else { linalg::max_abs_vec(&g_raw.tr_mul(&w)) };
    Ok(WeightSet {
        diagnostics: WeightDiagnostics {
            max_abs_balance_violation: violation,
            ess: effective_sample_size(&w),
            max_weight: w.max(),
            pruned,
            iterations,
            trimmed,
        },
        weights: w,
        method: Method::Ebct,
        dual: Some(lambda),
    })
}

fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}

/// Stabilized inverse generalized-propensity weights from a Gaussian linear
/// model of the dose, normalized to sum to one.
pub fn gps_glm_weights(dose: &DVector<f64>, covariates: &DMatrix<f64>) -> Result<WeightSet> {
    let n = dose.len();
    let q = covariates.ncols();
    if covariates.nrows() != n {
        return Err(Error::InvalidBalanceProblem("covariate rows do not match doses".into()));
    }
    if n <= q + 2 {
        return Err(Error::InvalidBalanceProblem(format!("{n} units for {q} covariates")));
    }
    let mu = dose.mean();
    let var_d = dose.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / n as f64;
    if !(var_d > 0.0) {
        return Err(Error::DegenerateDose);
    }
    let x = DMatrix::from_fn(n, q + 1, |i, c| if c == 0 { 1.0 } else { covariates[(i, c - 1)] });
    let beta = x
        .clone()
        .svd(true, true)
        .solve(dose, 1e-12)
        .map_err(|e| Error::InvalidBalanceProblem(e.to_string()))?;
    let fitted = &x * beta;
    let sigma2 = (dose - &fitted).norm_squared() / n as f64;
    let log_ratio: Vec<f64> = (0..n)
        .map(|i| {
            if sigma2 > 0.0 {
                normal_logpdf(dose[i], mu, var_d) - normal_logpdf(dose[i], fitted[i], sigma2)
            } else {
                0.0
            }
        })
        .collect();
    let mx = log_ratio.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let un = DVector::from_iterator(n, log_ratio.iter().map(|l| (l - mx).exp()));
    let w = &un / un.sum();
    Ok(WeightSet {
        diagnostics: WeightDiagnostics {
            max_abs_balance_violation: f64::NAN,
            ess: effective_sample_size(&w),
            max_weight: w.max(),
            pruned: Vec::new(),
            iterations: 0,
            trimmed: false,
        },
        weights: w,
        method: Method::GpsGlm,
        dual: None,
    })
}

/// `(sum w)^2 / sum w^2`.
pub fn effective_sample_size(w: &DVector<f64>) -> f64 {
    // scaling by the largest weight makes equal weights give n exactly
    let r = w / w.amax();
    r.sum().powi(2) / r.norm_squared()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceRow {
    pub covariate: String,
    /// `None` marks a constant column.
    pub unweighted: Option<f64>,
    pub weighted: Option<f64>,
}

fn weighted_moments(w: &DVector<f64>, x: &DVector<f64>, d: &DVector<f64>) -> (f64, f64, f64) {
    let s = w.sum();
    let mx = w.dot(x) / s;
    let md = w.dot(d) / s;
    let mut cxd = 0.0;
    let mut vx = 0.0;
    let mut vd = 0.0;
    for i in 0..w.len() {
        let (a, b) = (x[i] - mx, d[i] - md);
        cxd += w[i] * a * b;
        vx += w[i] * a * a;
        vd += w[i] * b * b;
    }
    (cxd / s, vx / s, vd / s)
}

fn is_constant(x: &DVector<f64>) -> bool {
    x.iter().all(|&v| v == x[0])
}

fn weighted_corr(w: &DVector<f64>, x: &DVector<f64>, d: &DVector<f64>) -> Option<f64> {
    if is_constant(x) {
        return None;
    }
    let (c, vx, vd) = weighted_moments(w, x, d);
    (vx > 0.0 && vd > 0.0).then(|| c / (vx * vd).sqrt())
}

/// Unweighted and weighted Pearson correlation of each covariate with the
/// dose.
pub fn balance_table(weights: &WeightSet, problem: &BalanceProblem) -> Vec<BalanceRow> {
    let uniform = DVector::from_element(problem.n(), 1.0);
    (0..problem.covariates.ncols())
        .map(|c| {
            let x = problem.covariates.column(c).into_owned();
            BalanceRow {
                covariate: problem.covariate_names[c].clone(),
                unweighted: weighted_corr(&uniform, &x, &problem.dose),
                weighted: weighted_corr(&weights.weights, &x, &problem.dose),
            }
        })
        .collect()
}

/// Weighted least-squares slope of each covariate on the dose; a balanced
/// weighting makes every slope vanish.
pub fn pseudo_drf_flatness(weights: &WeightSet, problem: &BalanceProblem) -> Vec<(String, Option<f64>)> {
    (0..problem.covariates.ncols())
        .map(|c| {
            let x = problem.covariates.column(c).into_owned();
            let slope = if is_constant(&x) {
                None
            } else {
                let (cxd, _, vd) = weighted_moments(&weights.weights, &x, &problem.dose);
                (vd > 0.0).then(|| cxd / vd)
            };
            (problem.covariate_names[c].clone(), slope)
        })
        .collect()
}

/// Largest weighted absolute correlation in a balance table.
pub fn max_weighted_abs_corr(rows: &[BalanceRow]) -> f64 {
    rows.iter()
        .filter_map(|r| r.weighted)
        .fold(0.0, |a, v| a.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn confounded(n: usize, q: usize, seed: u64) -> BalanceProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let d = DVector::from_fn(n, |i, _| {
            0.5 * x.row(i).sum() + rng.sample::<f64, _>(StandardNormal)
        });
        let names = (0..q).map(|c| format!("x{c}")).collect();
        BalanceProblem::new(d, x, names, None, 2).unwrap()
    }

    #[test]
    fn no_constraints_returns_base() {
        let d = DVector::from_vec(vec![1.0, 2.0, 4.0]);
        let base = DVector::from_vec(vec![0.2, 0.3, 0.5]);
        let p = BalanceProblem::new(d, DMatrix::zeros(3, 0), vec![], Some(base.clone()), 0).unwrap();
        let w = ebct_solve(&p).unwrap();
        assert!((w.weights - base).amax() < 1e-15);
    }

    #[test]
    fn already_balanced_base_is_optimal() {
        // symmetric design: dose and covariate uncorrelated in every moment
        let d = DVector::from_vec(vec![-1.0, 1.0, -1.0, 1.0, 0.0, 0.0]);
        let x = DMatrix::from_column_slice(6, 1, &[-1.0, -1.0, 1.0, 1.0, 2.0, -2.0]);
        let p = BalanceProblem::new(d, x, vec!["x".into()], None, 1).unwrap();
        let w = ebct_solve(&p).unwrap();
        assert!((w.weights.add_scalar(-1.0 / 6.0)).amax() < 1e-10);
    }

    #[test]
    fn constraints_hold_after_solve() {
        let p = confounded(300, 3, 1);
        let w = ebct_solve(&p).unwrap();
        assert!(w.diagnostics.max_abs_balance_violation < 1e-8);
        assert!((w.weights.sum() - 1.0).abs() < 1e-12);
        assert!(w.weights.iter().all(|&v| v > 0.0));
        let table = balance_table(&w, &p);
        assert!(max_weighted_abs_corr(&table) < 1e-6);
        for (_, s) in pseudo_drf_flatness(&w, &p) {
            assert!(s.unwrap().abs() < 1e-6);
        }
    }

    #[test]
    fn unique_from_other_start() {
        let p = confounded(200, 2, 2);
        let a = ebct_solve(&p).unwrap();
        let m = a.dual.as_ref().unwrap().len();
        let start = DVector::from_fn(m, |i, _| 0.3 * (i as f64 - 2.0));
        let b = ebct_solve_with(&p, &EbctOptions::default(), Some(&start)).unwrap();
        assert!((a.weights - b.weights).amax() < 1e-8);
    }

    #[test]
    fn kl_increases_along_feasible_directions() {
        let p = confounded(80, 2, 3);
        let w = ebct_solve(&p).unwrap().weights;
        let g = p.constraint_matrix();
        // null space of [g^T; 1^T]
        let n = p.n();
        let mut a = DMatrix::zeros(g.ncols() + 1, n);
        a.view_mut((0, 0), (g.ncols(), n)).copy_from(&g.transpose());
        a.row_mut(g.ncols()).fill(1.0);
        let svd = a.clone().svd(false, true);
        let vt = svd.v_t.unwrap();
        let kl = |v: &DVector<f64>| {
            v.iter().zip(p.base_weights.iter()).map(|(x, q)| x * (x / q).ln()).sum::<f64>()
        };
        let k0 = kl(&w);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // directions orthogonal to the row space of a
        let smax = svd.singular_values.max();
        for _ in 0..10 {
            let mut delta = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            for r in (0..vt.nrows()).filter(|&r| svd.singular_values[r] > 1e-10 * smax) {
                let row = vt.row(r).transpose();
                delta -= &row * row.dot(&delta);
            }
            delta *= 0.1 * w.min() / delta.amax();
            assert!(kl(&(&w + &delta)) > k0);
            assert!(kl(&(&w - &delta)) > k0);
        }
    }

    #[test]
    fn collinear_columns_are_pruned() {
        let mut p = confounded(150, 2, 5);
        let dup = p.covariates.column(0) * 2.0;
        p.covariates = p.covariates.clone().insert_column(2, 0.0);
        p.covariates.set_column(2, &dup);
        p.covariate_names.push("dup".into());
        let w = ebct_solve(&p).unwrap();
        assert!(!w.diagnostics.pruned.is_empty());
        assert!(w.diagnostics.max_abs_balance_violation < 1e-8);
    }

    #[test]
    fn infeasible_target() {
        let mut p = confounded(50, 1, 6);
        let top = p.covariates.max();
        p.targets = Some(DVector::from_element(1, top + 1.0));
        assert!(matches!(ebct_solve(&p), Err(Error::InfeasibleConstraints { .. })));
    }

    #[test]
    fn ess_examples() {
        assert_eq!(effective_sample_size(&DVector::from_element(7, 1.0 / 7.0)), 7.0);
        assert_eq!(effective_sample_size(&DVector::from_vec(vec![1.0, 0.0, 0.0])), 1.0);
        let e = effective_sample_size(&DVector::from_vec(vec![0.5, 0.25, 0.25]));
        assert!((e - 1.0 / 0.375).abs() < 1e-15);
    }

    #[test]
    fn gps_matches_density_ratio() {
        let d = DVector::from_vec(vec![0.1, 0.9, 2.2, 2.8, 4.5]);
        let x = DMatrix::from_column_slice(5, 1, &[0.0, 1.0, 2.0, 3.0, 4.0]);
        let w = gps_glm_weights(&d, &x).unwrap();
        // closed-form OLS on one regressor
        let xm = 2.0;
        let dm = d.mean();
        let sxy: f64 = (0..5).map(|i| (x[(i, 0)] - xm) * (d[i] - dm)).sum();
        let sxx: f64 = (0..5).map(|i| (x[(i, 0)] - xm).powi(2)).sum();
        let b1 = sxy / sxx;
        let b0 = dm - b1 * xm;
        let s2 = (0..5).map(|i| (d[i] - b0 - b1 * x[(i, 0)]).powi(2)).sum::<f64>() / 5.0;
        let vd = (0..5).map(|i| (d[i] - dm).powi(2)).sum::<f64>() / 5.0;
        let phi = |v: f64, m: f64, s: f64| (-(v - m).powi(2) / (2.0 * s)).exp() / (2.0 * std::f64::consts::PI * s).sqrt();
        let raw: Vec<f64> = (0..5).map(|i| phi(d[i], dm, vd) / phi(d[i], b0 + b1 * x[(i, 0)], s2)).collect();
        let total: f64 = raw.iter().sum();
        for i in 0..5 {
            assert!((w.weights[i] - raw[i] / total).abs() < 1e-12);
        }
        assert!(w.weights.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn gps_near_uniform_without_confounding() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dev = |n: usize, rng: &mut ChaCha8Rng| {
            let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let d = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let w = gps_glm_weights(&d, &x).unwrap();
            w.weights.map(|v| (v * n as f64 - 1.0).abs()).max()
        };
        let small = dev(200, &mut rng);
        let large = dev(20_000, &mut rng);
        assert!(large < small);
    }

    #[test]
    fn uniform_weights_give_pearson_and_nan_marker() {
        let d = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        // correlation 0.8 by construction: x = (1, 3, 2, 5, 4)
        let x = DMatrix::from_column_slice(5, 2, &[1.0, 3.0, 2.0, 5.0, 4.0, 2.0, 2.0, 2.0, 2.0, 2.0]);
        let p = BalanceProblem::new(d, x, vec!["x".into(), "c".into()], None, 0).unwrap();
        let w = WeightSet {
            weights: p.base_weights.clone(),
            method: Method::Ebct,
            dual: None,
            diagnostics: WeightDiagnostics {
                max_abs_balance_violation: 0.0,
                ess: 5.0,
                max_weight: 0.2,
                pruned: vec![],
                iterations: 0,
                trimmed: false,
            },
        };
        let t = balance_table(&w, &p);
        assert!((t[0].unweighted.unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(t[0].unweighted, t[0].weighted);
        assert_eq!(t[1].weighted, None);
        assert_eq!(pseudo_drf_flatness(&w, &p)[1].1, None);
    }
}
