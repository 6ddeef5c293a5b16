use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::bfgs::{self, BfgsOptions};
use super::marginal::{
    all_center_work, check_dims, covariance_condition_range, gls_beta_with, sum_terms, RawGradient,
};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{ConstraintMeta, DesignBundle, ItemCatalog, ParameterSet, StartValues};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub grad_tol: f64,
    pub start: StartValues,
    /// Additional starts drawn around the default start.
    pub restarts: usize,
    pub seed: u64,
    /// Fitted center variances below this trigger a refit on the boundary.
    pub boundary_threshold: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            rel_tol: 1e-9,
            grad_tol: 1e-6,
            start: StartValues::default(),
            restarts: 0,
            seed: 0,
            boundary_threshold: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub theta_hat: ParameterSet,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Infinity norm of the profile-likelihood gradient in the optimization
    /// coordinates at `theta_hat`.
    pub gradient_norm: f64,
    pub vk_condition_min: f64,
    pub vk_condition_max: f64,
    /// Center variance fixed at zero.
    pub alpha_boundary: bool,
}

impl FittedModel {
    /// Wraps a parameter set that was not produced by the optimizer.
    pub fn from_parameters(theta: ParameterSet, bundle: &DesignBundle) -> Result<Self> {
        let loglik = super::marginal_loglik(&theta, bundle)?;
        let (lo, hi) = covariance_condition_range(&theta, bundle);
        Ok(Self {
            alpha_boundary: theta.sigma2_alpha == 0.0,
            theta_hat: theta,
            loglik,
            converged: true,
            iterations: 0,
            gradient_norm: 0.0,
            vk_condition_min: lo,
            vk_condition_max: hi,
        })
    }

    pub fn identified_mask(&self) -> &[Vec<bool>] {
        &self.theta_hat.meta.identified
    }
}

/// Layout of the unconstrained optimization vector: free loadings in item
/// order, the log-Cholesky factor of Psi row by row (lower triangle, log on
/// the diagonal), then log sigma2_alpha (unless pinned at zero) and
/// log sigma2_eps.
#[derive(Debug, Clone)]
struct Coords {
    free: Vec<usize>,
    nf: usize,
    alpha_free: bool,
}

impl Coords {
    fn new(meta: &ConstraintMeta, alpha_free: bool) -> Self {
        Self {
            free: meta.free_loading_items(),
            nf: meta.n_factors(),
            alpha_free,
        }
    }

    fn n_chol(&self) -> usize {
        self.nf * (self.nf + 1) / 2
    }

    fn len(&self) -> usize {
        self.free.len() + self.n_chol() + usize::from(self.alpha_free) + 1
    }

    fn pack(&self, theta: &ParameterSet) -> Result<DVector<f64>> {
        let mut x = DVector::zeros(self.len());
        let mut k = 0;
        for &i in &self.free {
            x[k] = theta.loading(i);
            k += 1;
        }
        let l = linalg::cholesky(theta.psi2.clone())
            .ok_or_else(|| Error::InvalidParameters("psi2 is not positive definite".into()))?
            .l();
        for f in 0..self.nf {
            for g in 0..=f {
                x[k] = if f == g { l[(f, f)].ln() } else { l[(f, g)] };
                k += 1;
            }
        }
        if self.alpha_free {
            x[k] = theta.sigma2_alpha.max(1e-12).ln();
            k += 1;
        }
        x[k] = theta.sigma2_eps.ln();
        Ok(x)
    }

    fn unpack(&self, x: &DVector<f64>, template: &ParameterSet) -> ParameterSet {
        let mut theta = template.clone();
        let mut k = 0;
        for &i in &self.free {
            let f = theta.meta.factor_of[i];
            theta.lambda[(i, f)] = x[k];
            k += 1;
        }
        let l = self.chol_factor(x);
        k += self.n_chol();
        let mut psi = &l * l.transpose();
        linalg::symmetrize(&mut psi);
        theta.psi2 = psi;
        if self.alpha_free {
            theta.sigma2_alpha = x[k].exp();
            k += 1;
        } else {
            theta.sigma2_alpha = 0.0;
        }
        theta.sigma2_eps = x[k].exp();
        theta
    }

    fn chol_factor(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.nf, self.nf);
        let mut k = self.free.len();
        for f in 0..self.nf {
            for g in 0..=f {
                l[(f, g)] = if f == g { x[k].exp() } else { x[k] };
                k += 1;
            }
        }
        l
    }

    /// Chain rule from natural-parameter partials to coordinate partials.
    fn chain(&self, raw: &RawGradient, theta: &ParameterSet, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.len());
        let mut k = 0;
        for &i in &self.free {
            out[k] = raw.lambda[(i, theta.meta.factor_of[i])];
            k += 1;
        }
        let l = self.chol_factor(x);
        let dl = (&raw.psi + raw.psi.transpose()) * &l;
        for f in 0..self.nf {
            for g in 0..=f {
                out[k] = if f == g { dl[(f, f)] * l[(f, f)] } else { dl[(f, g)] };
                k += 1;
            }
        }
        if self.alpha_free {
            out[k] = raw.sigma2_alpha * theta.sigma2_alpha;
            k += 1;
        }
        out[k] = raw.sigma2_eps * theta.sigma2_eps;
        out
    }
}

/// Gradient of the marginal log-likelihood: intercept partials first, then
/// the optimization coordinates (free loadings, log-Cholesky of Psi,
/// log sigma2_alpha, log sigma2_eps). Anchored loadings have no entry.
pub fn loglik_gradient(theta: &ParameterSet, bundle: &DesignBundle) -> Result<DVector<f64>> {
    check_dims(theta, bundle)?;
    let coords = Coords::new(&theta.meta, true);
    let x = coords.pack(theta)?;
    let work = all_center_work(theta, bundle)?;
    let (_, raw) = sum_terms(theta, bundle, &work, true);
    let raw = raw.expect("gradient requested");
    let tail = coords.chain(&raw, theta, &x);
    let ni = theta.n_items();
    let mut out = DVector::zeros(ni + tail.len());
    out.rows_mut(0, ni).copy_from(&raw.beta);
    out.rows_mut(ni, tail.len()).copy_from(&tail);
    Ok(out)
}

struct Profiled {
    theta: ParameterSet,
    loglik: f64,
    grad: DVector<f64>,
}

/// Profile log-likelihood over beta and its coordinate gradient.
fn profile(coords: &Coords, x: &DVector<f64>, template: &ParameterSet, bundle: &DesignBundle) -> Option<Profiled> {
    if x.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut theta = coords.unpack(x, template);
    let work = all_center_work(&theta, bundle).ok()?;
    theta.beta = gls_beta_with(&theta, bundle, &work).ok()?;
    let (ll, raw) = sum_terms(&theta, bundle, &work, true);
    if !ll.is_finite() {
        return None;
    }
    let grad = coords.chain(&raw.expect("gradient requested"), &theta, x);
    Some(Profiled { theta, loglik: ll, grad })
}

struct RunResult {
    profiled: Profiled,
    converged: bool,
    iterations: usize,
}

fn run(coords: &Coords, x0: DVector<f64>, template: &ParameterSet, bundle: &DesignBundle, opts: &FitOptions) -> Option<RunResult> {
    let bopts = BfgsOptions {
        max_iter: opts.max_iter,
        rel_tol: opts.rel_tol,
        grad_tol: opts.grad_tol,
    };
    let res = bfgs::minimize(x0, &bopts, |x| {
        profile(coords, x, template, bundle).map(|p| (-p.loglik, -p.grad))
    })?;
    let profiled = profile(coords, &res.x, template, bundle)?;
    Some(RunResult {
        profiled,
        converged: res.converged,
        iterations: res.iterations,
    })
}

/// Maximum-likelihood fit of the measurement model.
pub fn fit_ml(bundle: &DesignBundle, catalog: &ItemCatalog, opts: &FitOptions) -> Result<FittedModel> {
    let template = ParameterSet::starting(catalog, &opts.start);
    check_dims(&template, bundle)?;
    for (i, &c) in bundle.item_counts().iter().enumerate() {
        if c == 0 {
            return Err(Error::EmptyItem(catalog.item(i).item_id.clone()));
        }
    }
    let coords = Coords::new(&template.meta, true);
    let x0 = coords.pack(&template)?;

    let mut starts = vec![x0.clone()];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.restarts {
        let jitter: Vec<f64> = (0..x0.len())
            .map(|_| 0.3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        starts.push(&x0 + DVector::from_vec(jitter));
    }

    let mut best: Option<RunResult> = None;
    for x in starts {
        if let Some(r) = run(&coords, x, &template, bundle, opts) {
            if best.as_ref().map_or(true, |b| r.profiled.loglik > b.profiled.loglik) {
                best = Some(r);
            }
        }
    }
    let mut best = best.ok_or_else(|| Error::SingularCovariance {
        center_id: "at the starting values".into(),
    })?;
    let mut boundary = false;

    if best.profiled.theta.sigma2_alpha < opts.boundary_threshold {
        let pinned = Coords::new(&template.meta, false);
        let x = pinned.pack(&best.profiled.theta)?;
        if let Some(r) = run(&pinned, x, &template, bundle, opts) {
            if r.profiled.loglik >= best.profiled.loglik - 1e-8 * best.profiled.loglik.abs().max(1.0) {
                best = RunResult {
                    iterations: best.iterations + r.iterations,
                    ..r
                };
                boundary = true;
            }
        }
    }

    let theta = best.profiled.theta;
    let (lo, hi) = covariance_condition_range(&theta, bundle);
    Ok(FittedModel {
        loglik: best.profiled.loglik,
        converged: best.converged,
        iterations: best.iterations,
        gradient_norm: linalg::max_abs_vec(&best.profiled.grad),
        vk_condition_min: lo,
        vk_condition_max: hi,
        alpha_boundary: boundary,
        theta_hat: theta,
    })
}
