//! Synthetic data from the full generative model, plus brute-force oracles
//! that deliberately share no numerical kernels with the production code.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    AgeGroup, CenterBlock, ClassroomInfo, ConstraintMeta, ItemCatalog, Observation, ObservationFrame,
    ParameterSet,
};
use crate::table::ClassroomTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSpec {
    pub name: String,
    /// Effect of each latent factor on the outcome.
    pub dose_effects: Vec<f64>,
    pub covariate_effects: Vec<f64>,
    pub center_sd: f64,
    pub noise_sd: f64,
}

/// Classroom covariates `x = C eta + noise` and outcomes
/// `z = u_k + sum_f b_f eta_f + b_x^T x + e`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeModel {
    pub covariate_names: Vec<String>,
    /// `q x F` map from latent factors into covariates.
    pub confounding: DMatrix<f64>,
    pub covariate_noise_sd: f64,
    pub outcomes: Vec<OutcomeSpec>,
}

impl OutcomeModel {
    pub fn none(n_factors: usize) -> Self {
        Self {
            covariate_names: Vec::new(),
            confounding: DMatrix::zeros(0, n_factors),
            covariate_noise_sd: 1.0,
            outcomes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_centers: usize,
    /// Inclusive range of classrooms per center, drawn uniformly.
    pub rooms_per_center: (usize, usize),
    /// Probability that a classroom is an infant room.
    pub infant_share: f64,
    /// Probability that a permitted item is incidentally missing.
    pub item_drop: f64,
    pub theta: ParameterSet,
    pub outcomes: OutcomeModel,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassroomTruth {
    pub class_id: String,
    pub center_id: String,
    pub group: AgeGroup,
    pub eta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimTruth {
    pub classrooms: Vec<ClassroomTruth>,
    /// `(center_id, alpha)`.
    pub centers: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimData {
    /// Raw (unstandardized) item scores.
    pub frame: ObservationFrame,
    pub truth: SimTruth,
    pub covariates: ClassroomTable,
    /// Classroom-mean outcomes with center ids.
    pub outcomes: ClassroomTable,
}

struct CenterDraw {
    rows: Vec<Observation>,
    infos: Vec<ClassroomInfo>,
    truth: Vec<ClassroomTruth>,
    alpha: f64,
    covariates: Vec<Vec<f64>>,
    outcomes: Vec<Vec<f64>>,
}

fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

pub fn center_id(k: usize) -> String {
    format!("C{k:05}")
}

fn draw_center(cfg: &SimConfig, catalog: &ItemCatalog, psi_sqrt: &DMatrix<f64>, k: usize) -> CenterDraw {
    // one substream per center so that adding centers leaves earlier ones intact
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(k as u64);
    let theta = &cfg.theta;
    let nf = theta.n_factors();
    let cid = center_id(k);
    let (lo, hi) = cfg.rooms_per_center;
    let n_rooms = rng.gen_range(lo..=hi.max(lo));
    let alpha = theta.sigma2_alpha.max(0.0).sqrt() * rng.sample::<f64, _>(StandardNormal);
    let s_eps = theta.sigma2_eps.max(0.0).sqrt();

    let mut draw = CenterDraw {
        rows: Vec::new(),
        infos: Vec::new(),
        truth: Vec::new(),
        alpha,
        covariates: Vec::new(),
        outcomes: Vec::new(),
    };
    for j in 0..n_rooms {
        let class_id = format!("{cid}-R{}", j + 1);
        let group = if rng.gen_bool(cfg.infant_share.clamp(0.0, 1.0)) {
            AgeGroup::Infant
        } else {
            AgeGroup::Toddler
        };
        let z = DVector::from_fn(nf, |_, _| rng.sample::<f64, _>(StandardNormal));
        let eta = psi_sqrt * z;
        for i in catalog.permitted_items(group) {
            let keep = i == catalog.anchor_of(0) || !rng.gen_bool(cfg.item_drop.clamp(0.0, 1.0));
            let e: f64 = rng.sample(StandardNormal);
            if !keep {
                continue;
            }
            let signal: f64 = (0..nf).map(|f| theta.lambda[(i, f)] * eta[f]).sum();
            draw.rows.push(Observation {
                center_id: cid.clone(),
                class_id: class_id.clone(),
                item_id: catalog.item(i).item_id.clone(),
                value: theta.beta[i] + signal + alpha + s_eps * e,
            });
        }
        draw.infos.push(ClassroomInfo {
            class_id: class_id.clone(),
            center_id: cid.clone(),
            group,
        });
        draw.truth.push(ClassroomTruth {
            class_id,
            center_id: cid.clone(),
            group,
            eta: eta.iter().copied().collect(),
        });
    }

    // stage-2 draws come after all measurement draws in the stream
    let om = &cfg.outcomes;
    let centers_u: Vec<f64> = om
        .outcomes
        .iter()
        .map(|o| o.center_sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    for t in &draw.truth {
        let eta = DVector::from_vec(t.eta.clone());
        let x: Vec<f64> = (0..om.covariate_names.len())
            .map(|c| {
                let signal = om.confounding.row(c).dot(&eta.transpose());
                signal + om.covariate_noise_sd * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let y: Vec<f64> = om
            .outcomes
            .iter()
            .zip(&centers_u)
            .map(|(o, &u)| {
                let dose: f64 = o.dose_effects.iter().zip(&t.eta).map(|(b, e)| b * e).sum();
                let cov: f64 = o.covariate_effects.iter().zip(&x).map(|(b, v)| b * v).sum();
                u + dose + cov + o.noise_sd * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        draw.covariates.push(x);
        draw.outcomes.push(y);
    }
    draw
}

fn check_config(cfg: &SimConfig, catalog: &ItemCatalog) -> Result<()> {
    let nf = catalog.n_factors();
    if cfg.theta.n_items() != catalog.n_items() || cfg.theta.n_factors() != nf {
        return Err(Error::DimensionMismatch("true parameters do not match the catalog".into()));
    }
    if cfg.n_centers == 0 || cfg.rooms_per_center.0 == 0 {
        return Err(Error::Config("simulation needs at least one center and classroom".into()));
    }
    let om = &cfg.outcomes;
    if om.confounding.shape() != (om.covariate_names.len(), nf) {
        return Err(Error::DimensionMismatch("confounding map must be covariates x factors".into()));
    }
    for o in &om.outcomes {
        if o.dose_effects.len() != nf || o.covariate_effects.len() != om.covariate_names.len() {
            return Err(Error::DimensionMismatch(format!("effect vectors of outcome {}", o.name)));
        }
    }
    Ok(())
}

fn draw_all(cfg: &SimConfig, catalog: &ItemCatalog) -> Result<Vec<CenterDraw>> {
    check_config(cfg, catalog)?;
    let psi_sqrt = symmetric_sqrt(&cfg.theta.psi2);
    Ok((0..cfg.n_centers)
        .into_par_iter()
        .map(|k| draw_center(cfg, catalog, &psi_sqrt, k))
        .collect())
}

fn frame_and_truth(draws: &[CenterDraw]) -> Result<(ObservationFrame, SimTruth)> {
    let mut rows = Vec::new();
    let mut infos = Vec::new();
    let mut truth = SimTruth::default();
    for d in draws {
        rows.extend(d.rows.iter().cloned());
        infos.extend(d.infos.iter().cloned());
        truth.classrooms.extend(d.truth.iter().cloned());
        if let Some(t) = d.truth.first() {
            truth.centers.push((t.center_id.clone(), d.alpha));
        }
    }
    Ok((ObservationFrame::new(rows, infos)?, truth))
}

/// Draws center intercepts, classroom factors and item scores; only
/// design-permitted rows are emitted.
pub fn simulate_measurement(cfg: &SimConfig, catalog: &ItemCatalog) -> Result<(ObservationFrame, SimTruth)> {
    frame_and_truth(&draw_all(cfg, catalog)?)
}

/// Measurement data plus confounded covariates and classroom outcomes.
pub fn simulate(cfg: &SimConfig, catalog: &ItemCatalog) -> Result<SimData> {
    let draws = draw_all(cfg, catalog)?;
    let (frame, truth) = frame_and_truth(&draws)?;
    let class_ids: Vec<String> = truth.classrooms.iter().map(|t| t.class_id.clone()).collect();
    let center_ids: Vec<String> = truth.classrooms.iter().map(|t| t.center_id.clone()).collect();
    let n = class_ids.len();
    let om = &cfg.outcomes;
    let flat = |f: fn(&CenterDraw) -> &Vec<Vec<f64>>, width: usize| {
        let mut m = DMatrix::zeros(n, width);
        let mut r = 0;
        for d in &draws {
            for row in f(d) {
                for (c, v) in row.iter().enumerate() {
                    m[(r, c)] = *v;
                }
                r += 1;
            }
        }
        m
    };
    let covariates = ClassroomTable::new(
        om.covariate_names.clone(),
        class_ids.clone(),
        None,
        flat(|d| &d.covariates, om.covariate_names.len()),
    )?;
    let outcomes = ClassroomTable::new(
        om.outcomes.iter().map(|o| o.name.clone()).collect(),
        class_ids,
        Some(center_ids),
        flat(|d| &d.outcomes, om.outcomes.len()),
    )?;
    Ok(SimData {
        frame,
        truth,
        covariates,
        outcomes,
    })
}

/// Serializable simulation settings with defaults shaped like the six-factor
/// configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSettings {
    pub n_centers: usize,
    pub rooms_min: usize,
    pub rooms_max: usize,
    pub infant_share: f64,
    pub item_drop: f64,
    /// Loading of every non-anchor item.
    pub loading: f64,
    pub psi_diag: f64,
    pub psi_offdiag: f64,
    pub sigma2_alpha: f64,
    pub sigma2_eps: f64,
    pub n_covariates: usize,
    /// Loading of every covariate on every factor.
    pub confounding: f64,
    pub outcomes: Vec<OutcomeSpec>,
}

impl Default for SimSettings {
    fn default() -> Self {
        let outcome = |name: &str, effects: [f64; 6], cov: [f64; 4]| OutcomeSpec {
            name: name.into(),
            dose_effects: effects.to_vec(),
            covariate_effects: cov.to_vec(),
            center_sd: 1.0,
            noise_sd: 0.5,
        };
        Self {
            n_centers: 150,
            rooms_min: 1,
            rooms_max: 3,
            infant_share: 0.4,
            item_drop: 0.02,
            loading: 0.8,
            psi_diag: 1.0,
            psi_offdiag: 0.5,
            sigma2_alpha: 0.2,
            sigma2_eps: 0.35,
            n_covariates: 4,
            confounding: 0.3,
            outcomes: vec![
                outcome("cdi_irt", [0.0, 0.6, 0.6, 0.0, 0.0, 0.0], [0.5, -0.3, 0.2, 0.0]),
                outcome("bitsea_competence", [0.0, 0.0, 0.0, 0.5, 0.0, 0.0], [0.3, 0.0, -0.2, 0.1]),
                outcome("bitsea_problem", [0.0; 6], [-0.2, 0.2, 0.0, 0.3]),
            ],
        }
    }
}

impl SimSettings {
    pub fn to_config(&self, catalog: &ItemCatalog, seed: u64) -> Result<SimConfig> {
        let ni = catalog.n_items();
        let nf = catalog.n_factors();
        let mut psi = DMatrix::from_element(nf, nf, self.psi_offdiag);
        psi.fill_diagonal(self.psi_diag);
        let theta = ParameterSet::from_loadings(
            ConstraintMeta::from_catalog(catalog),
            DVector::zeros(ni),
            &vec![self.loading; ni],
            psi,
            self.sigma2_alpha,
            self.sigma2_eps,
        )?;
        let q = self.n_covariates;
        let outcomes = self
            .outcomes
            .iter()
            .map(|o| {
                let mut o = o.clone();
                o.dose_effects.resize(nf, 0.0);
                o.covariate_effects.resize(q, 0.0);
                o
            })
            .collect();
        Ok(SimConfig {
            n_centers: self.n_centers,
            rooms_per_center: (self.rooms_min, self.rooms_max),
            infant_share: self.infant_share,
            item_drop: self.item_drop,
            theta,
            outcomes: OutcomeModel {
                covariate_names: (1..=q).map(|c| format!("x{c}")).collect(),
                confounding: DMatrix::from_element(q, nf, self.confounding),
                covariate_noise_sd: 1.0,
                outcomes,
            },
            seed,
        })
    }
}

/// KL-minimal feasible weights for a balance problem by an infeasible-start
/// Newton method on the primal KKT system. Builds its own constraint rows
/// and uses no code from the dual solver; intended for small test instances.
pub fn primal_balance_oracle(problem: &crate::balance::BalanceProblem) -> Result<DVector<f64>> {
    let n = problem.dose.len();
    let q = problem.covariates.ncols();
    let p = problem.poly_order;
    let base = &problem.base_weights;
    let mean = |v: &[f64]| v.iter().zip(base.iter()).map(|(a, b)| a * b).sum::<f64>();
    let dose: Vec<f64> = problem.dose.iter().copied().collect();
    let dbar = mean(&dose);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut xc: Vec<Vec<f64>> = Vec::new();
    for c in 0..q {
        let col: Vec<f64> = (0..n).map(|i| problem.covariates[(i, c)]).collect();
        let t = problem.targets.as_ref().map_or_else(|| mean(&col), |t| t[c]);
        xc.push(col.iter().map(|v| v - t).collect());
    }
    rows.extend(xc.iter().cloned());
    let mut powers = Vec::new();
    for r in 1..=p {
        let pw: Vec<f64> = dose.iter().map(|d| (d - dbar).powi(r as i32)).collect();
        let m = mean(&pw);
        rows.push(pw.iter().map(|v| v - m).collect());
        powers.push(pw);
    }
    for pw in &powers {
        for x in &xc {
            rows.push(x.iter().zip(pw).map(|(a, b)| a * b).collect());
        }
    }
    // equality system A w = b: balance rows plus normalization
    let m = rows.len() + 1;
    let mut a = DMatrix::zeros(m, n);
    for (r, row) in rows.iter().enumerate() {
        for i in 0..n {
            a[(r, i)] = row[i];
        }
    }
    a.row_mut(m - 1).fill(1.0);
    let mut b = DVector::zeros(m);
    b[m - 1] = 1.0;

    let mut w = base.clone();
    let mut nu = DVector::zeros(m);
    let residual = |w: &DVector<f64>, nu: &DVector<f64>| {
        let rd = DVector::from_fn(n, |i, _| (w[i] / base[i]).ln() + 1.0) + a.transpose() * nu;
        let rp = &a * w - &b;
        (rd, rp)
    };
    for _ in 0..500 {
        let (rd, rp) = residual(&w, &nu);
        let norm = (rd.norm_squared() + rp.norm_squared()).sqrt();
        if rp.amax() < 1e-13 && rd.amax() < 1e-11 {
            return Ok(w);
        }
        let mut kkt = DMatrix::zeros(n + m, n + m);
        for i in 0..n {
            kkt[(i, i)] = 1.0 / w[i];
        }
        kkt.view_mut((0, n), (n, m)).copy_from(&a.transpose());
        kkt.view_mut((n, 0), (m, n)).copy_from(&a);
        let mut rhs = DVector::zeros(n + m);
        rhs.rows_mut(0, n).copy_from(&(-&rd));
        rhs.rows_mut(n, m).copy_from(&(-&rp));
        let step = kkt
            .lu()
            .solve(&rhs)
            .ok_or(Error::InfeasibleConstraints { residual: rp.amax() })?;
        let dw = step.rows(0, n).into_owned();
        let dnu = step.rows(n, m).into_owned();
        // stay strictly positive, then backtrack on the residual norm
        let mut t: f64 = 1.0;
        for i in 0..n {
            if dw[i] < 0.0 {
                t = t.min(-0.99 * w[i] / dw[i]);
            }
        }
        loop {
            let wt = &w + &dw * t;
            let nt = &nu + &dnu * t;
            let (a1, a2) = residual(&wt, &nt);
            if (a1.norm_squared() + a2.norm_squared()).sqrt() <= (1.0 - 0.01 * t) * norm {
                w = wt;
                nu = nt;
                break;
            }
            t *= 0.5;
            if t < 1e-14 {
                return Err(Error::InfeasibleConstraints { residual: rp.amax() });
            }
        }
    }
    let (_, rp) = residual(&w, &nu);
    Err(Error::InfeasibleConstraints { residual: rp.amax() })
}

/// Posterior of all random effects of one center, ordered as the factor
/// vectors of each classroom followed by the center intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseConditioning {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Builds the joint covariance of (random effects, observed items) of one
/// center element by element and conditions on the items by inverting the
/// joint matrix.
pub fn dense_conditioning_oracle(theta: &ParameterSet, center: &CenterBlock) -> Result<DenseConditioning> {
    let nf = theta.n_factors();
    let nj = center.classrooms.len();
    let m = nf * nj + 1;
    let mut rows: Vec<(usize, usize, f64)> = Vec::new(); // (classroom, item, residual)
    for (j, room) in center.classrooms.iter().enumerate() {
        for (&i, &y) in room.items.iter().zip(&room.values) {
            rows.push((j, i, y - theta.beta[i]));
        }
    }
    let n = rows.len();
    let t = m + n;
    let mut s = DMatrix::<f64>::zeros(t, t);
    for j in 0..nj {
        for f in 0..nf {
            for g in 0..nf {
                s[(j * nf + f, j * nf + g)] = theta.psi2[(f, g)];
            }
        }
    }
    s[(m - 1, m - 1)] = theta.sigma2_alpha;
    for (r, &(j, i, _)) in rows.iter().enumerate() {
        // Cov(y_r, eta_j) = lambda_i^T Psi ; Cov(y_r, alpha) = sigma2_alpha
        for g in 0..nf {
            let mut c = 0.0;
            for f in 0..nf {
                c += theta.lambda[(i, f)] * theta.psi2[(f, g)];
            }
            s[(m + r, j * nf + g)] = c;
            s[(j * nf + g, m + r)] = c;
        }
        s[(m + r, m - 1)] = theta.sigma2_alpha;
        s[(m - 1, m + r)] = theta.sigma2_alpha;
        for (q, &(j2, i2, _)) in rows.iter().enumerate() {
            let mut c = theta.sigma2_alpha;
            if j == j2 {
                for f in 0..nf {
                    for g in 0..nf {
                        c += theta.lambda[(i, f)] * theta.psi2[(f, g)] * theta.lambda[(i2, g)];
                    }
                }
            }
            if r == q {
                c += theta.sigma2_eps;
            }
            s[(m + r, m + q)] = c;
        }
    }
    let resid = DVector::from_iterator(n, rows.iter().map(|r| r.2));

    if theta.sigma2_alpha > 0.0 {
        if let Some(p) = s.clone().lu().try_inverse() {
            // b | y ~ N(-P_bb^{-1} P_by r, P_bb^{-1})
            let pbb = p.view((0, 0), (m, m)).into_owned();
            let pby = p.view((0, m), (m, n)).into_owned();
            if let Some(pbb_inv) = pbb.lu().try_inverse() {
                let mean = -(&pbb_inv * (pby * &resid));
                return Ok(DenseConditioning { mean, cov: symmetrized(pbb_inv) });
            }
        }
    }
    // degenerate prior: condition through the observed block instead
    let syy = s.view((m, m), (n, n)).into_owned();
    let sby = s.view((0, m), (m, n)).into_owned();
    let lu = syy.lu();
    let w = lu
        .solve(&sby.transpose())
        .ok_or_else(|| Error::SingularCovariance { center_id: center.center_id.clone() })?;
    let mean = w.transpose() * &resid;
    let cov = s.view((0, 0), (m, m)).into_owned() - &sby * w;
    Ok(DenseConditioning { mean, cov: symmetrized(cov) })
}

fn symmetrized(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}
