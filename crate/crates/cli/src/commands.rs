use std::path::PathBuf;

use classdose_core::drf::{drf_pipeline, factor_weights, FactorWeights};
use classdose_core::eb::{eb_predict, FactorScoreSet};
use classdose_core::ident::{block_factors, ci_completion, feasibility_check, BlockPartition, Feasibility};
use classdose_core::io::{self, FittedModelRecord};
use classdose_core::sim::simulate;
use classdose_core::vpc::{factor_correlations, item_vpc, NOT_IDENTIFIED};
use classdose_core::{
    assemble_design, fit_ml, ClassroomTable, DesignBundle, Error, FitOptions, FittedModel, ItemCatalog,
    ObservationFrame, Result,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::artifacts::{require, Run};
use crate::config::RunConfig;

pub const MODEL: &str = "fit/model.json";
pub const SCORES: &str = "scores/classroom_scores.csv";
pub const CENTER_SCORES: &str = "scores/center_scores.csv";

pub struct Ctx {
    pub cfg: RunConfig,
    pub catalog: ItemCatalog,
}

impl Ctx {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let catalog = match &cfg.paths.catalog {
            Some(p) => ItemCatalog::load(p)?,
            None => ItemCatalog::default_six_factor(),
        };
        Ok(Self { cfg, catalog })
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.cfg.paths.out.join(rel)
    }

    /// Input path that is either configured explicitly or expected from a
    /// `simulate` run.
    fn input(&self, path: PathBuf, configured: bool, key: &str) -> Result<PathBuf> {
        if !configured {
            require(
                &path,
                &format!("set paths.{key} in the config, or run `classdose simulate` with the same --out to create it"),
            )?;
        }
        Ok(path)
    }

    fn items(&self) -> Result<PathBuf> {
        self.input(self.cfg.items_path(), self.cfg.paths.items.is_some(), "items")
    }

    fn classrooms(&self) -> Result<PathBuf> {
        self.input(self.cfg.classrooms_path(), self.cfg.paths.classrooms.is_some(), "classrooms")
    }

    fn covariates(&self) -> Result<ClassroomTable> {
        let p = self.input(self.cfg.covariates_path(), self.cfg.paths.covariates.is_some(), "covariates")?;
        io::read_table(&p)
    }

    fn outcomes(&self) -> Result<ClassroomTable> {
        let p = self.input(self.cfg.outcomes_path(), self.cfg.paths.outcomes.is_some(), "outcomes")?;
        io::read_table(&p)
    }

    /// Reverse-coded, standardized frame and its design bundle.
    fn design(&self) -> Result<(ObservationFrame, DesignBundle)> {
        let rows = io::read_items(&self.items()?)?;
        let rooms = io::read_classrooms(&self.classrooms()?)?;
        let frame = ObservationFrame::new(rows, rooms)?
            .apply_reverse_coding(&self.catalog)
            .standardize_items()?;
        let bundle = assemble_design(&frame, &self.catalog)?;
        Ok((frame, bundle))
    }

    fn factor_names(&self) -> Vec<String> {
        self.catalog.factor_names()
    }
}

pub fn cmd_fit(ctx: &Ctx, run: &mut Run) -> Result<(FittedModel, DesignBundle)> {
    let (frame, bundle) = ctx.design()?;
    let opts = FitOptions {
        seed: ctx.cfg.seed,
        ..ctx.cfg.fit
    };
    let model = fit_ml(&bundle, &ctx.catalog, &opts)?;
    run.json(MODEL, &FittedModelRecord::new(&model, &ctx.catalog, frame.standardization()))?;
    run.csv(
        "fit/parameters.csv",
        &io::PARAM_COLUMNS,
        &io::params_rows(&model.theta_hat, &ctx.catalog),
    )?;
    let kv = |k: &str, v: String| vec![k.to_string(), v];
    run.csv(
        "fit/convergence.csv",
        &["quantity", "value"],
        &[
            kv("loglik", io::num(Some(model.loglik))),
            kv("converged", model.converged.to_string()),
            kv("iterations", model.iterations.to_string()),
            kv("gradient_norm", io::num(Some(model.gradient_norm))),
            kv("vk_condition_min", io::num(Some(model.vk_condition_min))),
            kv("vk_condition_max", io::num(Some(model.vk_condition_max))),
            kv("alpha_boundary", model.alpha_boundary.to_string()),
            kv("n_centers", bundle.centers.len().to_string()),
        ],
    )?;
    if !model.converged {
        run.flag(format!(
            "fit did not converge after {} iterations (gradient norm {:e})",
            model.iterations, model.gradient_norm
        ));
    }
    Ok((model, bundle))
}

/// Fitted model from a previous `fit`, checked against the current inputs.
pub fn load_model(ctx: &Ctx) -> Result<(FittedModel, DesignBundle)> {
    let path = ctx.out(MODEL);
    require(&path, "run `classdose fit` with the same --out first")?;
    let record: FittedModelRecord = io::read_json(&path)?;
    let model = record.to_model(&ctx.catalog)?;
    let (frame, bundle) = ctx.design()?;
    if frame.standardization() != &record.standardization {
        return Err(Error::Config(format!(
            "item data differ from the data {} was fitted on; rerun `classdose fit`",
            path.display()
        )));
    }
    Ok((model, bundle))
}

pub fn cmd_scores(ctx: &Ctx, run: &mut Run, model: &FittedModel, bundle: &DesignBundle) -> Result<FactorScoreSet> {
    let scores = eb_predict(model, bundle)?;
    run.csv(SCORES, &io::SCORE_COLUMNS, &io::score_rows(&scores, &ctx.factor_names()))?;
    run.csv(CENTER_SCORES, &io::CENTER_SCORE_COLUMNS, &io::center_score_rows(&scores))?;
    Ok(scores)
}

pub fn load_scores(ctx: &Ctx) -> Result<FactorScoreSet> {
    let (s, c) = (ctx.out(SCORES), ctx.out(CENTER_SCORES));
    let remedy = "run `classdose scores` with the same --out first";
    require(&s, remedy)?;
    require(&c, remedy)?;
    io::read_scores(&s, &c, &ctx.factor_names())
}

pub fn cmd_decompose(ctx: &Ctx, run: &mut Run, model: &FittedModel) -> Result<()> {
    let theta = &model.theta_hat;
    let names = ctx.factor_names();
    let table = item_vpc(theta, &ctx.catalog, None)?;
    run.csv("decompose/item_vpc.csv", &io::VPC_COLUMNS, &io::vpc_rows(&table, &names))?;
    run.csv(
        "decompose/vpc_summary.csv",
        &["level", "mean_share"],
        &[
            vec!["replicate".into(), io::num(Some(table.pi1_bar))],
            vec!["classroom".into(), io::num(Some(table.pi2_bar))],
            vec!["center".into(), io::num(Some(table.pi3_bar))],
        ],
    )?;
    let corr = factor_correlations(theta)?;
    let mut cols = vec!["factor".to_string()];
    cols.extend(names.iter().cloned());
    run.csv("decompose/factor_correlations.csv", &cols, &io::matrix_rows(&corr.matrix, &names))?;
    let mut notes = Vec::new();
    for f in 0..names.len() {
        for g in 0..f {
            if let Some(a) = corr.annotation(f, g) {
                notes.push(vec![names[f].clone(), names[g].clone(), a.to_string()]);
            }
        }
    }
    run.csv("decompose/correlation_notes.csv", &["factor_a", "factor_b", "note"], &notes)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct CrossPair {
    toddler_factor: String,
    infant_factor: String,
    fitted_covariance: f64,
    fitted_correlation: f64,
    ci_covariance: f64,
    ci_correlation: f64,
    note: &'static str,
}

#[derive(Debug, Serialize)]
struct IdentifyReport {
    fitted: Feasibility,
    ci_completion: Feasibility,
    pairs: Vec<CrossPair>,
}

pub fn cmd_identify(ctx: &Ctx, run: &mut Run, model: &FittedModel) -> Result<()> {
    let psi = &model.theta_hat.psi2;
    let names = ctx.factor_names();
    let mut p = BlockPartition::from_psi(psi, &ctx.catalog)?;
    let fitted = feasibility_check(&p)?;
    let ci = ci_completion(&p)?;
    p.f = ci.clone();
    let at_ci = feasibility_check(&p)?;
    let [_, t, i] = block_factors(&ctx.catalog);
    let sd = |f: usize| psi[(f, f)].sqrt();
    let mut pairs = Vec::new();
    for (r, &ft) in t.iter().enumerate() {
        for (c, &fi) in i.iter().enumerate() {
            pairs.push(CrossPair {
                toddler_factor: names[ft].clone(),
                infant_factor: names[fi].clone(),
                fitted_covariance: psi[(ft, fi)],
                fitted_correlation: psi[(ft, fi)] / (sd(ft) * sd(fi)),
                ci_covariance: ci[(r, c)],
                ci_correlation: ci[(r, c)] / (sd(ft) * sd(fi)),
                note: NOT_IDENTIFIED,
            });
        }
    }
    if !fitted.feasible {
        run.flag(format!("fitted factor covariance is {:?} (margin {:e})", fitted.classification, fitted.margin));
    }
    run.json(
        "identify/feasibility.json",
        &IdentifyReport {
            fitted,
            ci_completion: at_ci,
            pairs,
        },
    )
}

pub fn cmd_balance(ctx: &Ctx, run: &mut Run, scores: &FactorScoreSet) -> Result<()> {
    let cov = ctx.covariates()?;
    let cfg = ctx.cfg.drf_config();
    let names = ctx.factor_names();
    let results: Vec<(String, Result<FactorWeights>)> = names
        .par_iter()
        .enumerate()
        .map(|(f, n)| (n.clone(), factor_weights(scores, f, n, Some(&cov), &cfg)))
        .collect();
    let (mut weights, mut balance, mut summary, mut failures) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (name, r) in results {
        match r {
            Ok(fw) => {
                weights.extend(io::weight_rows(&fw));
                balance.extend(io::balance_rows(&fw));
                summary.push(io::balance_summary_row(&fw));
            }
            Err(e) => {
                run.flag(format!("balancing failed for {name}: {e}"));
                failures.push(vec![name, e.to_string()]);
            }
        }
    }
    run.csv("balance/weights.csv", &io::WEIGHT_COLUMNS, &weights)?;
    run.csv("balance/balance.csv", &io::BALANCE_COLUMNS, &balance)?;
    run.csv("balance/summary.csv", &io::BALANCE_SUMMARY_COLUMNS, &summary)?;
    run.csv("balance/failures.csv", &["factor", "reason"], &failures)
}

pub fn cmd_drf(ctx: &Ctx, run: &mut Run, scores: &FactorScoreSet) -> Result<()> {
    let outcomes = ctx.outcomes()?;
    let cov = ctx.covariates()?;
    let result = drf_pipeline(scores, &ctx.factor_names(), &outcomes, Some(&cov), &ctx.cfg.drf_config())?;
    run.csv("drf/estimates.csv", &io::ESTIMATE_COLUMNS, &io::estimate_rows(&result))?;
    let summary: Vec<Vec<String>> = result.weights.iter().map(io::balance_summary_row).collect();
    run.csv("drf/balance_summary.csv", &io::BALANCE_SUMMARY_COLUMNS, &summary)?;
    let skipped: Vec<Vec<String>> = result
        .skipped
        .iter()
        .map(|s| vec![s.response.clone(), s.dose.clone(), s.reason.clone()])
        .collect();
    run.csv("drf/skipped.csv", &["response", "dose", "reason"], &skipped)?;
    for s in &result.skipped {
        run.flag(format!("skipped {} on {}: {}", s.response, s.dose, s.reason));
    }
    for cell in &result.cells {
        let stem = format!("drf/curves/{}__{}", io::slug(&cell.row.response), io::slug(&cell.row.dose));
        run.csv(
            &format!("{stem}__linear.csv"),
            &io::CURVE_COLUMNS,
            &io::curve_rows(&cell.linear.curve),
        )?;
        if let Some(g) = &cell.gam {
            run.csv(&format!("{stem}__gam.csv"), &io::CURVE_COLUMNS, &io::curve_rows(&g.curve))?;
        }
        if let Some(e) = &cell.gam_error {
            run.flag(format!("no spline fit for {} on {}: {e}", cell.row.response, cell.row.dose));
        }
    }
    Ok(())
}

pub fn cmd_simulate(ctx: &Ctx, run: &mut Run) -> Result<()> {
    let cfg = ctx.cfg.simulate.to_config(&ctx.catalog, ctx.cfg.seed)?;
    let data = simulate(&cfg, &ctx.catalog)?;
    run.csv("data/items.csv", &io::ITEM_COLUMNS, &io::items_rows(data.frame.rows()))?;
    run.csv(
        "data/classrooms.csv",
        &io::CLASSROOM_COLUMNS,
        &io::classroom_rows(data.frame.classrooms()),
    )?;
    run.table("data/covariates.csv", &data.covariates)?;
    run.table("data/outcomes.csv", &data.outcomes)?;
    run.csv(
        "data/truth_classrooms.csv",
        &io::truth_classroom_columns(&ctx.factor_names()),
        &io::truth_classroom_rows(&data.truth),
    )?;
    run.csv(
        "data/truth_centers.csv",
        &io::TRUTH_CENTER_COLUMNS,
        &io::truth_center_rows(&data.truth),
    )?;
    run.commented("data/catalog.toml", &ctx.catalog.to_toml_string())
}

/// fit, scores, decompose, identify, balance and drf in one run.
pub fn cmd_pipeline(ctx: &Ctx, run: &mut Run) -> Result<()> {
    let (model, bundle) = cmd_fit(ctx, run)?;
    let scores = cmd_scores(ctx, run, &model, &bundle)?;
    cmd_decompose(ctx, run, &model)?;
    cmd_identify(ctx, run, &model)?;
    cmd_balance(ctx, run, &scores)?;
    cmd_drf(ctx, run, &scores)
}
