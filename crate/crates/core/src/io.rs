//! CSV and JSON readers and writers for every exchanged table. Lines starting
//! with `#` are comments; missing numeric cells are `NA` or empty.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::balance::{balance_table, max_weighted_abs_corr, pseudo_drf_flatness};
use crate::drf::{CurvePoint, DrfResult, FactorWeights};
use crate::eb::{CenterScore, ClassroomScore, FactorScoreSet};
use crate::error::{Error, Result};
use crate::likelihood::FittedModel;
use crate::model::{AgeGroup, ClassroomInfo, ConstraintMeta, ItemCatalog, ItemScale, Observation, ParameterSet};
use crate::sim::SimTruth;
use crate::table::ClassroomTable;
use crate::vpc::VpcTable;

pub const NA: &str = "NA";

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn headers(rdr: &mut csv::Reader<std::fs::File>, path: &Path) -> Result<Vec<String>> {
    Ok(rdr
        .headers()
        .map_err(|e| Error::parse(path, e))?
        .iter()
        .map(str::to_string)
        .collect())
}

fn require(cols: &[String], name: &str, path: &Path) -> Result<usize> {
    cols.iter()
        .position(|c| c == name)
        .ok_or_else(|| Error::parse(path, format!("missing column {name}")))
}

fn parse_num(s: &str, path: &Path, line: u64) -> Result<f64> {
    if s.is_empty() || s == NA {
        return Ok(f64::NAN);
    }
    s.parse::<f64>()
        .map_err(|_| Error::parse(path, format!("line {line}: not a number: {s}")))
}

fn records(rdr: &mut csv::Reader<std::fs::File>, path: &Path) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        out.push((line, rec));
    }
    Ok(out)
}

/// Long-format item scores: `center_id, class_id, item_id, value`.
pub fn read_items(path: &Path) -> Result<Vec<Observation>> {
    let mut rdr = reader(path)?;
    let cols = headers(&mut rdr, path)?;
    let (c, k, i, v) = (
        require(&cols, "center_id", path)?,
        require(&cols, "class_id", path)?,
        require(&cols, "item_id", path)?,
        require(&cols, "value", path)?,
    );
    let mut rows = Vec::new();
    for (line, rec) in records(&mut rdr, path)? {
        let value = parse_num(&rec[v], path, line)?;
        if value.is_nan() {
            continue;
        }
        rows.push(Observation {
            center_id: rec[c].to_string(),
            class_id: rec[k].to_string(),
            item_id: rec[i].to_string(),
            value,
        });
    }
    Ok(rows)
}

/// Classroom table: `class_id, center_id, age_group`.
pub fn read_classrooms(path: &Path) -> Result<Vec<ClassroomInfo>> {
    let mut rdr = reader(path)?;
    let cols = headers(&mut rdr, path)?;
    let (k, c, g) = (
        require(&cols, "class_id", path)?,
        require(&cols, "center_id", path)?,
        require(&cols, "age_group", path)?,
    );
    records(&mut rdr, path)?
        .into_iter()
        .map(|(line, rec)| {
            let group = AgeGroup::parse(&rec[g])
                .ok_or_else(|| Error::parse(path, format!("line {line}: unknown age group {}", &rec[g])))?;
            Ok(ClassroomInfo {
                class_id: rec[k].to_string(),
                center_id: rec[c].to_string(),
                group,
            })
        })
        .collect()
}

/// Numeric classroom columns keyed by `class_id`, with an optional
/// `center_id` column.
pub fn read_table(path: &Path) -> Result<ClassroomTable> {
    let mut rdr = reader(path)?;
    let cols = headers(&mut rdr, path)?;
    let k = require(&cols, "class_id", path)?;
    let c = cols.iter().position(|n| n == "center_id");
    let value_cols: Vec<usize> = (0..cols.len()).filter(|&j| j != k && Some(j) != c).collect();
    let recs = records(&mut rdr, path)?;
    let mut ids = Vec::with_capacity(recs.len());
    let mut centers = Vec::with_capacity(recs.len());
    let mut values = DMatrix::from_element(recs.len(), value_cols.len(), f64::NAN);
    for (r, (line, rec)) in recs.iter().enumerate() {
        ids.push(rec[k].to_string());
        if let Some(c) = c {
            centers.push(rec[c].to_string());
        }
        for (j, &col) in value_cols.iter().enumerate() {
            values[(r, j)] = parse_num(&rec[col], path, *line)?;
        }
    }
    let names = value_cols.iter().map(|&j| cols[j].clone()).collect();
    ClassroomTable::new(names, ids, c.map(|_| centers), values).map_err(|e| Error::parse(path, e))
}

/// Plain rendering of a number; `None` and non-finite values become `NA`.
pub fn num(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x}"),
        _ => NA.to_string(),
    }
}

fn quote(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// CSV text with an optional leading comment line.
pub fn csv_text(header: Option<&str>, columns: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = String::new();
    if let Some(h) = header {
        let _ = writeln!(s, "# {h}");
    }
    let _ = writeln!(s, "{}", columns.iter().map(|c| quote(c)).collect::<Vec<_>>().join(","));
    for r in rows {
        let _ = writeln!(s, "{}", r.iter().map(|c| quote(c)).collect::<Vec<_>>().join(","));
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_csv(path: &Path, header: Option<&str>, columns: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_text(path, &csv_text(header, columns, rows))
}

pub fn items_rows(rows: &[Observation]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|o| vec![o.center_id.clone(), o.class_id.clone(), o.item_id.clone(), num(Some(o.value))])
        .collect()
}

pub const ITEM_COLUMNS: [&str; 4] = ["center_id", "class_id", "item_id", "value"];
pub const CLASSROOM_COLUMNS: [&str; 3] = ["class_id", "center_id", "age_group"];

pub fn classroom_rows<'a>(rooms: impl Iterator<Item = &'a ClassroomInfo>) -> Vec<Vec<String>> {
    rooms
        .map(|c| vec![c.class_id.clone(), c.center_id.clone(), c.group.to_string()])
        .collect()
}

/// `class_id[, center_id], columns...`.
pub fn table_text(header: Option<&str>, table: &ClassroomTable) -> String {
    let mut cols: Vec<&str> = vec!["class_id"];
    if table.center_ids.is_some() {
        cols.push("center_id");
    }
    cols.extend(table.columns.iter().map(String::as_str));
    let rows: Vec<Vec<String>> = (0..table.n_rows())
        .map(|r| {
            let mut row = vec![table.class_ids[r].clone()];
            if let Some(c) = &table.center_ids {
                row.push(c[r].clone());
            }
            row.extend(table.values.row(r).iter().map(|v| num(Some(*v))));
            row
        })
        .collect();
    csv_text(header, &cols, &rows)
}

/// Long-form parameter table: `parameter, index, estimate`.
pub fn params_rows(theta: &ParameterSet, catalog: &ItemCatalog) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    let names = catalog.factor_names();
    for i in 0..theta.n_items() {
        rows.push(vec!["beta".into(), catalog.item(i).item_id.clone(), num(Some(theta.beta[i]))]);
    }
    for i in 0..theta.n_items() {
        let f = theta.meta.factor_of[i];
        rows.push(vec![
            "lambda".into(),
            format!("{}:{}", catalog.item(i).item_id, names[f]),
            num(Some(theta.lambda[(i, f)])),
        ]);
    }
    for f in 0..theta.n_factors() {
        for g in 0..=f {
            rows.push(vec![
                "psi".into(),
                format!("{}:{}", names[f], names[g]),
                num(Some(theta.psi2[(f, g)])),
            ]);
        }
    }
    rows.push(vec!["sigma2_alpha".into(), String::new(), num(Some(theta.sigma2_alpha))]);
    rows.push(vec!["sigma2_eps".into(), String::new(), num(Some(theta.sigma2_eps))]);
    rows
}

pub const PARAM_COLUMNS: [&str; 3] = ["parameter", "index", "estimate"];

/// Machine-readable fitted model, including the item standardization used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModelRecord {
    pub item_ids: Vec<String>,
    pub factor_names: Vec<String>,
    pub beta: Vec<f64>,
    /// Row-major `items x factors`.
    pub lambda: Vec<Vec<f64>>,
    pub psi2: Vec<Vec<f64>>,
    pub sigma2_alpha: f64,
    pub sigma2_eps: f64,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub vk_condition_min: f64,
    pub vk_condition_max: f64,
    pub alpha_boundary: bool,
    pub standardization: BTreeMap<String, ItemScale>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

impl FittedModelRecord {
    pub fn new(model: &FittedModel, catalog: &ItemCatalog, standardization: &BTreeMap<String, ItemScale>) -> Self {
        let t = &model.theta_hat;
        Self {
            item_ids: catalog.items().iter().map(|i| i.item_id.clone()).collect(),
            factor_names: catalog.factor_names(),
            beta: t.beta.iter().copied().collect(),
            lambda: rows_of(&t.lambda),
            psi2: rows_of(&t.psi2),
            sigma2_alpha: t.sigma2_alpha,
            sigma2_eps: t.sigma2_eps,
            loglik: model.loglik,
            converged: model.converged,
            iterations: model.iterations,
            gradient_norm: model.gradient_norm,
            vk_condition_min: model.vk_condition_min,
            vk_condition_max: model.vk_condition_max,
            alpha_boundary: model.alpha_boundary,
            standardization: standardization.clone(),
        }
    }

    pub fn to_model(&self, catalog: &ItemCatalog) -> Result<FittedModel> {
        let ni = catalog.n_items();
        let nf = catalog.n_factors();
        let ids: Vec<String> = catalog.items().iter().map(|i| i.item_id.clone()).collect();
        if self.item_ids != ids || self.factor_names != catalog.factor_names() {
            return Err(Error::DimensionMismatch("fitted model was produced with a different catalog".into()));
        }
        let mat = |rows: &[Vec<f64>], r: usize, c: usize| -> Result<DMatrix<f64>> {
            if rows.len() != r || rows.iter().any(|x| x.len() != c) {
                return Err(Error::DimensionMismatch("fitted model matrices have the wrong shape".into()));
            }
            Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
        };
        if self.beta.len() != ni {
            return Err(Error::DimensionMismatch("fitted model intercepts have the wrong length".into()));
        }
        let theta = ParameterSet {
            beta: DVector::from_column_slice(&self.beta),
            lambda: mat(&self.lambda, ni, nf)?,
            psi2: mat(&self.psi2, nf, nf)?,
            sigma2_alpha: self.sigma2_alpha,
            sigma2_eps: self.sigma2_eps,
            meta: ConstraintMeta::from_catalog(catalog),
        };
        theta.validate()?;
        Ok(FittedModel {
            theta_hat: theta,
            loglik: self.loglik,
            converged: self.converged,
            iterations: self.iterations,
            gradient_norm: self.gradient_norm,
            vk_condition_min: self.vk_condition_min,
            vk_condition_max: self.vk_condition_max,
            alpha_boundary: self.alpha_boundary,
        })
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}

pub fn json_text<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub const SCORE_COLUMNS: [&str; 8] = [
    "class_id",
    "center_id",
    "age_group",
    "factor_name",
    "eb_mean",
    "post_var",
    "directly_measured",
    "factor_index",
];
pub const CENTER_SCORE_COLUMNS: [&str; 3] = ["center_id", "alpha_eb", "alpha_post_var"];

pub fn score_rows(scores: &FactorScoreSet, factor_names: &[String]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for c in &scores.classrooms {
        for (f, name) in factor_names.iter().enumerate() {
            rows.push(vec![
                c.class_id.clone(),
                c.center_id.clone(),
                c.group.to_string(),
                name.clone(),
                num(Some(c.eta_eb[f])),
                num(Some(c.post_cov[(f, f)])),
                c.directly_measured[f].to_string(),
                (f + 1).to_string(),
            ]);
        }
    }
    rows
}

pub fn center_score_rows(scores: &FactorScoreSet) -> Vec<Vec<String>> {
    scores
        .centers
        .iter()
        .map(|c| vec![c.center_id.clone(), num(Some(c.alpha_eb)), num(Some(c.alpha_post_var))])
        .collect()
}

/// Reads long-format scores back. Only posterior variances survive the round
/// trip; off-diagonal posterior covariances are zero.
pub fn read_scores(path: &Path, centers_path: &Path, factor_names: &[String]) -> Result<FactorScoreSet> {
    let nf = factor_names.len();
    let mut rdr = reader(path)?;
    let cols = headers(&mut rdr, path)?;
    let idx: Vec<usize> = SCORE_COLUMNS[..7]
        .iter()
        .map(|c| require(&cols, c, path))
        .collect::<Result<_>>()?;
    let mut rooms: Vec<ClassroomScore> = Vec::new();
    let mut pos: BTreeMap<String, usize> = BTreeMap::new();
    for (line, rec) in records(&mut rdr, path)? {
        let f = factor_names
            .iter()
            .position(|n| n == &rec[idx[3]])
            .ok_or_else(|| Error::parse(path, format!("line {line}: unknown factor {}", &rec[idx[3]])))?;
        let id = rec[idx[0]].to_string();
        let r = *pos.entry(id.clone()).or_insert_with(|| {
            rooms.push(ClassroomScore {
                class_id: id.clone(),
                center_id: rec[idx[1]].to_string(),
                group: AgeGroup::parse(&rec[idx[2]]).unwrap_or(AgeGroup::Toddler),
                eta_eb: DVector::from_element(nf, f64::NAN),
                post_cov: DMatrix::zeros(nf, nf),
                directly_measured: vec![false; nf],
            });
            rooms.len() - 1
        });
        AgeGroup::parse(&rec[idx[2]])
            .ok_or_else(|| Error::parse(path, format!("line {line}: unknown age group {}", &rec[idx[2]])))?;
        rooms[r].eta_eb[f] = parse_num(&rec[idx[4]], path, line)?;
        rooms[r].post_cov[(f, f)] = parse_num(&rec[idx[5]], path, line)?;
        rooms[r].directly_measured[f] = match &rec[idx[6]] {
            "true" => true,
            "false" => false,
            other => return Err(Error::parse(path, format!("line {line}: not a boolean: {other}"))),
        };
    }
    if let Some(c) = rooms.iter().find(|c| c.eta_eb.iter().any(|v| v.is_nan())) {
        return Err(Error::parse(path, format!("incomplete scores for classroom {}", c.class_id)));
    }

    let mut rdr = reader(centers_path)?;
    let cols = headers(&mut rdr, centers_path)?;
    let cidx: Vec<usize> = CENTER_SCORE_COLUMNS
        .iter()
        .map(|c| require(&cols, c, centers_path))
        .collect::<Result<_>>()?;
    let centers = records(&mut rdr, centers_path)?
        .into_iter()
        .map(|(line, rec)| {
            Ok(CenterScore {
                center_id: rec[cidx[0]].to_string(),
                alpha_eb: parse_num(&rec[cidx[1]], centers_path, line)?,
                alpha_post_var: parse_num(&rec[cidx[2]], centers_path, line)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(FactorScoreSet { classrooms: rooms, centers })
}

pub const ESTIMATE_COLUMNS: [&str; 10] = [
    "response",
    "dose",
    "n",
    "estimate",
    "se",
    "p_value",
    "edf",
    "gam_p",
    "lambda_at_bound",
    "ess",
];

pub fn estimate_rows(result: &DrfResult) -> Vec<Vec<String>> {
    result
        .cells
        .iter()
        .map(|c| {
            let r = &c.row;
            vec![
                r.response.clone(),
                r.dose.clone(),
                r.n.to_string(),
                num(Some(r.estimate)),
                num(Some(r.se)),
                num(Some(r.p_value)),
                num(r.edf),
                num(r.gam_p),
                r.lambda_at_bound.to_string(),
                num(Some(r.ess)),
            ]
        })
        .collect()
}

pub const CURVE_COLUMNS: [&str; 4] = ["d", "fit", "lower", "upper"];

pub fn curve_rows(curve: &[CurvePoint]) -> Vec<Vec<String>> {
    curve
        .iter()
        .map(|p| vec![num(Some(p.d)), num(Some(p.fit)), num(Some(p.lower)), num(Some(p.upper))])
        .collect()
}

pub const VPC_COLUMNS: [&str; 9] = ["item_id", "factor", "lambda", "v1", "v2", "v3", "pi1", "pi2", "pi3"];

pub fn vpc_rows(table: &VpcTable, factor_names: &[String]) -> Vec<Vec<String>> {
    table
        .items
        .iter()
        .map(|it| {
            vec![
                it.item_id.clone(),
                factor_names[it.factor].clone(),
                num(Some(it.lambda)),
                num(Some(it.v1)),
                num(Some(it.v2)),
                num(Some(it.v3)),
                num(Some(it.pi1)),
                num(Some(it.pi2)),
                num(Some(it.pi3)),
            ]
        })
        .collect()
}

/// Square matrix with a leading `factor` column.
pub fn matrix_rows(m: &DMatrix<f64>, names: &[String]) -> Vec<Vec<String>> {
    (0..m.nrows())
        .map(|r| {
            let mut row = vec![names[r].clone()];
            row.extend(m.row(r).iter().map(|v| num(Some(*v))));
            row
        })
        .collect()
}

pub const WEIGHT_COLUMNS: [&str; 6] = ["factor", "class_id", "center_id", "dose", "weight", "method"];

pub fn weight_rows(fw: &FactorWeights) -> Vec<Vec<String>> {
    (0..fw.class_ids.len())
        .map(|i| {
            vec![
                fw.factor_name.clone(),
                fw.class_ids[i].clone(),
                fw.center_ids[i].clone(),
                num(Some(fw.dose[i])),
                num(Some(fw.weights.weights[i])),
                fw.weights.method.to_string(),
            ]
        })
        .collect()
}

pub const BALANCE_COLUMNS: [&str; 5] = ["factor", "covariate", "unweighted_corr", "weighted_corr", "pseudo_drf_slope"];

pub fn balance_rows(fw: &FactorWeights) -> Vec<Vec<String>> {
    let table = balance_table(&fw.weights, &fw.problem);
    let slopes = pseudo_drf_flatness(&fw.weights, &fw.problem);
    table
        .iter()
        .zip(slopes)
        .map(|(b, (_, s))| {
            vec![
                fw.factor_name.clone(),
                b.covariate.clone(),
                num(b.unweighted),
                num(b.weighted),
                num(s),
            ]
        })
        .collect()
}

pub const BALANCE_SUMMARY_COLUMNS: [&str; 10] = [
    "factor",
    "method",
    "n",
    "ess",
    "max_weight",
    "max_abs_balance_violation",
    "max_weighted_abs_corr",
    "pruned_constraints",
    "iterations",
    "trimmed",
];

pub fn balance_summary_row(fw: &FactorWeights) -> Vec<String> {
    let d = &fw.weights.diagnostics;
    let corr = max_weighted_abs_corr(&balance_table(&fw.weights, &fw.problem));
    vec![
        fw.factor_name.clone(),
        fw.weights.method.to_string(),
        fw.class_ids.len().to_string(),
        num(Some(d.ess)),
        num(Some(d.max_weight)),
        num(Some(d.max_abs_balance_violation)),
        num(Some(corr)),
        d.pruned.len().to_string(),
        d.iterations.to_string(),
        d.trimmed.to_string(),
    ]
}

pub fn truth_classroom_columns(factor_names: &[String]) -> Vec<String> {
    let mut c = vec!["class_id".to_string(), "center_id".into(), "age_group".into()];
    c.extend(factor_names.iter().map(|n| format!("eta_{n}")));
    c
}

pub fn truth_classroom_rows(truth: &SimTruth) -> Vec<Vec<String>> {
    truth
        .classrooms
        .iter()
        .map(|c| {
            let mut row = vec![c.class_id.clone(), c.center_id.clone(), c.group.to_string()];
            row.extend(c.eta.iter().map(|v| num(Some(*v))));
            row
        })
        .collect()
}

pub const TRUTH_CENTER_COLUMNS: [&str; 2] = ["center_id", "alpha"];

pub fn truth_center_rows(truth: &SimTruth) -> Vec<Vec<String>> {
    truth
        .centers
        .iter()
        .map(|(c, a)| vec![c.clone(), num(Some(*a))])
        .collect()
}

/// File-name-safe version of a label.
pub fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("classdose-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn items_round_trip_with_comments_and_missing() {
        let p = tmp("items.csv");
        std::fs::write(
            &p,
            "# produced by hand\ncenter_id,class_id,item_id,value\nC1,R1,a,1.5\nC1,R1,b,NA\nC1,R2,a,-0.25\n",
        )
        .unwrap();
        let rows = read_items(&p).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].value, -0.25);
        let text = csv_text(Some("hdr"), &ITEM_COLUMNS, &items_rows(&rows));
        write_text(&p, &text).unwrap();
        assert_eq!(read_items(&p).unwrap(), rows);
    }

    #[test]
    fn missing_column_and_file() {
        let p = tmp("bad.csv");
        std::fs::write(&p, "class_id,center_id\nR1,C1\n").unwrap();
        let e = read_classrooms(&p).unwrap_err();
        assert_eq!(e.kind(), "Parse");
        let missing = tmp("does-not-exist.csv");
        let e = read_items(&missing).unwrap_err();
        assert_eq!(e.path(), Some(missing.as_path()));
    }

    #[test]
    fn table_round_trip() {
        let p = tmp("table.csv");
        std::fs::write(&p, "class_id,center_id,x,y\nR1,C1,1,NA\nR2,C1,,2.5\n").unwrap();
        let t = read_table(&p).unwrap();
        assert_eq!(t.columns, vec!["x", "y"]);
        assert_eq!(t.get("R2", 1), Some(2.5));
        assert_eq!(t.get("R2", 0), None);
        write_text(&p, &table_text(Some("h"), &t)).unwrap();
        let back = read_table(&p).unwrap();
        assert_eq!(back.class_ids, t.class_ids);
        assert_eq!(back.center_ids, t.center_ids);
        assert_eq!(back.get("R1", 0), Some(1.0));
    }

    #[test]
    fn fitted_model_round_trip_is_exact() {
        let (cat, bundle) = testutil::random_bundle(3, 5, 3, 0.1);
        let theta = testutil::random_theta(&cat, 4);
        let model = FittedModel::from_parameters(theta, &bundle).unwrap();
        let rec = FittedModelRecord::new(&model, &cat, &BTreeMap::new());
        let text = json_text(&rec);
        let back: FittedModelRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_model(&cat).unwrap(), model);
    }

    #[test]
    fn scores_round_trip() {
        let (cat, bundle) = testutil::random_bundle(5, 4, 3, 0.1);
        let theta = testutil::random_theta(&cat, 6);
        let model = FittedModel::from_parameters(theta, &bundle).unwrap();
        let scores = crate::eb::eb_predict(&model, &bundle).unwrap();
        let names = cat.factor_names();
        let (p, q) = (tmp("scores.csv"), tmp("centers.csv"));
        write_csv(&p, Some("h"), &SCORE_COLUMNS, &score_rows(&scores, &names)).unwrap();
        write_csv(&q, None, &CENTER_SCORE_COLUMNS, &center_score_rows(&scores)).unwrap();
        let back = read_scores(&p, &q, &names).unwrap();
        assert_eq!(back.classrooms.len(), scores.classrooms.len());
        for (a, b) in back.classrooms.iter().zip(&scores.classrooms) {
            assert_eq!(a.eta_eb, b.eta_eb);
            assert_eq!(a.directly_measured, b.directly_measured);
            assert_eq!(a.post_cov.diagonal(), b.post_cov.diagonal());
        }
        assert_eq!(back.centers, scores.centers);
    }

    #[test]
    fn quoting_and_na() {
        assert_eq!(num(None), "NA");
        assert_eq!(num(Some(f64::NAN)), "NA");
        assert_eq!(num(Some(0.1)), "0.1");
        let t = csv_text(None, &["a"], &[vec!["x,y".into()]]);
        assert_eq!(t, "a\n\"x,y\"\n");
        assert_eq!(slug("QCIT Lang/Lit"), "QCIT_Lang_Lit");
    }
}
