use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn classdose(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_classdose"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert_eq!(o.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn error_record(o: &Output) -> serde_json::Value {
    assert_eq!(o.status.code(), Some(1));
    serde_json::from_str(String::from_utf8_lossy(&o.stderr).trim()).expect("stderr is one JSON record")
}

/// Every file under `root`, keyed by relative path.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Data rows of an artifact CSV, without the header comment and column line.
fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let cols = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    (cols, rows)
}

fn simulate_and_run(dir: &Path, extra: &[&str]) {
    let mut args = vec!["simulate", "--out", "run", "--seed", "11"];
    args.extend_from_slice(extra);
    ok(&classdose(&args, dir));
    args[0] = "pipeline";
    ok(&classdose(&args, dir));
}

#[test]
fn missing_catalog_names_the_path() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("run.toml"), "[paths]\ncatalog = \"no/such/catalog.toml\"\n").unwrap();
    let rec = error_record(&classdose(&["fit", "--config", "run.toml"], dir.path()));
    assert_eq!(rec["error"], "Io");
    assert_eq!(rec["path"], "no/such/catalog.toml");
}

#[test]
fn missing_upstream_artifacts_carry_remedies() {
    let dir = TempDir::new().unwrap();
    let rec = error_record(&classdose(&["fit", "--out", "o"], dir.path()));
    assert_eq!(rec["error"], "MissingArtifact");
    assert!(rec["message"].as_str().unwrap().contains("classdose simulate"));

    let rec = error_record(&classdose(&["drf", "--out", "o"], dir.path()));
    assert_eq!(rec["error"], "MissingArtifact");
    assert!(rec["path"].as_str().unwrap().ends_with("classroom_scores.csv"));
    assert!(rec["message"].as_str().unwrap().contains("classdose scores"));
}

#[test]
fn bad_config_is_an_error_record() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("run.toml"), "[balance]\nq = 3\n").unwrap();
    let rec = error_record(&classdose(&["fit", "--config", "run.toml"], dir.path()));
    assert_eq!(rec["error"], "Parse");
    std::fs::write(dir.path().join("run.toml"), "[balance]\ntrim_quantile = 2.0\n").unwrap();
    assert_eq!(error_record(&classdose(&["fit", "--config", "run.toml"], dir.path()))["error"], "Config");
}

#[test]
fn pipeline_is_byte_identical_across_runs_and_threads() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    simulate_and_run(a.path(), &[]);
    simulate_and_run(b.path(), &["--threads", "1"]);
    let (ta, tb) = (tree(&a.path().join("run")), tree(&b.path().join("run")));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(v == &tb[k], "{} differs", k.display());
    }
}

#[test]
fn pipeline_artifacts_follow_their_contracts() {
    let dir = TempDir::new().unwrap();
    simulate_and_run(dir.path(), &[]);
    let out = dir.path().join("run");

    let (cols, rows) = csv_rows(&out.join("drf/estimates.csv"));
    assert_eq!(cols[..2], ["response", "dose"]);
    assert_eq!(rows.len(), 18);
    let outcomes: std::collections::BTreeSet<_> = rows.iter().map(|r| r[0].clone()).collect();
    let doses: std::collections::BTreeSet<_> = rows.iter().map(|r| r[1].clone()).collect();
    assert_eq!((outcomes.len(), doses.len()), (3, 6));

    // every artifact starts with the same version and config line
    let first = std::fs::read_to_string(out.join("fit/parameters.csv")).unwrap();
    let header = first.lines().next().unwrap().to_string();
    assert!(header.starts_with("# classdose ") && header.contains(" config="));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest-pipeline.json")).unwrap()).unwrap();
    assert_eq!(manifest["exit_code"], 0);
    for a in manifest["artifacts"].as_array().unwrap() {
        let p = a["path"].as_str().unwrap();
        let text = std::fs::read_to_string(out.join(p)).unwrap();
        if p.ends_with(".json") {
            let v: serde_json::Value = serde_json::from_str(&text).unwrap();
            assert_eq!(v["config_hash"], manifest["config_hash"], "{p}");
        } else {
            assert_eq!(text.lines().next().unwrap(), header, "{p}");
        }
    }

    let (cols, rows) = csv_rows(&out.join("decompose/item_vpc.csv"));
    let at = |n: &str| cols.iter().position(|c| c == n).unwrap();
    assert_eq!(rows.len(), 25);
    for r in &rows {
        let s: f64 = ["pi1", "pi2", "pi3"].iter().map(|c| r[at(c)].parse::<f64>().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-12, "{}", r[0]);
    }

    let (cols, rows) = csv_rows(&out.join("balance/summary.csv"));
    assert!(cols.contains(&"ess".to_string()) && cols.contains(&"max_weighted_abs_corr".to_string()));
    assert_eq!(rows.len(), 6);

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("identify/feasibility.json")).unwrap()).unwrap();
    assert_eq!(report["fitted"]["feasible"], true);
    assert_eq!(report["pairs"].as_array().unwrap().len(), 2);
    assert!(out.join("drf/curves").read_dir().unwrap().count() >= 18);
}

#[test]
fn staged_commands_reproduce_the_pipeline_table() {
    let dir = TempDir::new().unwrap();
    simulate_and_run(dir.path(), &[]);
    let staged = dir.path().join("staged");
    std::fs::create_dir_all(&staged).unwrap();
    let data = dir.path().join("run/data");
    let config = format!(
        "seed = 11\n[paths]\nitems = \"{0}/items.csv\"\nclassrooms = \"{0}/classrooms.csv\"\n\
         covariates = \"{0}/covariates.csv\"\noutcomes = \"{0}/outcomes.csv\"\nout = \"{1}\"\n",
        data.display(),
        staged.display()
    );
    std::fs::write(dir.path().join("staged.toml"), config).unwrap();
    for cmd in ["fit", "scores", "decompose", "identify", "balance", "drf"] {
        ok(&classdose(&[cmd, "--config", "staged.toml"], dir.path()));
        assert!(staged.join(format!("manifest-{cmd}.json")).exists());
    }
    let a = csv_rows(&dir.path().join("run/drf/estimates.csv"));
    let b = csv_rows(&staged.join("drf/estimates.csv"));
    assert_eq!(a, b);
}

#[test]
fn non_convergence_exits_two_with_outputs() {
    let dir = TempDir::new().unwrap();
    ok(&classdose(&["simulate", "--out", "run"], dir.path()));
    std::fs::write(dir.path().join("short.toml"), "[fit]\nmax_iter = 2\n").unwrap();
    let o = classdose(&["fit", "--out", "run", "--config", "short.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("did not converge"));
    assert!(dir.path().join("run/fit/parameters.csv").exists());
    let (_, rows) = csv_rows(&dir.path().join("run/fit/convergence.csv"));
    assert!(rows.iter().any(|r| r[0] == "converged" && r[1] == "false"));
}
