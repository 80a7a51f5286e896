use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use peerspread::ingest::{write_households, Household, YearMonth};

fn peerspread(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_peerspread"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = peerspread(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn house(id: &str, x: f64, y: f64) -> Household {
    Household {
        id: id.to_string(),
        x,
        y,
        build_year: 1995,
        value: 60000.0,
        outdoor_area: 400.0,
        has_pool: false,
        ownership_pct: 0.7,
        application: None,
        completion: None,
        multi_conversion: false,
    }
}

fn write_houses(path: &Path, houses: &[Household]) {
    let mut buf = Vec::new();
    write_households(houses, &mut buf).unwrap();
    fs::write(path, buf).unwrap();
}

fn rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(Result::unwrap).collect()
}

/// Three houses on a line, 50 m and 200 m apart, beside a straight street.
fn toy(dir: &Path) {
    write_houses(
        &dir.join("houses.csv"),
        &[house("a", 0.0, 0.0), house("b", 50.0, 0.0), house("c", 250.0, 0.0)],
    );
    fs::write(dir.join("nodes.csv"), "node_id,x,y\nw,-100,20\ne,400,20\n").unwrap();
    fs::write(dir.join("edges.csv"), "edge_id,node_a,node_b,length\nmain,w,e,\n").unwrap();
}

#[test]
fn netbuild_toy_single_edge() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path());
    fs::write(
        dir.path().join("run.json"),
        r#"{"households": "houses.csv", "study_start": "2004-01", "study_end": "2004-12",
            "grid": {"metrics": ["euclidean"], "tau_d_km": [0.1]}}"#,
    )
    .unwrap();
    ok(dir.path(), &["netbuild", "--config", "run.json", "--out", "out"]);
    let edges = rows(&dir.path().join("out/all/edges_euclidean_0.1.csv"));
    assert_eq!(edges.len(), 1);
    assert_eq!(&edges[0][0], "a");
    assert_eq!(&edges[0][1], "b");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "netbuild");
    assert_eq!(manifest["inputs"]["households"]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn netbuild_both_metrics() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path());
    fs::write(
        dir.path().join("run.json"),
        r#"{"households": "houses.csv", "roads": {"nodes": "nodes.csv", "edges": "edges.csv"},
            "study_start": "2004-01", "study_end": "2004-12",
            "grid": {"metrics": ["euclidean", "on_road"], "tau_d_km": [0.1, 0.3]}}"#,
    )
    .unwrap();
    ok(dir.path(), &["netbuild", "--config", "run.json", "--out", "out"]);
    for tau in ["0.1", "0.3"] {
        let euclid = rows(&dir.path().join(format!("out/all/edges_euclidean_{tau}.csv")));
        let road = rows(&dir.path().join(format!("out/all/edges_on_road_{tau}.csv")));
        // every on-road peer pair is also a Euclidean pair
        assert!(road.len() <= euclid.len());
        for r in &road {
            assert!(euclid.iter().any(|e| e[0] == r[0] && e[1] == r[1]));
        }
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/network_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["neighborhoods"]["all"]["networks"].as_array().unwrap().len(), 4);
    assert!(summary["neighborhoods"]["all"]["distance_regression"]["road_on_euclid"]["slope"].is_number());
}

#[test]
fn on_road_without_roads_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path());
    fs::write(
        dir.path().join("run.json"),
        r#"{"households": "houses.csv", "study_start": "2004-01", "study_end": "2004-12",
            "grid": {"metrics": ["on_road"], "tau_d_km": [0.1]}}"#,
    )
    .unwrap();
    let out = peerspread(dir.path(), &["netbuild", "--config", "run.json", "--out", "out"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1);
    assert!(err.contains("roads"));
}

#[test]
fn bad_invocations_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(peerspread(dir.path(), &["spread"]).status.code(), Some(2));
    assert_eq!(peerspread(dir.path(), &["fit"]).status.code(), Some(2));
    let missing = peerspread(dir.path(), &["fit", "--config", "nope.json"]);
    assert_eq!(missing.status.code(), Some(1));
    assert_eq!(String::from_utf8_lossy(&missing.stderr).lines().count(), 1);
    fs::write(dir.path().join("bad.json"), r#"{"grid": {"metrics": []}}"#).unwrap();
    assert_eq!(peerspread(dir.path(), &["fit", "--config", "bad.json"]).status.code(), Some(2));
}

/// Synthetic bundle in `<dir>/bundle` from a small grid.
fn bundle(dir: &Path, synth: &str) {
    fs::write(dir.join("synth.json"), format!(r#"{{"seed": 4, "synth": {synth}}}"#)).unwrap();
    ok(dir, &["synth", "--config", "synth.json", "--out", "bundle"]);
}

fn with_grid(dir: &Path, name: &str, grid: serde_json::Value) {
    let mut config: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("bundle/config.json")).unwrap()).unwrap();
    config["grid"] = grid;
    fs::write(dir.join("bundle").join(name), serde_json::to_string(&config).unwrap()).unwrap();
}

#[test]
fn fit_report_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    bundle(d, r#"{"side": 8, "alpha": 0.02, "lambda0": [0.01, 0.005]}"#);
    with_grid(d, "one.json", serde_json::json!({"metrics": ["euclidean"], "tau_d_km": [0.1], "tau_r": [12]}));
    with_grid(
        d,
        "full.json",
        serde_json::json!({"metrics": ["euclidean", "on_road"], "tau_d_km": [0.1, 0.2, 0.3], "tau_r": [1, 4, 6, 12, "inf"]}),
    );
    ok(d, &["fit", "--config", "bundle/one.json", "--out", "one"]);
    ok(d, &["fit", "--config", "bundle/full.json", "--out", "full"]);
    let one = rows(&d.join("one/fit_report.csv"));
    assert_eq!(one.len(), 2);
    let full = rows(&d.join("full/fit_report.csv"));
    assert_eq!(full.len(), 31);
    assert_eq!(full.iter().filter(|r| &r[1] == "none").count(), 1);
    let aics: Vec<f64> = full.iter().map(|r| r[8].parse().unwrap()).collect();
    assert!(aics.windows(2).all(|w| w[0] <= w[1]));
    let verdicts: Vec<&str> = full.iter().map(|r| r.get(10).unwrap()).collect();
    assert!(verdicts.iter().all(|v| *v == verdicts[0]));

    ok(d, &["fit", "--config", "bundle/one.json", "--out", "again"]);
    assert_eq!(fs::read(d.join("one/fit_report.csv")).unwrap(), fs::read(d.join("again/fit_report.csv")).unwrap());
    assert_eq!(fs::read(d.join("one/fits.json")).unwrap(), fs::read(d.join("again/fits.json")).unwrap());
}

#[test]
fn synth_fit_recovers_planted_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    bundle(d, "{}");
    ok(d, &["fit", "--config", "bundle/config.json", "--out", "fit"]);
    let report = rows(&d.join("fit/fit_report.csv"));
    let epi = report.iter().find(|r| &r[1] == "euclidean").unwrap();
    let alpha: f64 = epi[4].parse().unwrap();
    let se: f64 = epi[5].parse().unwrap();
    assert!((alpha - 0.002).abs() <= 2.0 * se, "alpha {alpha} se {se}");
}

#[test]
fn synth_without_hazard_has_no_activations() {
    let dir = tempfile::tempdir().unwrap();
    bundle(dir.path(), r#"{"side": 6, "alpha": 0.0, "lambda0": [0.0, 0.0]}"#);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("bundle/synth_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["activations"], 0);
    let houses = rows(&dir.path().join("bundle/households.csv"));
    assert_eq!(houses.len(), 36);
    assert!(houses.iter().all(|r| r[8].is_empty() && r[9].is_empty()));
}

#[test]
fn predict_single_realization() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    bundle(d, r#"{"side": 8, "alpha": 0.02, "lambda0": [0.01, 0.005]}"#);
    ok(d, &["predict", "--config", "bundle/config.json", "--out", "p", "--realizations", "1", "--split", "2012-01"]);
    let report = rows(&d.join("p/predict_report.csv"));
    assert_eq!(report.len(), 2);
    let models: Vec<&str> = report.iter().map(|r| r.get(1).unwrap()).collect();
    assert!(models.contains(&"epidemic") && models.contains(&"endemic"));
    let rmse: Vec<f64> = report.iter().map(|r| r[6].parse().unwrap()).collect();
    assert!(rmse[0] <= rmse[1]);
    for r in &report {
        assert_eq!(&r[8], "0");
        assert_eq!(&r[10], "1");
        assert!(r[12].contains("single realization"));
    }
    let curve = rows(&d.join("p/all/curve_endemic.csv"));
    // test window 2012-02 ..= 2013-12
    assert_eq!(curve.len(), 23);
    assert_eq!(&curve[0][0], "2012-02");
}

#[test]
fn predict_rejects_split_at_horizon() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    bundle(d, r#"{"side": 5}"#);
    let out = peerspread(d, &["predict", "--config", "bundle/config.json", "--out", "p", "--split", "2013-12"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("test window"));
}

#[test]
fn logit_marks_a_strong_pool_effect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let start = YearMonth::new(2004, 1).unwrap();
    let houses: Vec<Household> = (0..2000)
        .map(|k| {
            let mut h = house(&format!("h{k}"), (k % 50) as f64 * 30.0, (k / 50) as f64 * 30.0);
            h.has_pool = rng.random_bool(0.25);
            h.value = 60000.0 + 20000.0 * rng.random_range(-1.0..1.0);
            let p = if h.has_pool { 0.3 } else { 0.1 };
            if rng.random_bool(p) {
                h.application = Some(YearMonth::from_index(start, rng.random_range(1..=24)));
                h.completion = h.application;
            }
            h
        })
        .collect();
    write_houses(&d.join("houses.csv"), &houses);
    fs::write(
        d.join("run.json"),
        r#"{"households": "houses.csv", "study_start": "2004-01", "study_end": "2005-12",
            "logit": {"covariates": ["has_pool", "value"]}}"#,
    )
    .unwrap();
    ok(d, &["logit", "--config", "run.json", "--out", "out"]);
    let table = rows(&d.join("out/logit_report.csv"));
    let terms: Vec<&str> = table.iter().map(|r| r.get(0).unwrap()).collect();
    assert_eq!(terms, ["constant", "has_pool", "value", "N", "pseudo_R2"]);
    assert_eq!(&table[1][3], "***");
    let estimate: f64 = table[1][1].parse().unwrap();
    // log odds ratio of 0.3 vs 0.1
    assert!((estimate - (0.3f64 / 0.7 / (0.1 / 0.9)).ln()).abs() < 0.35);
    assert_eq!(&table[3][1], "2000");
}
