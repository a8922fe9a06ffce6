use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dilu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dilu"))
        .args(args)
        .env("DILU_SIM_THREADS", "2")
        .output()
        .expect("spawn dilu")
}

fn scenario(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
        .display()
        .to_string()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn profile_builtin_models() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dilu(&["profile", "--out", path(tmp.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("profile.json")).unwrap()).unwrap();
    let records = report["functions"].as_array().unwrap();
    assert_eq!(records.len(), 4);
    assert!(records.iter().all(|r| r["quota"].is_object() && r["trial_count"].as_u64().unwrap() < 60));
    assert!(stdout(&o).contains("trials"));
}

#[test]
fn profile_empty_and_malformed_model_lists() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty.json");
    std::fs::write(&empty, "[]").unwrap();
    let o = dilu(&["profile", "--models", path(&empty), "--out", path(tmp.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("profile.json")).unwrap()).unwrap();
    assert_eq!(report["functions"].as_array().unwrap().len(), 0);

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "[{\"name\": \"x\",\n  oops}]").unwrap();
    let o = dilu(&["profile", "--models", path(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn profile_reports_unattainable_slo_and_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let slo = tmp.path().join("slo.json");
    std::fs::write(&slo, r#"{"resnet152-like": 1.0}"#).unwrap();
    let o = dilu(&["profile", "--slo", path(&slo), "--out", path(tmp.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("profile.json")).unwrap()).unwrap();
    let records = report["functions"].as_array().unwrap();
    let failed: Vec<_> = records.iter().filter(|r| r["error"].is_string()).collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0]["function"], "resnet152-like");
}

#[test]
fn simulate_is_repeatable_and_report_reads_it_back() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let o = dilu(&["simulate", "--scenario", &scenario("collocation.json"), "--out", path(dir)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(read_dir_bytes(&a), read_dir_bytes(&b));
    for f in ["metrics.json", "scaling.csv", "gpus.csv"] {
        assert!(a.join(f).is_file(), "{f}");
    }

    let csv = tmp.path().join("cmp.csv");
    let o = dilu(&["report", path(&a), path(&b), "--out", path(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.lines().next().unwrap().starts_with("metric,"));
    assert!(text.lines().any(|l| l.starts_with("svr,")));
    assert!(stdout(&o).contains("cold_starts"));
}

#[test]
fn seed_and_mode_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dilu(&[
        "simulate",
        "--scenario",
        &scenario("collocation.json"),
        "--out",
        path(tmp.path()),
        "--seed",
        "11",
        "--mode",
        "static_request",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 11);
    assert_eq!(m["mode"], "static_request");
}

#[test]
fn usage_and_io_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dilu(&["simulate", "--scenario", &scenario("collocation.json"), "--out", path(tmp.path()), "--mode", "bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown mode"));

    let o = dilu(&["simulate", "--scenario", path(&tmp.path().join("missing.json")), "--out", path(tmp.path())]);
    assert_eq!(o.status.code(), Some(3));

    assert_eq!(dilu(&["report"]).status.code(), Some(1));
    assert_eq!(dilu(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(dilu(&["--help"]).status.code(), Some(0));

    let o = dilu(&["report", path(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("skipped"));

    let o = dilu(&["sweep", "--scenario", &scenario("collocation.json"), "--out", path(tmp.path()), "--axis", "omega", "--points", "1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn single_point_sweep_equals_simulate() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    let sweep = tmp.path().join("sweep");
    let o = dilu(&["simulate", "--scenario", &scenario("collocation.json"), "--out", path(&sim)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = dilu(&["sweep", "--scenario", &scenario("collocation.json"), "--out", path(&sweep), "--axis", "gamma", "--points", "1.5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_dir_bytes(&sim), read_dir_bytes(&sweep.join("gamma=1.5").join("dilu")));
}

#[test]
fn cv_sweep_over_two_modes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dilu(&[
        "sweep",
        "--scenario",
        &scenario("collocation.json"),
        "--out",
        path(tmp.path()),
        "--axis",
        "cv",
        "--points",
        "2,4",
        "--mode",
        "dilu,static_request",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(tmp.path().join("sweep.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    let modes: Vec<&str> = rows.iter().map(|r| &r[2]).collect();
    assert_eq!(modes, ["dilu", "static_request", "dilu", "static_request"]);
    let m: serde_json::Value = serde_json::from_slice(
        &std::fs::read(tmp.path().join("cv=4").join("static_request").join("metrics.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(m["mode"], "static_request");
}

#[test]
fn fleet_gamma_sweep_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("fleet.json");
    std::fs::write(&spec, r#"{"nodes": 50, "instances": 160, "functions": 20, "arrival_span_s": 600.0}"#).unwrap();
    let out = tmp.path().join("sweep");
    let o = dilu(&["sweep", "--fleet", "--scenario", path(&spec), "--out", path(&out), "--axis", "gamma", "--points", "1.0,1.5,2.0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(out.join("sweep.csv")).unwrap();
    assert_eq!(rdr.records().count(), 3);

    let o = dilu(&["sweep", "--fleet", "--scenario", path(&spec), "--out", path(&out), "--axis", "cv", "--points", "2"]);
    assert_eq!(o.status.code(), Some(1));

    let runs = ["1", "2"].map(|g| out.join(format!("gamma={g}")).join("dilu"));
    let o = dilu(&["report", path(&runs[0]), path(&runs[1])]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("mean_gpus"));
}
