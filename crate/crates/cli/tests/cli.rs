use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cdm::pricing::bachelier_call;
use cdm_cli::{RunManifest, ScenarioConfig};
use tempfile::TempDir;

fn cdm(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cdm"));
    cmd.args(args).env_remove("CDM_OUTPUT_DIR");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    cdm(&args, &[])
}

const BACHELIER: &str = r#"
model = "bachelier"
[grid]
points = 801
[time]
horizon = 1.0
steps = 100
[vol]
kind = "semilinear"
sigma = 1.0
[seeds]
base = 42
paths = 16
[output]
density_times = [0.0, 0.5]
[smile]
strikes = [-1.0, 0.0, 1.0]
times = [0.0, 0.5]
[invariants]
checks = ["mass", "positivity", "parity", "martingale", "flat_smile"]
"#;

const SEMILINEAR: &str = r#"
model = "filter"
[grid]
points = 401
[time]
horizon = 1.0
steps = 400
eps = 0.05
[vol]
kind = "semilinear"
sigma = 1.0
[initial]
kind = "mixture"
components = [{ weight = 0.4, mean = -1.0, std = 0.5 }, { weight = 0.6, mean = 1.2, std = 0.7 }]
[seeds]
base = 42
paths = 8
[output]
density_times = [0.25, 0.5]
[smile]
strikes = [-0.5, 0.0, 0.5]
times = [0.25]
"#;

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

#[test]
fn bachelier_runs_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "b.toml", BACHELIER);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&run(&cfg, &a, &[])), 0);
    assert_eq!(code(&run(&cfg, &b, &[])), 0);
    let names = files(&a);
    assert_eq!(names, files(&b));
    for n in names.iter().filter(|n| n.ends_with(".csv")) {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n}");
    }
    assert!(names.contains(&"smile.csv".to_string()));
    assert!(names.contains(&"density_t0.000000.csv".to_string()));
}

#[test]
fn manifest_is_complete_and_hash_reproducible() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "b.toml", BACHELIER);
    let out = tmp.path().join("run");
    assert_eq!(code(&run(&cfg, &out, &[])), 0);
    let m = RunManifest::load(&out.join("manifest.json")).unwrap();
    let stored: ScenarioConfig = serde_json::from_value(m.config.clone()).unwrap();
    assert_eq!(stored.hash(), m.config_hash);
    let mut listed: Vec<String> = m.artifacts.iter().map(|a| a.path.clone()).collect();
    listed.push("manifest.json".into());
    listed.sort();
    assert_eq!(listed, files(&out));
    assert!(m.failed_invariants().is_empty());
    assert_eq!(m.invariants.len(), 5);
}

#[test]
fn binary_preset_reports_worked_example() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "bin.toml",
        r#"
model = "binary"
[time]
horizon = 10.0
steps = 50
[vol]
kind = "state_table"
knots = [-1.0, 2.0]
values = [-1.0, 2.0]
[binary]
x1 = 0.0
x2 = 1.0
q1 = 0.5
strikes = [0.5]
t = 1.0
"#,
    );
    let out = tmp.path().join("run");
    assert_eq!(code(&run(&cfg, &out, &[])), 0);
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let p = s["metrics"]["binary_price"].as_f64().unwrap();
    assert!((p - 0.09573).abs() < 5e-6, "{p}");
    let parts: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("closed_form.json")).unwrap()).unwrap();
    assert_eq!(parts[0]["parts"]["v_st"].as_f64().unwrap(), 1.0);
}

#[test]
fn zero_volatility_freezes_the_asset_and_prices() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "z.toml",
        r#"
model = "filter"
[time]
horizon = 1.0
steps = 50
[vol]
kind = "constant"
value = 0.0
[initial]
kind = "gaussian"
mean = 0.3
std = 0.8
[seeds]
paths = 3
[smile]
strikes = [-1.0, 0.0, 1.0]
times = [0.0, 0.3, 0.6, 0.9]
"#,
    );
    let out = tmp.path().join("run");
    assert_eq!(code(&run(&cfg, &out, &[])), 0);
    let path = fs::read_to_string(out.join("path_00000.csv")).unwrap();
    let a: Vec<&str> = path.lines().skip(1).map(|l| l.split(',').nth(3).unwrap()).collect();
    assert!(a.iter().all(|v| *v == a[0]), "asset moved");
    let smile = fs::read_to_string(out.join("smile.csv")).unwrap();
    let rows: Vec<Vec<&str>> = smile.lines().skip(1).map(|l| l.split(',').collect()).collect();
    for r in &rows {
        let first = rows.iter().find(|q| q[1] == r[1]).unwrap();
        assert_eq!(r[2], first[2], "price at K = {} changed over time", r[1]);
    }
}

fn bachelier_prices(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| -4.0 + 0.1 * i as f64)
        .map(|k| (k, bachelier_call(0.0, k, 1.0, 1.0)))
        .collect()
}

fn price_file(dir: &Path, name: &str, rows: &[(f64, f64)]) -> PathBuf {
    let mut text = String::from("strike,price\n");
    for (k, c) in rows {
        text.push_str(&format!("{k:.17e},{c:.17e}\n"));
    }
    write(dir, name, &text)
}

#[test]
fn ingest_accepts_a_clean_bachelier_file() {
    let tmp = TempDir::new().unwrap();
    let f = price_file(tmp.path(), "p.csv", &bachelier_prices(81));
    let o = cdm(&["ingest", f.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["rows"], 81);
    assert_eq!(report["convexity"], "pass");
    assert!(report["recovered_mean"].as_f64().unwrap().abs() < 1e-3);
}

#[test]
fn ingest_rejects_shuffled_strikes() {
    let tmp = TempDir::new().unwrap();
    let mut rows = bachelier_prices(81);
    rows.swap(10, 11);
    let f = price_file(tmp.path(), "p.csv", &rows);
    let o = cdm(&["ingest", f.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("strictly increasing"));
}

#[test]
fn ingest_names_the_concave_triple() {
    let tmp = TempDir::new().unwrap();
    let rows = vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.2), (3.0, 0.15), (4.0, 0.0), (5.0, 0.0)];
    let f = price_file(tmp.path(), "p.csv", &rows);
    let o = cdm(&["ingest", f.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("convexity violated on strikes (2, 3, 4)"), "{err}");
    assert!(err.contains("1 static-arbitrage violation"), "{err}");
}

fn compare(a: &Path, b: &Path) -> (i32, serde_json::Value) {
    let o = cdm(&["compare", a.to_str().unwrap(), b.to_str().unwrap()], &[]);
    let report = if o.stdout.is_empty() {
        serde_json::Value::Null
    } else {
        serde_json::from_slice(&o.stdout).unwrap()
    };
    (code(&o), report)
}

#[test]
fn compare_identical_runs_is_empty() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "b.toml", BACHELIER);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&cfg, &a, &[]);
    run(&cfg, &b, &[]);
    let manifest = RunManifest::load(&a.join("manifest.json")).unwrap();
    let (c, r) = compare(&a.join("manifest.json"), &a.join("manifest.json"));
    assert_eq!(c, 0);
    let report = cdm_cli::compare_runs(&a, &b, 1e-12).unwrap();
    assert!(report.is_empty(), "{r}");
    assert!(report.config_hash_equal);
    assert!(!manifest.artifacts.is_empty());
}

#[test]
fn compare_filter_and_bridge_on_shared_noise() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "f.toml", SEMILINEAR);
    let (f, b) = (tmp.path().join("filter"), tmp.path().join("bridge"));
    assert_eq!(code(&run(&cfg, &f, &[])), 0);
    let o = run(
        &cfg,
        &b,
        &[
            "--set",
            "model=bridge",
            "--set",
            "bridge.noise=shared",
            "--set",
            "invariants.checks=[\"mass\", \"equivalence\"]",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (c, r) = compare(&f, &b);
    assert_eq!(c, 0, "{r}");
    let norms = r["artifact_sup_norms"].as_array().unwrap();
    assert_eq!(norms.len(), 2);
    for n in norms {
        assert!(n["within"].as_bool().unwrap(), "{n}");
    }
    let eq: serde_json::Value = serde_json::from_str(&fs::read_to_string(b.join("equivalence.json")).unwrap()).unwrap();
    assert_eq!(eq["sup_norm"].as_array().unwrap().len(), 2);
}

#[test]
fn compare_different_seeds_flags_only_stochastic_fields() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "f.toml", SEMILINEAR);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&cfg, &a, &[]);
    run(&cfg, &b, &["--set", "seeds.base=7"]);
    let (c, r) = compare(&a, &b);
    assert_eq!(c, 0, "{r}");
    assert_eq!(r["config_differences"], serde_json::json!(["seeds.base"]));
    let diffs = r["differences"].as_array().unwrap();
    assert!(!diffs.is_empty());
    assert!(diffs.iter().all(|d| d["stochastic"] == true), "{r}");
    assert!(r["changed_artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .all(|d| d["stochastic"] == true));
}

#[test]
fn compare_rejects_schema_mismatch() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "b.toml", BACHELIER);
    let a = tmp.path().join("a");
    run(&cfg, &a, &[]);
    let text = fs::read_to_string(a.join("manifest.json"))
        .unwrap()
        .replace("\"schema_version\": 1", "\"schema_version\": 99");
    let other = write(tmp.path(), "other.json", &text);
    let (c, _) = compare(&a, &other);
    assert_eq!(c, 3);
}

#[test]
fn config_errors_exit_2_with_field_path() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "b.toml", BACHELIER);
    let out = tmp.path().join("x");
    for (set, field) in [
        ("time.eps=2.0", "time.eps"),
        ("seeds.paths=0", "seeds.paths"),
        ("grid.points=\"many\"", "grid.points"),
        ("smile.times=[5.0]", "smile.times[0]"),
    ] {
        let o = run(&cfg, &out, &["--set", set]);
        assert_eq!(code(&o), 2, "{set}");
        assert!(
            String::from_utf8_lossy(&o.stderr).contains(field),
            "{set}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let missing = write(
        tmp.path(),
        "m.toml",
        &BACHELIER.replace("[seeds]", "[initial]\nkind = \"bachelier\"\n[seeds]"),
    );
    assert_eq!(
        code(&run(
            &missing,
            &out,
            &[
                "--set",
                "model=filter",
                "--set",
                "initial.kind=market",
                "--set",
                "initial.path=nope.csv"
            ]
        )),
        2
    );
    assert!(!out.exists());
    assert_eq!(code(&cdm(&["run", "does-not-exist.toml"], &[])), 2);
}

#[test]
fn output_dir_env_override() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "b.toml", BACHELIER);
    let target = tmp.path().join("from-env");
    let o = cdm(&["run", cfg.to_str().unwrap()], &[("CDM_OUTPUT_DIR", &target)]);
    assert_eq!(code(&o), 0);
    assert!(target.join("manifest.json").exists());
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn invariant_failure_exits_4_and_keeps_manifest() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "b.toml", BACHELIER);
    let out = tmp.path().join("run");
    let o = run(&cfg, &out, &["--set", "invariants.flat_smile_tolerance=1e-12"]);
    assert_eq!(code(&o), 4);
    let m = RunManifest::load(&out.join("manifest.json")).unwrap();
    assert_eq!(m.failed_invariants().len(), 1);
    assert!(m.failure.unwrap().contains("flat_smile"));
}

#[test]
fn selftest_passes() {
    let o = cdm(&["selftest"], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout)
        .lines()
        .all(|l| l.starts_with("PASS")));
}
