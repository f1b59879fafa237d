use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const COSINE: &str = r#"
[grid]
mode = "whole-space"
lateral_cell_lengths = [1.0]
mesh_lateral = 64

[model]
kind = "potential"
w1 = "cos(2*pi()*x)"

[disorder]
density = "1"
b = 0.0

[experiment]
seed = 11
t0 = 0.1
deltas = []
"#;

const LINEAR: &str = r#"
[grid]
mode = "whole-space"
lateral_cell_lengths = [1.0]
mesh_lateral = 8

[model]
kind = "potential"
w1 = "-1"

[disorder]
density = "1"
b = 0.0

[experiment]
seed = 5
t0 = 0.1
epsilons = [0.025, 0.05, 0.1]
n_cells = [2]
samples = 8
"#;

fn run(args: &[&str], config: &str, dir: &Path) -> Output {
    let cfg = dir.join("run.toml");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_weakloc"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("out/report.json")).unwrap()).unwrap()
}

#[test]
fn expand_cosine_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["expand"], COSINE, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(dir.path());
    assert_eq!(r["schema"], "weakloc-report/1");
    let l2 = r["result"]["expansion"]["lambda2"].as_f64().unwrap();
    assert!((l2 + 0.0126651).abs() < 1e-3 * 0.0126651, "{l2}");
    assert_eq!(r["result"]["expansion"]["case_label"], "II");
}

#[test]
fn expand_linear_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["expand"], LINEAR, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(dir.path());
    assert_eq!(r["result"]["expansion"]["case_label"], "I");
    assert!((r["result"]["expansion"]["lambda1"].as_f64().unwrap() + 1.0).abs() < 1e-12);
    let summary = fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    assert!(summary.starts_with("check,status,detail\n"));
}

#[test]
fn unknown_subcommand_prints_usage() {
    let out = Command::new(env!("CARGO_BIN_EXE_weakloc")).arg("localize").output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn help_exits_zero() {
    let out = Command::new(env!("CARGO_BIN_EXE_weakloc")).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn malformed_config_reports_position() {
    let dir = tempfile::tempdir().unwrap();
    let broken = LINEAR.replace("samples = 8", "samples = eight");
    let out = run(&["sweep-spectrum"], &broken, dir.path());
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 20, column"), "{err}");
}

#[test]
fn invalid_law_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["expand"], &LINEAR.replace("b = 0.0", "b = 1.5"), dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn empty_sweep_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["sweep-spectrum"], &LINEAR.replace("[0.025, 0.05, 0.1]", "[]"), dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(dir.path().join("out/sweep_N2.csv")).unwrap(), "epsilon,gap\n");
}

#[test]
fn sweep_output_is_byte_stable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run(&["sweep-spectrum", "--threads", "2"], LINEAR, a.path());
    let rb = run(&["sweep-spectrum", "--threads", "2"], LINEAR, b.path());
    assert_eq!(ra.status.code(), Some(0), "{}", String::from_utf8_lossy(&ra.stderr));
    assert_eq!(rb.status.code(), Some(0));
    for f in ["report.json", "summary.csv", "sweep_N2.csv"] {
        assert_eq!(fs::read(a.path().join("out").join(f)).unwrap(), fs::read(b.path().join("out").join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(a.path().join("out/sweep_N2.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn sweep_results_do_not_depend_on_threads() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(run(&["sweep-spectrum", "--threads", "1"], LINEAR, a.path()).status.code(), Some(0));
    assert_eq!(run(&["sweep-spectrum", "--threads", "4"], LINEAR, b.path()).status.code(), Some(0));
    let (ra, rb) = (report(a.path()), report(b.path()));
    assert_eq!(ra["result"], rb["result"]);
    assert_eq!(ra["checks"], rb["checks"]);
    assert_eq!(fs::read(a.path().join("out/sweep_N2.csv")).unwrap(), fs::read(b.path().join("out/sweep_N2.csv")).unwrap());
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["expand", "--seed", "99"], LINEAR, dir.path());
    assert_eq!(out.status.code(), Some(0));
    let r = report(dir.path());
    assert_eq!(r["seed"], 99);
    assert_eq!(r["config"]["experiment"]["seed"], 99);
}

#[test]
fn hk_feasibility_matches_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = LINEAR.replace("samples = 8", "samples = 8\nrate_constant = 1.0\nsup_a_sq = 1.0");
    let out = run(&["hk-feasibility"], &cfg, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/hk_feasibility.json");
    let produced = fs::read_to_string(dir.path().join("out/report.json")).unwrap();
    if std::env::var_os("WEAKLOC_BLESS").is_some() {
        fs::write(&golden, &produced).unwrap();
    }
    assert_eq!(produced, fs::read_to_string(golden).unwrap());
}

#[test]
fn quadratic_infeasible_rate_fails_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = LINEAR.replace("samples = 8", "samples = 8\nrate_kind = \"quadratic\"\nrate_constant = 1.0\nsup_a_sq = 1.0");
    let out = run(&["hk-feasibility"], &cfg, dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(fs::read_to_string(dir.path().join("out/summary.csv")).unwrap().contains("feasible,FAIL"));
}

#[test]
fn regime_violation_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = LINEAR.replace("t0 = 0.1", "t0 = 4.0").replace("[0.025, 0.05, 0.1]", "[2.0]");
    let out = run(&["wegner"], &cfg, dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("regime"));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let out = tempfile::tempdir().unwrap();
        let status = Command::new(env!("CARGO_BIN_EXE_weakloc"))
            .args(["hk-feasibility", "--config"])
            .arg(&path)
            .arg("--out")
            .arg(out.path())
            .output()
            .unwrap();
        assert_ne!(status.status.code(), Some(3), "{}: {}", path.display(), String::from_utf8_lossy(&status.stderr));
        seen += 1;
    }
    assert!(seen >= 3);
}

#[test]
fn lower_bound_writes_instance_table_and_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["lower-bound"], &LINEAR.replace("[0.025, 0.05, 0.1]", "[0.05]"), dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(dir.path().join("out/lower_bound_instances.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("instance_id,seed,epsilon,N,lhs,rhs,margin,status"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.starts_with(|c: char| c.is_ascii_digit()) && r.ends_with(",PASS")));
    let ledger: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/ledger.json")).unwrap()).unwrap();
    assert!(ledger["c0"].as_f64().unwrap() > 0.0);
    assert_eq!(ledger, report(dir.path())["ledger"]);
}
