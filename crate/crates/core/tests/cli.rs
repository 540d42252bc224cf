//! End-to-end behaviour of the `vnoc` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vnoc::stats::RunStats;

fn vnoc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vnoc")).args(args).output().expect("binary runs")
}

fn shipped(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name).display().to_string()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

const SMALL: &str = r#"{ "workload": { "n_tasks": 2, "mix": "gcd_only", "R": 3, "C": 50 }, "service": { "t_recfg": 500 } }"#;

#[test]
fn run_writes_stats_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.json", SMALL);
    let out = dir.path().join("stats.json");
    let trace = dir.path().join("trace.csv");
    let o = vnoc(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--trace", trace.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stdout.is_empty());
    let stats: RunStats = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(stats.verified_replies, 6);
    let trace = std::fs::read_to_string(&trace).unwrap();
    assert!(trace.starts_with("cycle,event,"));
    assert!(trace.lines().count() > 100);
}

#[test]
fn run_to_stdout_honours_mode_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.json", SMALL);
    let o = vnoc(&["run", "--config", &cfg, "--mode", "baseline", "--seed", "99"]);
    assert!(o.status.success());
    let stats: RunStats = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stats.seed, 99);
    assert_eq!(stats.mode, vnoc::manager::Mode::Baseline);
}

#[test]
fn sweep_emits_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.json", SMALL);
    let out = dir.path().join("sweep.csv");
    let o = vnoc(&["sweep", "--config", &cfg, "--tasks", "3,1,2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "n,baseline_makespan,vnoc_makespan,speedup");
    let ns: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ns, ["1", "2", "3"]);
    assert!(lines[1].ends_with(",1.0000"));
}

#[test]
fn compare_prints_ratio_and_rejects_mismatched_workloads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.json", SMALL);
    let path = |n: &str| dir.path().join(n).display().to_string();
    for (mode, name) in [("baseline", "b.json"), ("vnoc", "v.json")] {
        assert!(vnoc(&["run", "--config", &cfg, "--mode", mode, "--out", &path(name)]).status.success());
    }
    let o = vnoc(&["compare", &path("b.json"), &path("v.json")]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("a_makespan,b_makespan,ratio\n"));

    assert!(vnoc(&["run", "--config", &cfg, "--seed", "5", "--out", &path("other.json")]).status.success());
    let o = vnoc(&["compare", &path("b.json"), &path("other.json")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not comparable"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json").display().to_string();
    assert_eq!(vnoc(&["run", "--config", &missing]).status.code(), Some(2));

    let bad_schema = write(dir.path(), "schema.json", r#"{ "workload": { "n_tasks": "four" } }"#);
    let o = vnoc(&["run", "--config", &bad_schema]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("workload.n_tasks"));

    let semantic = write(dir.path(), "semantic.json", r#"{ "mesh": { "width": 0, "height": 3 } }"#);
    assert_eq!(vnoc(&["run", "--config", &semantic]).status.code(), Some(2));

    let stuck = write(dir.path(), "stuck.json", r#"{ "watchdog": 200 }"#);
    let o = vnoc(&["run", "--config", &stuck]);
    assert_eq!(o.status.code(), Some(4));
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());

    assert_eq!(vnoc(&["run", "--config", &shipped("default.json"), "--mode", "turbo"]).status.code(), Some(1));
    assert_eq!(vnoc(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(vnoc(&["sweep", "--config", &shipped("default.json")]).status.code(), Some(1));
    assert_eq!(vnoc(&["--help"]).status.code(), Some(0));
    assert_eq!(vnoc(&["--version"]).status.code(), Some(0));
}
