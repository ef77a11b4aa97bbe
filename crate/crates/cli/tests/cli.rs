use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_prefixpack"));
    c.env_remove("PREFIXPACK_HW_PROFILE");
    c
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn prefixpack");
    if !out.status.success() {
        eprintln!("stdout:\n{}", String::from_utf8_lossy(&out.stdout));
        eprintln!("stderr:\n{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn spec(b: &[usize], l: &[usize]) -> Value {
    json!({
        "B": b,
        "L": l,
        "block_size": 16,
        "heads": {"q": 8, "kv": 2, "dim": 64},
        "dtype_bytes": {"kv": 2, "intermediate": 4}
    })
}

fn write(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn scenario(dir: &Path, workload: Value, strategies: &[&str]) -> PathBuf {
    write(
        dir,
        "scenario.json",
        &json!({ "workload": workload, "strategies": strategies, "seed": 3, "output": "out/report.json" }),
    )
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("out/report.json")).unwrap()).unwrap()
}

fn row<'a>(rep: &'a Value, strategy: &str) -> &'a Value {
    rep["rows"].as_array().unwrap().iter().find(|r| r["strategy"] == strategy).unwrap()
}

#[test]
fn gen_expands_levels_and_is_seed_stable() {
    let dir = TempDir::new().unwrap();
    let s = write(dir.path(), "spec.json", &spec(&[1, 4, 16], &[128, 256, 1024]));
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    for out in [&a, &b] {
        let o = run(bin().args(["gen", "--seed", "9", "--spec"]).arg(&s).arg("--out").arg(out));
        assert!(o.status.success());
    }
    let table: Value = serde_json::from_str(&std::fs::read_to_string(&a).unwrap()).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 16);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let o = run(bin().args(["gen", "--seed", "9", "--spec"]).arg(&s).arg("--out").arg(&a));
    assert!(String::from_utf8_lossy(&o.stdout).contains("distinct blocks"));
}

#[test]
fn gen_rejects_empty_kv_with_code_2() {
    let dir = TempDir::new().unwrap();
    let s = write(dir.path(), "spec.json", &spec(&[1], &[0]));
    let out = dir.path().join("t.json");
    let o = bin().args(["gen", "--spec"]).arg(&s).arg("--out").arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn run_reports_sharing_and_stream_effects() {
    let dir = TempDir::new().unwrap();
    let sc = scenario(dir.path(), spec(&[1, 4, 8], &[256, 64, 32]), &["pat", "query_centric", "pat_serial_streams"]);
    let o = run(bin().args(["run", "--verify", "--scenario"]).arg(&sc));
    assert!(o.status.success());
    let rep = report(dir.path());
    let (pat, qc, serial) = (row(&rep, "pat"), row(&rep, "query_centric"), row(&rep, "pat_serial_streams"));
    assert!(pat["kv_bytes"].as_u64() < qc["kv_bytes"].as_u64());
    assert!(serial["makespan_ns"].as_f64() >= pat["makespan_ns"].as_f64());
    assert_eq!(pat["verified"], true);
    assert_eq!(qc["verified"], true);
    let csv = std::fs::read_to_string(dir.path().join("out/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(dir.path().join("out/report.meta.json").exists());
}

#[test]
fn no_sharing_means_equal_kv_bytes() {
    let dir = TempDir::new().unwrap();
    let sc = scenario(dir.path(), spec(&[16], &[256]), &["pat", "query_centric"]);
    assert!(run(bin().args(["run", "--scenario"]).arg(&sc)).status.success());
    let rep = report(dir.path());
    assert_eq!(row(&rep, "pat")["kv_bytes"], row(&rep, "query_centric")["kv_bytes"]);
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let sc = scenario(dir.path(), spec(&[2, 6], &[128, 48]), &["pat", "naive", "pat_no_split"]);
    let mut snapshots = Vec::new();
    for extra in [&["--sequential"][..], &[][..]] {
        assert!(run(bin().args(extra).args(["run", "--scenario"]).arg(&sc)).status.success());
        snapshots.push((
            std::fs::read(dir.path().join("out/report.json")).unwrap(),
            std::fs::read(dir.path().join("out/report.csv")).unwrap(),
        ));
    }
    assert_eq!(snapshots[0], snapshots[1]);
    let leftovers: Vec<_> = std::fs::read_dir(dir.path().join("out")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(leftovers.len(), 3, "{leftovers:?}");
}

#[test]
fn infeasible_hardware_exits_4_without_reports() {
    let dir = TempDir::new().unwrap();
    let sc = scenario(dir.path(), spec(&[1, 4], &[64, 32]), &["pat"]);
    let mut hw: Value = serde_json::from_str(include_str!("../../core/profiles/a100.json")).unwrap();
    hw["smem_per_cta"] = json!(1024);
    hw["smem_per_sm"] = json!(1024);
    let hw_path = write(dir.path(), "tiny.json", &hw);
    let o = bin().args(["run", "--scenario"]).arg(&sc).env("PREFIXPACK_HW_PROFILE", &hw_path).output().unwrap();
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn bad_scenarios_exit_2() {
    let dir = TempDir::new().unwrap();
    let sc = scenario(dir.path(), spec(&[1, 4], &[64, 32]), &[]);
    assert_eq!(bin().args(["run", "--scenario"]).arg(&sc).output().unwrap().status.code(), Some(2));
    let sc = scenario(dir.path(), json!("missing.json"), &["pat"]);
    assert_eq!(bin().args(["run", "--scenario"]).arg(&sc).output().unwrap().status.code(), Some(2));
    let sc = scenario(dir.path(), spec(&[3, 4], &[64, 32]), &["pat"]);
    assert_eq!(bin().args(["run", "--scenario"]).arg(&sc).output().unwrap().status.code(), Some(2));
}

#[test]
fn verify_passes_and_fails_by_tolerance() {
    let dir = TempDir::new().unwrap();
    let s = write(dir.path(), "spec.json", &spec(&[1, 2, 6], &[64, 32, 48]));
    let ok = run(bin().args(["verify", "--strategy", "pat", "--seed", "5", "--tol", "1e-10", "--workload"]).arg(&s));
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stdout).contains("PASS"));

    let tight = bin().args(["verify", "--tol", "1e-30", "--workload"]).arg(&s).output().unwrap();
    assert_eq!(tight.status.code(), Some(3));
    let f32 = bin().args(["verify", "--f32-partials", "--workload"]).arg(&s).output().unwrap();
    assert_eq!(f32.status.code(), Some(3));

    let table = dir.path().join("table.json");
    assert!(run(bin().args(["gen", "--spec"]).arg(&s).arg("--out").arg(&table)).status.success());
    let t = run(bin().args(["verify", "--strategy", "naive", "--heads", "8:2:64", "--workload"]).arg(&table));
    assert!(t.status.success());
}

fn sweep_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn fanout_sweep_ratio_is_non_decreasing() {
    let dir = TempDir::new().unwrap();
    let sc = scenario(dir.path(), spec(&[1, 1], &[512, 32]), &["pat", "query_centric"]);
    let out = dir.path().join("sweep.csv");
    let o = run(bin().args(["sweep", "--axis", "fanout", "--values", "1..=12", "--scenario"]).arg(&sc).arg("--out").arg(&out));
    assert!(o.status.success());
    let rows = sweep_rows(&out);
    assert_eq!(rows.len(), 24);
    let ratios: Vec<f64> = rows.iter().filter(|r| r[2] == "query_centric").map(|r| r[6].parse().unwrap()).collect();
    assert!(ratios.windows(2).all(|w| w[0] <= w[1]), "{ratios:?}");
    assert!(rows.iter().filter(|r| r[2] == "pat").all(|r| r[6] == "1"));
}

#[test]
fn empty_and_single_point_sweeps() {
    let dir = TempDir::new().unwrap();
    let sc = scenario(dir.path(), spec(&[1, 4], &[128, 32]), &["pat", "naive"]);
    let empty = dir.path().join("empty.csv");
    assert!(run(bin().args(["sweep", "--axis", "batch", "--values", "", "--scenario"]).arg(&sc).arg("--out").arg(&empty))
        .status
        .success());
    assert_eq!(std::fs::read_to_string(&empty).unwrap().lines().count(), 1);

    let one = dir.path().join("one.csv");
    assert!(run(bin().args(["sweep", "--axis", "batch", "--values", "4", "--scenario"]).arg(&sc).arg("--out").arg(&one))
        .status
        .success());
    assert!(run(bin().args(["run", "--scenario"]).arg(&sc)).status.success());
    let from_run: Vec<String> = std::fs::read_to_string(dir.path().join("out/report.csv")).unwrap().lines().skip(1).map(String::from).collect();
    let from_sweep: Vec<String> = sweep_rows(&one).into_iter().map(|r| r[2..].join(",")).collect();
    assert_eq!(from_run, from_sweep);

    let bad = bin().args(["sweep", "--axis", "batch", "--values", "0", "--scenario"]).arg(&sc).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
