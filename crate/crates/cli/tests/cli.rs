use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dpsvrg(args: &[&str], env_root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dpsvrg"));
    cmd.args(args).env_remove("DPSVRG_OUTPUT_ROOT");
    if let Some(root) = env_root {
        cmd.env("DPSVRG_OUTPUT_ROOT", root);
    }
    cmd.output().expect("binary runs")
}

const SPEC: &str = "\
name = tiny
data = data.csv
alpha = 0.01
lambda = 0.01
beta = 2
n0 = 2
outer_rounds = 2
nodes = 2
batch_size = 1
consensus = multi
seed = 1
record_errors = true
topology = ring-split
topology_b = 1
topology_eta = 0.1
topology_seed = 1
algorithms = reference, dpsvrg, dspg, inexact
lambda_sweep = 0.01, 0.1
";

fn setup(dir: &Path, spec: &str) -> std::path::PathBuf {
    let data = dir.join("data.csv");
    let out = dpsvrg(
        &["synth", "--n", "40", "--d", "4", "--sparsity", "2", "--seed", "3", "-o", data.to_str().unwrap()],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let path = dir.join("tiny.spec");
    fs::write(&path, spec).unwrap();
    path
}

#[test]
fn run_writes_curves_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let spec = setup(dir.path(), SPEC);
    let out = dpsvrg(&["run", spec.to_str().unwrap()], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let od = dir.path().join("out");
    for name in ["dpsvrg-lambda0.01-b1.csv", "dspg-lambda0.1-b1.csv", "inexact-lambda0.01-b1.csv"] {
        let body = fs::read_to_string(od.join(name)).unwrap();
        assert!(body.starts_with("algo,s,k,epoch_passes,comm_rounds,gap,"), "{name}");
        assert!(body.lines().count() > 3);
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(od.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["schema"], 1);
    assert_eq!(summary["references"].as_array().unwrap().len(), 2);
    assert_eq!(summary["runs"].as_array().unwrap().len(), 6);
    let dev = summary["runs"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["algo"] == "inexact")
        .unwrap()["replay_deviation"]
        .as_f64()
        .unwrap();
    assert!(dev <= 1e-8, "{dev}");
}

#[test]
fn output_root_env_overrides_spec() {
    let dir = tempfile::tempdir().unwrap();
    let root = tempfile::tempdir().unwrap();
    let spec = setup(dir.path(), &SPEC.replace("reference, dpsvrg, dspg, inexact", "reference"));
    let out = dpsvrg(&["run", spec.to_str().unwrap()], Some(root.path()));
    assert!(out.status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.path().join("tiny/summary.json")).unwrap()).unwrap();
    assert!(summary["runs"].as_array().unwrap().is_empty());
    assert!(summary["references"][0]["f_star"].as_f64().unwrap() > 0.0);
    assert!(summary["references"][0]["nonzeros"].as_u64().is_some());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn reference_prints_json() {
    let dir = tempfile::tempdir().unwrap();
    let spec = setup(dir.path(), SPEC);
    let out = dpsvrg(&["reference", spec.to_str().unwrap()], None);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);
    assert!(v[0]["grad_map_norm"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let spec = setup(dir.path(), &format!("{SPEC}bogus = 1\n"));
    let out = dpsvrg(&["run", spec.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    let missing = dpsvrg(&["run", dir.path().join("nope.spec").to_str().unwrap()], None);
    assert_eq!(missing.status.code(), Some(2));

    let bad = setup(dir.path(), &SPEC.replace("alpha = 0.01", "alpha = 0"));
    assert_eq!(dpsvrg(&["run", bad.to_str().unwrap()], None).status.code(), Some(2));

    fs::write(&spec, SPEC).unwrap();
    fs::write(dir.path().join("data.csv"), "1,2\n0,x\n").unwrap();
    let out = dpsvrg(&["run", spec.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn synth_libsvm_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.svm");
    let truth = dir.path().join("w.txt");
    let out = dpsvrg(
        &[
            "synth", "--n", "10", "--d", "5", "--sparsity", "2", "--format", "libsvm", "-o",
            path.to_str().unwrap(), "--truth", truth.to_str().unwrap(),
        ],
        None,
    );
    assert!(out.status.success());
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 10);
    assert!(text.lines().all(|l| l.starts_with('0') || l.starts_with('1')));
    let w: Vec<f64> = fs::read_to_string(&truth).unwrap().lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(w.iter().filter(|v| **v != 0.0).count(), 2);
    assert_eq!(dpsvrg(&["synth", "--n", "10", "--d", "2", "--sparsity", "3", "-o", "x"], None).status.code(), Some(2));
}

#[test]
fn verify_fast_passes() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("report.json");
    let out = dpsvrg(&["verify", "--level", "fast", "--json", json.to_str().unwrap()], None);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert!(!stdout.contains("FAIL"));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(v["passed"], true);
}
