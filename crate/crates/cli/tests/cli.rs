use std::path::Path;
use std::process::{Command, Output};

fn dauction() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dauction"));
    cmd.env_remove("DAUCTION_OUT");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    if !out.status.success() {
        eprintln!("stdout:\n{}", String::from_utf8_lossy(&out.stdout));
        eprintln!("stderr:\n{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

const TINY: [&str; 10] = [
    "--set",
    "network.hidden_layers=[4, 4]",
    "--set",
    "train.sample_count=512",
    "--set",
    "train.epochs=1",
    "--set",
    "train.misreport_steps=3",
    "--set",
    "train.seed=5",
];

fn train_tiny(out: &Path, threads: Option<&str>) -> Output {
    let mut cmd = dauction();
    if let Some(t) = threads {
        cmd.args(["--threads", t]);
    }
    cmd.arg("train").args(TINY).arg("--out").arg(out);
    run(&mut cmd)
}

#[test]
fn train_smoke_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), None);
    assert!(out.status.success());
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("epoch,loss,welfare"));
    assert!(lines[1].split(',').skip(1).all(|x| x.parse::<f64>().unwrap().is_finite()));
    assert!(dir.path().join("checkpoint.ckpt").is_file());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("train.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["config"]["train"]["epochs"], 1);
}

#[test]
fn single_threaded_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(train_tiny(a.path(), Some("1")).status.success());
    assert!(train_tiny(b.path(), Some("1")).status.success());
    for name in ["train_log.csv", "checkpoint.ckpt"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
}

#[test]
fn finished_run_resumes_as_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_tiny(dir.path(), None).status.success());
    let ckpt = dir.path().join("checkpoint.ckpt");
    let before = std::fs::read(&ckpt).unwrap();
    let again = tempfile::tempdir().unwrap();
    let out = run(dauction()
        .arg("train")
        .args(TINY)
        .arg("--resume")
        .arg(&ckpt)
        .arg("--out")
        .arg(again.path()));
    assert!(out.status.success());
    assert!(!again.path().join("checkpoint.ckpt").exists());
    assert_eq!(std::fs::read(&ckpt).unwrap(), before);
}

#[test]
fn resume_rejects_a_different_network() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_tiny(dir.path(), None).status.success());
    let out = run(dauction()
        .arg("train")
        .args(TINY)
        .args(["--set", "network.hidden_layers=[5, 4]", "--resume"])
        .arg(dir.path().join("checkpoint.ckpt"))
        .arg("--out")
        .arg(dir.path()));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dauction().args(["train", "--set", "train.epoch=1", "--out"]).arg(dir.path()));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
}

#[test]
fn missing_config_file_exits_2() {
    let out = run(dauction().args(["eval", "--config", "/nonexistent/run.toml"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_passes_and_catches_an_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("verify.json");
    let ok = run(dauction().args(["verify", "--json"]).arg(&json));
    assert!(ok.status.success());
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert!(report["checks"].as_array().unwrap().iter().all(|c| c["passed"] == true));

    let bad = run(dauction().args(["verify", "--inject-fault"]));
    assert_eq!(bad.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&bad.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("FAIL grad tanh")), "{stdout}");
}

#[test]
fn sweep_writes_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dauction()
        .args(["sweep", "--spec", "1x1:b0,s0", "--protocol", "md", "--out"])
        .arg(dir.path()));
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "b0,s0,g_0_0,p0,r0");
    assert_eq!(lines.count(), 201 * 201);
    assert!(dir.path().join("sweep.manifest.json").is_file());
}

#[test]
fn sweep_of_a_checkpoint_checks_its_shape() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_tiny(dir.path(), None).status.success());
    let ckpt = dir.path().join("checkpoint.ckpt");
    let ok = run(dauction()
        .args(["sweep", "--spec", "2x2:b0;b1=0.7;s0=0.3;s1=0.4;step=0.1", "--checkpoint"])
        .arg(&ckpt)
        .arg("--out")
        .arg(dir.path()));
    assert!(ok.status.success());
    let rows = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 11);

    let bad = run(dauction()
        .args(["sweep", "--spec", "1x1:b0", "--checkpoint"])
        .arg(&ckpt)
        .arg("--out")
        .arg(dir.path()));
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn eval_without_a_checkpoint_reports_the_protocols() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dauction().args(["eval", "--setting", "2x2", "--out"]).arg(dir.path()));
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("2x2,grid-0.1,md,14641,"));
    assert!(rows[2].starts_with("2x2,grid-0.1,vcg,14641,"));
    assert!(dir.path().join("metrics.json").is_file());
    assert!(dir.path().join("eval.manifest.json").is_file());
}

#[test]
fn eval_runs_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_tiny(dir.path(), None).status.success());
    let out = run(dauction()
        .args(["eval", "--setting", "2x2", "--set", "eval.regret.restarts=0", "--set", "eval.regret.steps=2"])
        .arg("--checkpoint")
        .arg(dir.path().join("checkpoint.ckpt"))
        .arg("--out")
        .arg(dir.path()));
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let model = csv.lines().nth(3).unwrap();
    assert!(model.starts_with("2x2,grid-0.1,drnet,14641,"));
    assert!(model.split(',').skip(4).all(|x| x.parse::<f64>().is_ok()), "{model}");
}

#[test]
fn baseline_covers_the_requested_settings() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dauction()
        .args(["baseline", "--setting", "2x2", "--setting", "5x5:3", "--set", "eval.sample_count=200", "--out"])
        .arg(dir.path()));
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("baseline.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[2].starts_with("5x5,") && rows[2].contains(",200,"), "{}", rows[2]);
}

#[test]
fn output_directory_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let env_out = dir.path().join("from-env");
    let out = run(dauction()
        .env("DAUCTION_OUT", &env_out)
        .args(["sweep", "--spec", "1x1:b0;s0=0.5;step=0.5", "--protocol", "vcg"]));
    assert!(out.status.success());
    assert!(env_out.join("sweep.csv").is_file());

    let flag_out = dir.path().join("from-flag");
    let out = run(dauction()
        .env("DAUCTION_OUT", &env_out)
        .args(["sweep", "--spec", "1x1:b0;s0=0.5;step=0.5", "--protocol", "vcg", "--name", "x.csv", "--out"])
        .arg(&flag_out));
    assert!(out.status.success());
    assert!(flag_out.join("x.csv").is_file());
    assert!(!env_out.join("x.csv").exists());
}
