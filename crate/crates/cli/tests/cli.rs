use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_splitshield"));
    c.env_remove("SPLITSHIELD_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn demo_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("demo.toml").display().to_string()
}

#[test]
fn in_process_psu_reports_the_union() {
    let o = run(&["psu", "--in-process", "--size-a", "64", "--size-b", "64", "--overlap", "0.5", "--group", "safe128"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("|U| = 96"), "{out}");
    assert!(out.contains("maps consistent: true"), "{out}");
}

#[test]
fn demo_training_writes_the_step_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--config", &demo_config(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let steps = fs::read_to_string(dir.path().join("steps.csv")).unwrap();
    assert_eq!(steps.lines().next().unwrap(), "step,train_loss,leak_auc_norm,test_loss,test_auc");
    assert!(steps.lines().count() > 10);
    assert!(dir.path().join("summary.csv").exists());
    assert!(stdout(&o).contains("leak_auc_norm = "));
}

#[test]
fn sweep_then_report_gives_a_sorted_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.toml");
    fs::write(
        &cfg,
        r#"
seed = 1

[dataset]
n = 3000

[train]
batch_size = 256
epochs = 1

[[attacks]]
attack = "norm"

[protection]
kind = "marvell"
L = 0.1

[sweep]
param = "protection.L"
values = [0.4, 0.1, 0.25]
seeds = [1, 2]
"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = run(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["report", out.join("summary.csv").to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = stdout(&o);
    let mut lines = table.lines();
    assert_eq!(lines.next().unwrap(), "param,leak_auc,test_auc,test_loss,ace");
    let params: Vec<f64> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(params, vec![0.1, 0.25, 0.4]);
}

#[test]
fn unknown_flags_are_usage_errors() {
    assert_eq!(run(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let o = run(&["attack", "--grads", "/nonexistent/grads.csv"]);
    assert!(!o.status.success());
    assert_ne!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn gen_data_is_deterministic() {
    let a = run(&["gen-data", "--n", "50", "--seed", "9"]);
    let b = run(&["gen-data", "--n", "50", "--seed", "9"]);
    let c = run(&["gen-data", "--n", "50", "--seed", "10"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
    assert_eq!(stdout(&a).lines().count(), 51);
}

#[test]
fn seed_comes_from_the_environment() {
    let plain = run(&["gen-data", "--n", "20"]);
    let with_env = bin().args(["gen-data", "--n", "20"]).env("SPLITSHIELD_SEED", "77").output().unwrap();
    let explicit = run(&["gen-data", "--n", "20", "--seed", "77"]);
    assert_ne!(plain.stdout, with_env.stdout);
    assert_eq!(with_env.stdout, explicit.stdout);
    let bad = bin().args(["gen-data", "--n", "20"]).env("SPLITSHIELD_SEED", "x").output().unwrap();
    assert!(!bad.status.success());
}

#[test]
fn dumped_gradients_can_be_attacked_offline() {
    let dir = tempfile::tempdir().unwrap();
    let grads = dir.path().join("grads.csv");
    let o = run(&[
        "train",
        "--config",
        &demo_config(),
        "--epochs",
        "1",
        "--out",
        dir.path().to_str().unwrap(),
        "--dump-grads",
        grads.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for attack in ["norm", "spectral", "hint"] {
        let o = run(&["attack", "--grads", grads.to_str().unwrap(), "--attack", attack]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let line = stdout(&o);
        let v: f64 = line.trim().rsplit(" = ").next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&v), "{line}");
    }
}
