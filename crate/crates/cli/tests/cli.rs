use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
variant = "combined"
seed = 4
reseeds = 0

[dataset]
n_traj = 40
grid = { dt_slow = 0.1, m = 10, substeps = 1 }

[train]
epochs = 2
batch_size = 16

[evaluation]
n_traj = 3
n_slow = 5

[stability]
angular = 16
radial = 4
refine_levels = 1
candidates = 2
polish = false

[study]
n_starts = 2
horizon = 3
coarse_resolution = 0.5
scan_resolution = 0.1
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_tss-koopman"))
        .arg("--config")
        .arg(dir.join("config.toml"))
        .arg("--out")
        .arg(dir)
        .args(["--threads", "1"])
        .args(args)
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn help_documents_every_command_and_flag() {
    let out = Command::new(env!("CARGO_BIN_EXE_tss-koopman")).arg("--help").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    for word in [
        "simulate", "gen-data", "train", "stability", "lqr-solve", "ocp", "study", "reproduce", "--config", "--seed",
        "--out", "--threads", "--variant",
    ] {
        assert!(text.contains(word), "help lacks {word}");
    }
}

#[test]
fn pipeline_runs_step_by_step() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("config.toml"), CONFIG).unwrap();

    run(d, &["simulate", "--n-traj", "2", "--n-slow", "3"]);
    let traj = std::fs::read_to_string(d.join("trajectories.csv")).unwrap();
    assert!(traj.starts_with("t,x1,x2,y1,y2,w,u,traj_id"));
    assert_eq!(traj.lines().count(), 1 + 2 * 31);

    run(d, &["gen-data"]);
    run(d, &["train", "--data", d.join("dataset.csv").to_str().unwrap()]);
    let model = d.join("model.bin");
    let model = model.to_str().unwrap();
    run(d, &["lqr-solve", "--model", model]);
    let policy = d.join("policy.bin");
    let policy = policy.to_str().unwrap();
    run(d, &["stability", "--model", model, "--policy", policy]);
    run(d, &["ocp", "--model", model, "--policy", policy, "--actuation", "lqr"]);
    run(d, &["study", "--model", model, "--policy", policy]);

    for f in ["dataset.csv", "dataset.json", "train_log.csv", "stability_table.csv", "ocp.csv", "ocp.json", "policy_study.csv", "study_summary.json"] {
        assert!(d.join(f).exists(), "{f} missing");
    }
    let study = std::fs::read_to_string(d.join("policy_study.csv")).unwrap();
    assert_eq!(study.lines().count(), 3);
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.toml"), "bogus = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tss-koopman"))
        .arg("--config")
        .arg(dir.path().join("config.toml"))
        .arg("reproduce")
        .output()
        .unwrap();
    assert!(!out.status.success());
}
