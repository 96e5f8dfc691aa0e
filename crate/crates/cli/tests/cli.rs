use std::path::Path;
use std::process::{Command, Output};

fn fgq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fgq"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("cfg.json");
    let cfg = serde_json::json!({
        "model": {"tokens_per_view": 4, "in_dim": 4, "hidden_dim": 8, "aa_pairs": 2, "mlp_dim": 16, "pose_dim": 2},
        "data": {"n_train": 32, "n_calib": 8, "n_test": 8},
        "train": {"steps": 20, "batch_size": 8},
        "calib": {"epochs": 1},
        "output_dir": dir.join("run"),
    });
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn stages_chain_through_the_artifact_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    for verb in ["train", "fisher", "calibrate", "evaluate"] {
        let o = fgq(&[verb, "--config", &cfg, "--seed", "7"]);
        assert!(
            o.status.success(),
            "{}: {}",
            verb,
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let staged = std::fs::read(tmp.path().join("run/report.json")).unwrap();

    let o = fgq(&["pipeline", "--config", &cfg, "--seed", "7"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("method         fgq (W4A4)"));
    assert_eq!(
        std::fs::read(tmp.path().join("run/report.json")).unwrap(),
        staged
    );

    let o = fgq(&[
        "bench", "--config", &cfg, "--seed", "7", "--reps", "10", "--batch", "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(
        report["packed_weight_bytes"].as_u64().unwrap() * 4
            == report["f16_weight_bytes"].as_u64().unwrap()
    );
}

#[test]
fn evaluate_refuses_artifacts_of_another_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    assert!(fgq(&["pipeline", "--config", &cfg, "--method", "rtn"])
        .status
        .success());
    let o = fgq(&["evaluate", "--config", &cfg, "--method", "hadamard"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage `load` failed"));
}

#[test]
fn bad_inputs_exit_nonzero() {
    let o = fgq(&["evaluate", "--config", "/nonexistent/cfg.json"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("reading config"));
    assert!(!fgq(&["pipeline", "--method", "gptq"]).status.success());
}

#[test]
fn identity_check_passes_at_the_default_sample_count() {
    let o = fgq(&["verify-identity"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).ends_with(": ok\n"));
}
