//! End-to-end tests of the command-line interface, driving the real
//! binary over temp directories.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_shivae"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary should spawn");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(cmd: &mut Command) -> (i32, String) {
    let out = cmd.output().expect("binary should spawn");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).to_string())
}

/// Small experiment JSON used by every test; one mask replicate and a
/// short training run keep each invocation fast.
fn write_mini_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("mini.json");
    std::fs::write(
        &path,
        r#"{
  "preset": "synthetic-desk",
  "seed": 11,
  "num_sequences": 12,
  "seq_len": 20,
  "mask_rate": 0.3,
  "num_masks": 1,
  "methods": ["shi-vae", "mean", "locf"],
  "samples": 2,
  "train": { "epochs": 3, "annealing_epochs": 2, "batch_size": 8, "width": 8 }
}"#,
    )
    .unwrap();
    path
}

#[test]
fn stage_chain_reproduces_the_one_shot_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_mini_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let p = |name: &str| dir.path().join(name);

    run_ok(bin().args(["generate", "--config", cfg, "--out"]).arg(p("data")));
    run_ok(bin().args(["mask", "--config", cfg, "--data"]).arg(p("data")).arg("--out").arg(p("masks")));
    run_ok(
        bin()
            .args(["train", "--config", cfg, "--data"])
            .arg(p("data"))
            .arg("--mask")
            .arg(p("masks/mask_r00.csv"))
            .arg("--out")
            .arg(p("ckpt.json")),
    );
    run_ok(bin().args(["pipeline", "--config", cfg, "--out"]).arg(p("run")));

    // stage-by-stage invocations derive the same substreams as the
    // pipeline, so shared artifacts must be byte-identical
    for (chain, pipeline) in [
        ("data/data.csv", "run/data/data.csv"),
        ("masks/mask_r00.csv", "run/masks/mask_r00.csv"),
        ("ckpt.json", "run/checkpoints/ckpt_r00.json"),
    ] {
        let a = std::fs::read(p(chain)).unwrap();
        let b = std::fs::read(p(pipeline)).unwrap();
        assert_eq!(a, b, "{chain} and {pipeline} should match");
    }
}

#[test]
fn impute_evaluate_report_produce_usable_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_mini_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let p = |name: &str| dir.path().join(name);

    run_ok(bin().args(["generate", "--config", cfg, "--out"]).arg(p("data")));
    run_ok(bin().args(["mask", "--config", cfg, "--data"]).arg(p("data")).arg("--out").arg(p("masks")));
    run_ok(
        bin()
            .args(["train", "--config", cfg, "--data"])
            .arg(p("data"))
            .arg("--mask")
            .arg(p("masks/mask_r00.csv"))
            .arg("--out")
            .arg(p("ckpt.json")),
    );
    for method in ["shi-vae", "mean", "locf"] {
        let mut cmd = bin();
        cmd.args(["impute", "--method", method, "--samples", "2", "--seed", "11", "--data"])
            .arg(p("data"))
            .arg("--mask")
            .arg(p("masks/mask_r00.csv"))
            .arg("--out")
            .arg(p(&format!("imputed/{method}_r00")));
        if method == "shi-vae" {
            cmd.arg("--ckpt").arg(p("ckpt.json"));
        }
        run_ok(&mut cmd);
    }
    let out = run_ok(
        bin()
            .args(["evaluate", "--truth"])
            .arg(p("data"))
            .arg("--imputed")
            .arg(p("imputed"))
            .arg("--mask")
            .arg(p("masks"))
            .arg("--out")
            .arg(p("report")),
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    for method in ["shi-vae", "mean", "locf"] {
        assert!(stdout.contains(method), "evaluate output should list {method}:\n{stdout}");
    }
    run_ok(
        bin().args(["report", "--metrics"]).arg(p("report/metrics.json")).arg("--out").arg(p("report")),
    );
    for file in ["summary.csv", "per_attr.csv", "error.svg", "xcorr.svg"] {
        assert!(p(&format!("report/{file}")).exists(), "missing report/{file}");
    }
    let summary = std::fs::read_to_string(p("report/summary.csv")).unwrap();
    assert!(summary.lines().count() >= 4, "three methods plus header:\n{summary}");
}

#[test]
fn pipeline_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_mini_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    run_ok(bin().args(["pipeline", "--config", cfg, "--out"]).arg(dir.path().join("a")));
    run_ok(bin().args(["pipeline", "--config", cfg, "--out"]).arg(dir.path().join("b")));
    let a = std::fs::read(dir.path().join("a/report/metrics.json")).unwrap();
    let b = std::fs::read(dir.path().join("b/report/metrics.json")).unwrap();
    assert_eq!(a, b, "same seeds must give byte-identical metrics");
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    // unknown preset name
    let (code, stderr) =
        exit_code(bin().args(["generate", "--config", "no-such-preset", "--out"]).arg(dir.path()));
    assert_eq!(code, 2, "stderr: {stderr}");
    assert!(stderr.contains("no-such-preset"), "stderr: {stderr}");

    // dataset directory without a schema file
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let (code, stderr) = exit_code(
        bin().args(["mask", "--data"]).arg(&empty).arg("--out").arg(dir.path().join("masks")),
    );
    assert_eq!(code, 2, "stderr: {stderr}");
    assert!(stderr.contains("schema"), "stderr: {stderr}");
}

#[test]
fn model_method_without_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_mini_config(dir.path());
    run_ok(
        bin()
            .args(["generate", "--config", cfg.to_str().unwrap(), "--out"])
            .arg(dir.path().join("data")),
    );
    let (code, stderr) = exit_code(
        bin()
            .args(["impute", "--method", "shi-vae", "--data"])
            .arg(dir.path().join("data"))
            .arg("--out")
            .arg(dir.path().join("imp")),
    );
    assert_eq!(code, 2, "stderr: {stderr}");
    assert!(
        stderr.contains("locf") && stderr.contains("mean"),
        "error should list the available methods: {stderr}"
    );
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_mini_config(dir.path());
    run_ok(
        bin()
            .args(["generate", "--config", cfg.to_str().unwrap(), "--out"])
            .arg(dir.path().join("data")),
    );
    let bad = dir.path().join("bad_ckpt.json");
    std::fs::write(&bad, "{\"not\": \"a checkpoint\"}").unwrap();
    let (code, stderr) = exit_code(
        bin()
            .args(["impute", "--method", "shi-vae", "--data"])
            .arg(dir.path().join("data"))
            .arg("--ckpt")
            .arg(&bad)
            .arg("--out")
            .arg(dir.path().join("imp")),
    );
    assert_eq!(code, 3, "stderr: {stderr}");
}
