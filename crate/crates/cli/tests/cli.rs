//! End-to-end CLI checks: stage-by-stage execution matches the one-shot
//! `experiment` command, and failures exit nonzero with stage-tagged
//! diagnostics.

use std::path::Path;
use std::process::Command;

fn augbench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_augbench"))
}

const MICRO_CONFIG: &str = r#"{
  "corpus": {"kind": "generated", "n_per_class": 20, "size": 32},
  "scenario": {"kind": "small", "n_small_per_class": 6},
  "ddpm": {"timesteps": 6, "epochs": 1, "batch_size": 4,
           "unet": {"input_size": 32, "base_channels": 4, "depth": 2, "time_dim": 8, "channels": 1}},
  "pggan": {"latent_dim": 8, "target_resolution": 32, "batch_size": 2,
            "steps_per_stage": 2, "filter_override": 4},
  "synth_per_class": 3,
  "classifier": {"models": ["custom_cnn"], "input_size": 32, "batch_size": 8,
                 "lr": 0.001, "cnn_epochs": 1, "vgg_epochs": 1},
  "runs": 2,
  "master_seed": 11
}"#;

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, MICRO_CONFIG).unwrap();
    path
}

#[test]
fn staged_run_matches_one_shot_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let staged = dir.path().join("staged");
    let oneshot = dir.path().join("oneshot");

    for stage in [
        "gen-corpus",
        "scenario",
        "train-ddpm",
        "train-pggan",
        "synth",
        "fid",
        "train-classifier",
        "report",
        "audit",
    ] {
        let out = augbench()
            .args([stage, "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&staged)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{stage} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }

    let out = augbench()
        .args(["experiment", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&oneshot)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "experiment failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );

    for f in ["report/runs.csv", "report/fid.csv", "report/expert.csv"] {
        let a = std::fs::read_to_string(staged.join(f)).unwrap();
        let b = std::fs::read_to_string(oneshot.join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between staged and one-shot runs");
    }
    assert!(oneshot.join("report/summary.json").exists());
    assert!(oneshot.join("report/summary.txt").exists());
}

#[test]
fn seed_override_changes_results() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for (out, seed) in [(&out_a, "11"), (&out_b, "12")] {
        let status = augbench()
            .args(["gen-corpus", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(out)
            .args(["--seed", seed])
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read(out_a.join("corpus/class_0").read_dir().unwrap().next().unwrap().unwrap().path()).unwrap();
    let b = std::fs::read(out_b.join("corpus/class_0").read_dir().unwrap().next().unwrap().unwrap().path()).unwrap();
    assert_ne!(a, b, "different seeds must generate different corpora");
}

/// Results must not depend on the rayon pool size.
#[test]
fn results_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out_1 = dir.path().join("threads1");
    let out_2 = dir.path().join("threads2");
    for (out, threads) in [(&out_1, "1"), (&out_2, "2")] {
        let status = augbench()
            .args(["experiment", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(out)
            .env("RAYON_NUM_THREADS", threads)
            .status()
            .unwrap();
        assert!(status.success());
    }
    for f in ["report/runs.csv", "report/fid.csv"] {
        let a = std::fs::read(out_1.join(f)).unwrap();
        let b = std::fs::read(out_2.join(f)).unwrap();
        assert_eq!(a, b, "{f} differs across thread counts");
    }
}

#[test]
fn bad_config_exits_nonzero_with_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{"ddpm": {"timestepz": 5}}"#).unwrap();
    let out = augbench()
        .args(["gen-corpus", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("timestepz"), "{err}");
}

#[test]
fn missing_prerequisite_stage_reports_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = augbench()
        .args(["train-ddpm", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("fresh"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("scenario"), "{err}");
}
