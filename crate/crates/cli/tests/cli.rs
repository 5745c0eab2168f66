use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use memlab::{Manifest, Status};

const TINY: &str = r#"{
  "model": {"n_layers": 1, "d_model": 16, "n_heads": 2, "d_head": 8, "d_mlp": 32, "max_context": 128},
  "pretrain": {"steps": 20},
  "injection": {"n_sequences": 2, "period": 10, "occurrences": 2},
  "training": {"start_step": 20, "warmup_steps": 10, "trace_every": 5, "checkpoint_every": 10},
  "analysis": {"measure": {"stride": 16}, "dependency_steps": 2, "pool_size": 8, "intervention_samples": 2}
}"#;

fn memlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memlab")).args(args).output().expect("spawn memlab")
}

fn manifest(dir: &Path) -> Manifest {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).expect("manifest")).expect("parse manifest")
}

fn setup() -> (tempfile::TempDir, String, String) {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let cache = format!("cache_dir={}", tmp.path().join("cache").display());
    (tmp, cfg.display().to_string(), cache)
}

#[test]
fn stages_resume_in_one_run_directory() {
    let (tmp, cfg, cache) = setup();
    let out = tmp.path().join("run");
    let o = memlab(&["train", "--config", &cfg, "--set", &cache, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(manifest(&out).stages, ["inject", "train"]);

    for stage in ["measure", "depend"] {
        let o = memlab(&[stage, "--run", out.to_str().unwrap()]);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let m = manifest(&out);
    assert_eq!(m.status, Status::Success);
    assert_eq!(m.stages, ["inject", "train", "measure", "depend"]);
    assert!(out.join("reports/memorization_treatment.json").exists());
    assert!(out.join("reports/dependency.json").exists());

    let o = memlab(&["report", "--run", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("plots"));
}

#[test]
fn preset_run_succeeds_with_exit_zero() {
    let (tmp, cfg, cache) = setup();
    let out = tmp.path().join("p");
    let o = memlab(&["preset", "control-vs-treatment", "--config", &cfg, "--set", &cache, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&out);
    assert_eq!(m.status, Status::Success);
    // originals and their shuffles
    assert_eq!(m.injection_counts["treatment"], [2, 2, 2, 2]);
    for (rel, digest) in &m.artifacts {
        let bytes = fs::read(out.join(rel)).unwrap();
        assert_eq!(&memlab_sha(&bytes), digest, "{rel}");
    }
}

fn memlab_sha(bytes: &[u8]) -> String {
    use sha2::Digest;
    hex::encode(sha2::Sha256::digest(bytes))
}

#[test]
fn failed_run_exits_nonzero_and_marks_manifest() {
    let (tmp, cfg, cache) = setup();
    let out = tmp.path().join("bad");
    // two sequences cannot share a period of one step
    let o = memlab(&["train", "--config", &cfg, "--set", &cache, "--set", "injection.period=1", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    let m = manifest(&out);
    assert_eq!(m.status, Status::Failed);
    assert!(m.error.is_some());
}

#[test]
fn unknown_preset_is_rejected() {
    let o = memlab(&["preset", "no-such-preset"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown preset"));
}

#[test]
fn output_dir_of_another_config_is_refused() {
    let (tmp, cfg, cache) = setup();
    let out = tmp.path().join("run");
    assert!(memlab(&["inject", "--config", &cfg, "--set", &cache, "--out", out.to_str().unwrap()]).status.success());
    let o = memlab(&["inject", "--config", &cfg, "--set", &cache, "--set", "injection.offset_seed=6", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn bad_override_is_an_error() {
    let o = memlab(&["inject", "--set", "model.no_such_field=1"]);
    assert!(!o.status.success());
}
