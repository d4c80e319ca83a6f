//! End-to-end tests of the `lanepilot` binary: exit-code contract, output
//! files, byte-level reproducibility, and a small full-pipeline run.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_lanepilot");

/// Bytes of one dataset file holding `n` samples: a 16-byte header plus
/// fixed-size records.
fn dataset_bytes(n: u64) -> u64 {
    16 + n * 24585
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn assert_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) {
    fs::write(dir.join("config.json"), body).expect("write config");
}

#[test]
fn missing_config_file_exits_2_naming_the_path() {
    let tmp = TempDir::new().unwrap();
    let out = run_in(tmp.path(), &["collect", "--config", "does-not-exist.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr_of(&out).contains("does-not-exist.json"),
        "stderr should name the missing file: {}",
        stderr_of(&out)
    );
}

#[test]
fn unknown_config_key_exits_2() {
    let tmp = TempDir::new().unwrap();
    write_config(tmp.path(), r#"{ "seed": 1, "bogus_key": true }"#);
    let out = run_in(tmp.path(), &["collect"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr_of(&out).contains("bogus_key"),
        "stderr should name the unknown key: {}",
        stderr_of(&out)
    );
}

#[test]
fn mismatched_gain_pair_exits_2() {
    let tmp = TempDir::new().unwrap();
    write_config(tmp.path(), r#"{ "seed": 1, "expert": { "kp": 8.0 } }"#);
    let out = run_in(tmp.path(), &["collect"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("kp"), "stderr: {}", stderr_of(&out));
}

#[test]
fn offline_eval_without_checkpoint_file_exits_2_naming_it() {
    let tmp = TempDir::new().unwrap();
    write_config(
        tmp.path(),
        r#"{
            "seed": 1,
            "eval": { "checkpoints": [ { "label": "X", "path": "missing/model.imnn" } ] }
        }"#,
    );
    let out = run_in(tmp.path(), &["eval-offline"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr_of(&out).contains("missing/model.imnn"),
        "stderr should name the checkpoint: {}",
        stderr_of(&out)
    );
}

#[test]
fn gradient_check_passes_and_writes_report() {
    let tmp = TempDir::new().unwrap();
    let out = run_in(tmp.path(), &["gradcheck"]);
    assert_success(&out, "gradcheck");
    let report = fs::read_to_string(tmp.path().join("out/gradcheck.json")).unwrap();
    assert_eq!(report.matches("\"passed\": true").count(), 2, "report: {report}");
}

#[test]
fn collection_writes_exactly_sized_files_and_reruns_byte_identically() {
    let tmp = TempDir::new().unwrap();
    write_config(
        tmp.path(),
        r#"{
            "seed": 5,
            "expert": { "kp": 8.0, "kd": 2.0 },
            "collect": { "frames_per_source": 3 }
        }"#,
    );
    let names = ["SIM-LP", "SIM-IS", "PSEUDO-REAL-A", "PSEUDO-REAL-B"];

    let out = run_in(tmp.path(), &["collect", "--out", "a"]);
    assert_success(&out, "collect a");
    for name in names {
        let path = tmp.path().join("a").join(format!("{name}.imds"));
        assert_eq!(
            fs::metadata(&path).expect("dataset file exists").len(),
            dataset_bytes(3),
            "{name} has the packed size"
        );
    }
    assert!(tmp.path().join("a/collect_report.json").exists());
    assert!(tmp.path().join("a/config.json").exists(), "effective config is echoed");

    let out = run_in(tmp.path(), &["collect", "--out", "b"]);
    assert_success(&out, "collect b");
    for name in names {
        let a = fs::read(tmp.path().join("a").join(format!("{name}.imds"))).unwrap();
        let b = fs::read(tmp.path().join("b").join(format!("{name}.imds"))).unwrap();
        assert_eq!(a, b, "{name} rerun must be byte-identical");
    }
}

#[test]
fn seed_flag_overrides_config_and_is_echoed() {
    let tmp = TempDir::new().unwrap();
    write_config(
        tmp.path(),
        r#"{
            "seed": 5,
            "expert": { "kp": 8.0, "kd": 2.0 },
            "collect": { "frames_per_source": 2, "sources": [
                { "name": "ONLY", "map": "loop", "domain": "SIM-LP" }
            ] }
        }"#,
    );
    let base = run_in(tmp.path(), &["collect", "--out", "base"]);
    assert_success(&base, "collect base");
    let reseeded = run_in(tmp.path(), &["collect", "--out", "reseeded", "--seed", "99"]);
    assert_success(&reseeded, "collect reseeded");

    let echo = fs::read_to_string(tmp.path().join("reseeded/config.json")).unwrap();
    assert!(echo.contains("99"), "echoed config must carry the override: {echo}");
    let a = fs::read(tmp.path().join("base/ONLY.imds")).unwrap();
    let b = fs::read(tmp.path().join("reseeded/ONLY.imds")).unwrap();
    assert_ne!(a, b, "a different seed must change the collected data");
}

/// The whole pipeline, desk-sized: calibrate the expert, collect four small
/// sources, train a two-epoch model on their equal mix, score it offline on
/// each source's holdout, then drive it (and the expert) closed-loop.
#[test]
fn pipeline_runs_end_to_end() {
    let tmp = TempDir::new().unwrap();
    write_config(
        tmp.path(),
        r#"{
            "seed": 7,
            "expert": { "kp": 8.0, "kd": 2.0 },
            "collect": { "frames_per_source": 40 },
            "train": { "label": "HYBRID", "epochs": 2, "seeds": 1, "batch_size": 16 },
            "eval": {
                "starts": 1,
                "time_limit_s": 2.0,
                "rollout_seeds": 1,
                "checkpoints": [ { "label": "HYBRID", "path": "out/HYBRID/seed-0.imnn" } ],
                "keep_traces": true
            }
        }"#,
    );

    let out = run_in(tmp.path(), &["calibrate"]);
    assert_success(&out, "calibrate");
    let gains = fs::read_to_string(tmp.path().join("out/gains.json")).unwrap();
    assert!(gains.contains("\"kp\""), "gains.json: {gains}");

    let out = run_in(tmp.path(), &["collect"]);
    assert_success(&out, "collect");

    let out = run_in(tmp.path(), &["train"]);
    assert_success(&out, "train");
    assert!(tmp.path().join("out/HYBRID/seed-0.imnn").exists());
    let result = fs::read_to_string(tmp.path().join("out/HYBRID/result.json")).unwrap();
    assert!(result.contains("\"selected\""), "result.json: {result}");

    let out = run_in(tmp.path(), &["eval-offline"]);
    assert_success(&out, "eval-offline");
    let matrix = fs::read_to_string(tmp.path().join("out/mse_matrix.txt")).unwrap();
    assert!(matrix.starts_with("method |"), "matrix header: {matrix}");
    assert!(matrix.contains("HYBRID"), "matrix rows: {matrix}");
    assert!(matrix.contains("SIM-LP") && matrix.contains("PSEUDO-REAL-B"));

    let out = run_in(tmp.path(), &["eval-loop"]);
    assert_success(&out, "eval-loop");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("out/closed_loop.json")).unwrap())
            .unwrap();
    let policies = report["policies"].as_array().unwrap();
    let labels: Vec<&str> = policies.iter().map(|p| p["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["EXPERT", "HYBRID"]);
    let expert_clean = policies[0]["clean"]["mean"].as_f64().unwrap();
    assert!(expert_clean > 0.5, "the expert should drive on unseen roads, got {expert_clean}");
    for policy in ["EXPERT", "HYBRID"] {
        for scenario in ["SIM-LP-start-0", "PSEUDO-REAL-B-start-0"] {
            let trace = tmp.path().join(format!("out/traces/{policy}/{scenario}.csv"));
            let text = fs::read_to_string(&trace).expect("trace CSV exists");
            assert!(text.starts_with("t,x,y,theta,d,phi,v_left,v_right"));
        }
    }

    let out = run_in(tmp.path(), &["dump-frames"]);
    assert_success(&out, "dump-frames");
    let n_png = fs::read_dir(tmp.path().join("out/frames")).unwrap().count();
    assert_eq!(n_png, 16, "four frames for each of the four sources");
}
