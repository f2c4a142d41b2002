//! End-to-end command tests driving the compiled binary.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn consor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_consor"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Recursively collects file bytes keyed by relative path.
fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn gen_small_toy(dir: &Path) {
    let out = consor(&[
        "gen-toy",
        "--seed",
        "7",
        "--out",
        dir.to_str().unwrap(),
        "--images",
        "6",
        "--persons",
        "2",
        "--classes",
        "2",
    ]);
    assert_ok(&out, "gen-toy");
}

#[test]
fn gen_toy_trees_are_bit_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    gen_small_toy(a.path());
    gen_small_toy(b.path());
    let ta = tree_bytes(a.path());
    let tb = tree_bytes(b.path());
    assert_eq!(
        ta.keys().collect::<Vec<_>>(),
        tb.keys().collect::<Vec<_>>(),
        "file sets differ"
    );
    for (path, bytes) in &ta {
        assert_eq!(bytes, &tb[path], "file {path} differs between runs");
    }
}

#[test]
fn full_pipeline_train_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    gen_small_toy(dir.path());
    let config = dir.path().join("run_config.json");
    let config = config.to_str().unwrap();

    let out = consor(&["train", "--config", config]);
    assert_ok(&out, "train");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().any(|l| l.contains("\"event\":\"step\"")));
    let ckpt = dir.path().join("run/checkpoint.fpk");
    assert!(ckpt.exists());
    assert!(dir.path().join("run/train_log.jsonl").exists());
    assert!(dir.path().join("run/run_manifest.json").exists());

    let out = consor(&[
        "eval",
        "--config",
        config,
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_ok(&out, "eval");
    let metrics: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("run/metrics.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(metrics["mode"], "standard");
    assert_eq!(metrics["n_samples"], 12);
    assert!(dir.path().join("run/scores.csv").exists());

    // Zero-shot mode is labeled as such.
    let zs_out = dir.path().join("zs");
    let out = consor(&[
        "eval",
        "--config",
        config,
        "--mode",
        "zeroshot",
        "--out",
        zs_out.to_str().unwrap(),
    ]);
    assert_ok(&out, "eval zeroshot");
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(zs_out.join("metrics.json")).unwrap())
            .unwrap();
    assert_eq!(metrics["mode"], "zeroshot");

    // Metrics can be recomputed from the score table alone.
    let rep_out = dir.path().join("rep");
    let out = consor(&[
        "report",
        "--config",
        config,
        "--scores",
        dir.path().join("run/scores.csv").to_str().unwrap(),
        "--out",
        rep_out.to_str().unwrap(),
    ]);
    assert_ok(&out, "report");
    let recomputed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(rep_out.join("metrics.json")).unwrap())
            .unwrap();
    let original: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("run/metrics.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(recomputed["map"], original["map"]);
    assert_eq!(recomputed["acc1"], original["acc1"]);
}

#[test]
fn eval_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    gen_small_toy(dir.path());
    let config = dir.path().join("run_config.json");
    let config = config.to_str().unwrap();
    assert_ok(&consor(&["train", "--config", config]), "train");
    let ckpt = dir.path().join("run/checkpoint.fpk");

    let args = [
        "eval",
        "--config",
        config,
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ];
    assert_ok(&consor(&args), "first eval");
    let first = std::fs::read(dir.path().join("run/metrics.json")).unwrap();
    let first_csv = std::fs::read(dir.path().join("run/scores.csv")).unwrap();
    assert_ok(&consor(&args), "second eval");
    assert_eq!(
        first,
        std::fs::read(dir.path().join("run/metrics.json")).unwrap()
    );
    assert_eq!(
        first_csv,
        std::fs::read(dir.path().join("run/scores.csv")).unwrap()
    );
}

#[test]
fn grad_check_command_passes() {
    let dir = tempfile::tempdir().unwrap();
    gen_small_toy(dir.path());
    let config = dir.path().join("run_config.json");
    let out = consor(&[
        "grad-check",
        "--config",
        config.to_str().unwrap(),
        "--coords",
        "40",
    ]);
    assert_ok(&out, "grad-check");
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("run/grad_check.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["checked"], 40);
}

#[test]
fn vocabs_prompts_and_attention_export() {
    let dir = tempfile::tempdir().unwrap();
    gen_small_toy(dir.path());
    let config = dir.path().join("run_config.json");
    let config = config.to_str().unwrap();

    assert_ok(
        &consor(&["select-vocabs", "--config", config]),
        "select-vocabs",
    );
    let selections: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("run/vocab_selections.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(selections.as_array().unwrap().len(), 6);

    assert_ok(
        &consor(&["build-prompts", "--config", config]),
        "build-prompts",
    );
    let prompt_file = dir.path().join("run/prompts/img0000.txt");
    let prompts = std::fs::read_to_string(prompt_file).unwrap();
    assert_eq!(prompts.lines().count(), 2, "one candidate per class");
    for line in prompts.lines() {
        assert!(line.starts_with("In this photo, the social relation of this person pair is"));
    }

    assert_ok(
        &consor(&[
            "export-attn",
            "--config",
            config,
            "--image",
            "img0000",
            "--pair",
            "0,1",
        ]),
        "export-attn",
    );
    let export: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("run/attention_img0000_0-1.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(export["pair"], serde_json::json!([0, 1]));
    assert_eq!(export["grid"], serde_json::json!([4, 4]));
    let rows = export["layers"][0][0].as_array().unwrap();
    for row in rows {
        let sum: f64 = row
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .sum();
        assert!((sum - 1.0).abs() < 1e-5);
    }
}

#[test]
fn synthetic_fixture_build_supports_zeroshot_eval() {
    let dir = tempfile::tempdir().unwrap();
    gen_small_toy(dir.path());
    // Point a fresh config at a new fixture tree built from the
    // synthetic provider, then evaluate zero-shot from those fixtures.
    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run_config.json")).unwrap())
            .unwrap();
    cfg["paths"]["fixtures"] = serde_json::json!("synth_fixtures");
    cfg["provider_seed"] = serde_json::json!(3);
    let cfg_path = dir.path().join("synth_config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

    assert_ok(
        &consor(&["build-fixtures", "--config", cfg_path.to_str().unwrap()]),
        "build-fixtures",
    );
    assert!(dir.path().join("synth_fixtures/img0000.fpk").exists());
    assert_ok(
        &consor(&[
            "eval",
            "--config",
            cfg_path.to_str().unwrap(),
            "--mode",
            "zeroshot",
        ]),
        "zeroshot over built fixtures",
    );
}

#[test]
fn usage_errors_exit_two() {
    let out = consor(&["train", "--config", "/nonexistent/config.json"]);
    assert_eq!(out.status.code(), Some(2), "missing config must exit 2");
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line: serde_json::Value =
        serde_json::from_str(stderr.lines().next().unwrap()).expect("machine-parsable error");
    assert_eq!(line["error"], "config");

    let out = consor(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2), "unknown flag must exit 2");
}

#[test]
fn missing_fixture_error_is_classified() {
    let dir = tempfile::tempdir().unwrap();
    gen_small_toy(dir.path());
    // Remove one image fixture and evaluate: the failure must carry the
    // missing-fixture category and name the id.
    std::fs::remove_file(dir.path().join("fixtures/img0003.fpk")).unwrap();
    let config = dir.path().join("run_config.json");
    let out = consor(&[
        "eval",
        "--config",
        config.to_str().unwrap(),
        "--mode",
        "zeroshot",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line: serde_json::Value = serde_json::from_str(stderr.lines().next().unwrap()).unwrap();
    assert_eq!(line["error"], "missing-fixture");
    assert!(line["message"].as_str().unwrap().contains("img0003"));
}
