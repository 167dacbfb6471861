//! End-to-end tests of the binary: exit-code contract and a stage-by-stage
//! pipeline run at micro scale.

use std::path::Path;
use std::process::Output;

/// A configuration small enough that every stage finishes in seconds.
const MICRO_CONFIG: &str = r#"{
    "seed": 5,
    "data": {"train_dyads": 4, "dyad": {"frames": 32, "seg_min": 8, "seg_max": 12}},
    "vae": {"steps": 30, "width": 32, "heads": 2, "enc_layers": 1, "dec_layers": 1},
    "flow": {"steps": 40, "width": 32, "heads": 2, "layers": 1},
    "sampler": {"steps": 4},
    "window": {"window_tokens": 4, "carry": 1},
    "gdpo": {"iters": 2, "group_size": 2, "rollout_steps": 2, "sync_every": 2},
    "metrics": {"eval_dyads": 2, "diversity_samples": 2, "diversity_contexts": 1}
}"#;

fn dyadflow(dir: &Path, args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_dyadflow"))
        .args(args)
        .env_remove("DYADFLOW_OUT")
        .current_dir(dir)
        .output()
        .expect("failed to spawn the binary")
}

fn assert_code(out: &Output, want: i32, context: &str) {
    assert_eq!(
        out.status.code(),
        Some(want),
        "{context}\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn help_and_version_exit_zero() {
    let tmp = tempfile::tempdir().unwrap();
    assert_code(&dyadflow(tmp.path(), &["--help"]), 0, "--help");
    assert_code(&dyadflow(tmp.path(), &["--version"]), 0, "--version");
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    // Unknown subcommands and flags are parse errors.
    assert_code(&dyadflow(dir, &["frobnicate"]), 1, "unknown subcommand");
    assert_code(&dyadflow(dir, &["gen-data", "--bogus"]), 1, "unknown flag");

    // A config with a typo is a usage error, not a runtime failure.
    let bad = dir.join("bad.json");
    std::fs::write(&bad, r#"{"flw": {"steps": 1}}"#).unwrap();
    let out = dyadflow(dir, &["gen-data", "--config", bad.to_str().unwrap()]);
    assert_code(&out, 1, "config typo");
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));

    // So is asking a stage to run before its inputs exist.
    let empty = dir.join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = dyadflow(dir, &["train-vae", "--out", empty.to_str().unwrap()]);
    assert_code(&out, 1, "missing data.nary");
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-data"));
}

#[test]
fn out_dir_falls_back_to_environment_variable() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = dir.join("cfg.json");
    std::fs::write(&cfg, MICRO_CONFIG).unwrap();
    let env_dir = dir.join("from-env");

    let out = std::process::Command::new(env!("CARGO_BIN_EXE_dyadflow"))
        .args(["gen-data", "--config", cfg.to_str().unwrap()])
        .env("DYADFLOW_OUT", &env_dir)
        .current_dir(dir)
        .output()
        .expect("failed to spawn the binary");
    assert_code(&out, 0, "gen-data with DYADFLOW_OUT");
    assert!(env_dir.join("data.nary").is_file());
    assert!(env_dir.join("gen-data.manifest.json").is_file());
}

#[test]
fn pipeline_runs_stage_by_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = dir.join("cfg.json");
    std::fs::write(&cfg, MICRO_CONFIG).unwrap();
    let cfg = cfg.to_str().unwrap();
    let run = dir.join("run");
    let out_dir = run.to_str().unwrap();

    for (stage, artifacts) in [
        ("gen-data", &["data.nary"][..]),
        ("train-vae", &["vae.nary"][..]),
        ("train-flow", &["flow.nary"][..]),
        ("posttrain-gdpo", &["gdpo.nary", "gdpo_log.json"][..]),
    ] {
        let out = dyadflow(dir, &[stage, "--config", cfg, "--out", out_dir]);
        assert_code(&out, 0, stage);
        for name in artifacts {
            assert!(run.join(name).is_file(), "{stage} did not write {name}");
        }
        let manifest = run.join(format!("{stage}.manifest.json"));
        let doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
        assert_eq!(doc["stage"], stage);
        assert_eq!(doc["seed"], 5);
        assert!(doc["wall_seconds"].as_f64().unwrap() >= 0.0);
        // Every consumed artifact is recorded with a content hash.
        for input in doc["inputs"].as_array().unwrap() {
            assert_eq!(input["sha256"].as_str().unwrap().len(), 64);
        }
    }

    // Inference honors its flag overrides and reports the generation shape.
    let out = dyadflow(
        dir,
        &[
            "infer", "--config", cfg, "--out", out_dir, "--mode", "sde", "--steps", "3",
            "--text", "1", "--frames", "40", "--cfg-listen", "2.0",
        ],
    );
    assert_code(&out, 0, "infer");
    assert!(run.join("infer.nary").is_file());
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("infer.json")).unwrap()).unwrap();
    let gen = &doc["generation"];
    assert_eq!(gen["frames"], 40);
    assert_eq!(gen["latent_tokens"], 5); // ceil(40 / r=8)
    assert_eq!(gen["windows"], 2); // 5 tokens through windows of 4 with carry 1
    assert_eq!(gen["mode"], "sde");
    assert_eq!(gen["steps"], 3);
    assert_eq!(gen["omega_listen"], 2.0);
    assert_eq!(gen["text"], 1);
    // The post-trained checkpoint is preferred once it exists.
    assert!(doc["manifest"].as_str().unwrap().contains("infer"));
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(run.join("infer.manifest.json")).unwrap(),
    )
    .unwrap();
    let inputs = manifest["inputs"].as_array().unwrap();
    assert!(inputs.iter().any(|i| i["path"].as_str().unwrap().ends_with("gdpo.nary")));

    // Evaluation writes the metric table in both formats.
    let out = dyadflow(dir, &["eval", "--config", cfg, "--out", out_dir]);
    assert_code(&out, 0, "eval");
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("metric,value\n"));
    assert!(csv.contains("fdd.expr.listening,"));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert!(doc["summary"]["listen_velocity_ratio"].as_f64().unwrap().is_finite());

    // An explicit --ckpt drives evaluation of the Stage-1 checkpoint too.
    let flow_ckpt = run.join("flow.nary");
    let out = dyadflow(
        dir,
        &["eval", "--config", cfg, "--out", out_dir, "--ckpt", flow_ckpt.to_str().unwrap()],
    );
    assert_code(&out, 0, "eval --ckpt flow.nary");
}
