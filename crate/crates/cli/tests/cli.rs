use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn vmg(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vmg"))
        .args(args)
        .env("VMG_OUT", root)
        .current_dir(root)
        .output()
        .expect("spawn vmg")
}

fn ok_json(root: &Path, args: &[&str]) -> Value {
    let out = vmg(root, args);
    assert!(
        out.status.success(),
        "vmg {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON document")
}

const TINY: &str = r#"
schema_version = 1
[data]
episodes = 6
episode_len = 40
[metric]
hidden = 16
epochs = 2
[translator]
hidden = 16
epochs = 2
[eval]
episodes = 2
model_seeds = [0, 1]
"#;

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = vmg(dir.path(), &["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in [
        "collect",
        "train-metric",
        "train-translator",
        "build-graph",
        "plan",
        "evaluate",
        "relabel",
        "export-layout",
        "run-pipeline",
        "dataset",
    ] {
        assert!(text.contains(cmd), "missing {cmd} in help");
    }
}

#[test]
fn collect_is_seeded_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let args = |out: &'static str, seed: &'static str| {
        vec!["collect", "--episodes", "4", "--episode-len", "30", "--seed", seed, "--out", out]
    };
    let a = ok_json(root, &args("a.jsonl", "5"));
    let b = ok_json(root, &args("b.jsonl", "5"));
    let c = ok_json(root, &args("c.jsonl", "6"));
    assert_eq!(a["sha256"], b["sha256"]);
    assert_ne!(a["sha256"], c["sha256"]);
    assert_eq!(a["transitions"], 120);

    let v = ok_json(root, &["dataset", "validate", root.join("a.jsonl").to_str().unwrap()]);
    assert_eq!(v["valid"], true);
    assert_eq!(v["state_dim"], 2);
    assert_eq!(v["episodes"], 4);
}

#[test]
fn dataset_validate_rejects_broken_file() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "not a dataset\n").unwrap();
    let out = vmg(dir.path(), &["dataset", "validate", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn config_errors_name_the_constraint() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[graph]\ngamma_m = -1\n").unwrap();
    let out = vmg(dir.path(), &["run-pipeline", "--config", "bad.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gamma_m must be > 0"));

    std::fs::write(dir.path().join("typo.toml"), "[graph]\ngama_m = 1\n").unwrap();
    let out = vmg(dir.path(), &["run-pipeline", "--config", "typo.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gama_m"));
}

#[test]
fn stepwise_commands_compose() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("tiny.toml"), TINY).unwrap();
    ok_json(root, &["collect", "--episodes", "6", "--episode-len", "40", "--out", "d.bin"]);
    let common = ["--config", "tiny.toml", "--dataset", "d.bin"];
    ok_json(root, &[&["train-metric"][..], &common, &["--out", "m"]].concat());
    ok_json(root, &[&["train-translator"][..], &common, &["--out", "t"]].concat());
    let g = ok_json(
        root,
        &["build-graph", "--model", "m/metric.ckpt", "--dataset", "d.bin", "--gamma-m", "0.5", "--out", "g.json"],
    );
    assert!(g["stats"]["num_vertices"].as_u64().unwrap() >= 1);

    let zero = ok_json(
        root,
        &["plan", "--graph", "g.json", "--relabel", "zero", "--dataset", "d.bin", "--env", "umaze", "--out", "v0.json"],
    );
    assert_eq!(zero["summary"]["max"], 0.0);
    assert_eq!(zero["summary"]["min"], 0.0);
    ok_json(root, &["plan", "--graph", "g.json", "--discount", "0.9", "--search-horizon", "5", "--out", "v.json"]);

    ok_json(
        root,
        &["bundle", "--model", "m/metric.ckpt", "--translator", "t/translator.ckpt", "--graph", "g.json", "--out", "b"],
    );
    let r = ok_json(
        root,
        &["relabel", "--agent", "b", "--dataset", "d.bin", "--reward", "goal:3,1", "--out", "b2"],
    );
    assert!(r["replan_seconds"].as_f64().unwrap() < 1.0);

    let e1 = ok_json(
        root,
        &["evaluate", "--agent", "b2", "--episodes", "2", "--seeds", "1", "--start", "1,1", "--goal", "3,1", "--out", "r1.json"],
    );
    let e2 = ok_json(
        root,
        &["evaluate", "--agent", "b2", "--episodes", "2", "--seeds", "1", "--start", "1,1", "--goal", "3,1", "--out", "r2.json"],
    );
    assert_eq!(e1["success_mean"], e2["success_mean"]);
    assert_eq!(
        std::fs::read(root.join("r1.json")).unwrap(),
        std::fs::read(root.join("r2.json")).unwrap()
    );

    let lay = ok_json(root, &["export-layout", "--graph", "g.json", "--values", "v.json", "--out", "lay.json"]);
    assert_eq!(lay["vertices"], g["stats"]["num_vertices"]);
    let doc: Value = serde_json::from_slice(&std::fs::read(root.join("lay.json")).unwrap()).unwrap();
    assert!(doc["vertices"][0]["value"].is_number());
}

#[test]
fn pipeline_caches_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("tiny.toml"), TINY).unwrap();
    let first = ok_json(root, &["run-pipeline", "--config", "tiny.toml", "--out", "run"]);
    assert!(first["stages"].as_array().unwrap().iter().all(|s| s.as_str().unwrap().ends_with("ran")));
    let second = ok_json(root, &["run-pipeline", "--config", "tiny.toml", "--out", "run"]);
    assert!(second["stages"].as_array().unwrap().iter().all(|s| s.as_str().unwrap().ends_with("cached")));

    let eval = ok_json(root, &["evaluate", "--agent", "run", "--episodes", "1", "--seeds", "2", "--out", "e.json"]);
    assert!(eval["success_mean"].is_number());
    let report: Value = serde_json::from_slice(&std::fs::read(root.join("e.json")).unwrap()).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 2);

    let replay = ok_json(root, &["run-pipeline", "--replay", "run/manifest.json", "--out", "again"]);
    assert_eq!(replay["mismatched"].as_array().unwrap().len(), 0);
    assert!(replay["matched"].as_u64().unwrap() > 10);
}
