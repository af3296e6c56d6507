use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures/corpus")
        .canonicalize()
        .unwrap()
}

/// A config small enough for the whole pipeline to run in about a second.
fn write_tiny_config(dir: &Path) -> PathBuf {
    let c = corpus_dir();
    let model = |layers: usize, seed: u64| {
        serde_json::json!({
            "vocab_size": 256, "hidden_dim": 16, "num_layers": layers, "num_heads": 2,
            "ffn_dim": 32, "max_context": 128, "seed": seed
        })
    };
    let training = |seed: u64| serde_json::json!({ "epochs": 1, "seq_len": 32, "max_bytes": 2048, "seed": seed });
    let small = serde_json::json!({ "num_prompts": 2, "prompt_len": 16, "gen_len": 8 });
    let cfg = serde_json::json!({
        "train_corpus": c.join("train.txt"),
        "eval_corpora": [{ "name": "stories", "path": c.join("stories.txt") }],
        "target": model(3, 5),
        "draft": model(1, 6),
        "target_training": training(7),
        "draft_training": training(8),
        "collect": { "num_prompts": 4, "prompt_len": 16, "gen_len": 8 },
        "predictor": { "hidden_dim": 16, "epochs": 3 },
        "profile": small,
        "schedule": { "offline_top_k": 1 },
        "bench": small,
        "tree": { "branching": [2, 1], "num_prompts": 1, "prompt_len": 16, "gen_len": 6 }
    });
    let path = dir.join("tiny.json");
    fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

fn spex(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spex"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn stages_generate_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = dir.path().join("out");

    let early = spex(&["bench"], &cfg, &out);
    assert!(!early.status.success());
    assert!(String::from_utf8_lossy(&early.stderr).contains("missing artifact"));

    for stage in ["train-model", "train-draft", "train-predictors", "profile"] {
        assert!(
            stdout(&spex(&[stage], &cfg, &out)).contains("done"),
            "{stage}"
        );
    }
    let bench = stdout(&spex(&["bench"], &cfg, &out));
    assert!(bench.contains("overall"));
    let rerun = stdout(&spex(&["run"], &cfg, &out));
    assert_eq!(rerun.matches("up to date").count(), 5, "{rerun}");

    let trace = dir.path().join("trace.jsonl");
    let gen = spex(
        &[
            "generate",
            "--prompt",
            "Once upon a time",
            "--max-new",
            "5",
            "--trace",
            trace.to_str().unwrap(),
        ],
        &cfg,
        &out,
    );
    stdout(&gen);
    let lines: Vec<serde_json::Value> = fs::read_to_string(&trace)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 5);
    for l in &lines {
        for field in [
            "token",
            "exit_layer",
            "predictor_fired",
            "verified",
            "active_layers",
        ] {
            assert!(l.get(field).is_some(), "{field} missing from {l}");
        }
    }

    let tree_trace = dir.path().join("tree.jsonl");
    let tree = spex(
        &[
            "tree-generate",
            "--prompt",
            "Once upon a time",
            "--max-new",
            "6",
            "--branching",
            "2,2",
            "--policy",
            "never",
            "--schedule",
            "all-layers",
            "--trace",
            tree_trace.to_str().unwrap(),
        ],
        &cfg,
        &out,
    );
    let greedy = spex(
        &[
            "generate",
            "--prompt",
            "Once upon a time",
            "--max-new",
            "6",
            "--policy",
            "never",
            "--schedule",
            "all-layers",
        ],
        &cfg,
        &out,
    );
    assert_eq!(stdout(&tree), stdout(&greedy));
    assert!(fs::read_to_string(&tree_trace)
        .unwrap()
        .contains("accepted_len"));

    let oracle = stdout(&spex(&["oracle"], &cfg, &out));
    assert!(oracle.contains("oracle_avg_exit_layer"));

    for (file, kind) in [
        ("target.spxw", "weights"),
        ("predictors.spxp", "predictors"),
        ("profile.spxs", "profile"),
    ] {
        let o = stdout(&spex(
            &["inspect", out.join(file).to_str().unwrap()],
            &cfg,
            &out,
        ));
        assert!(o.contains(&format!("\"kind\": \"{kind}\"")), "{o}");
    }
    let bad = spex(&["inspect", cfg.to_str().unwrap()], &cfg, &out);
    assert!(!bad.status.success());
}

#[test]
fn seed_flag_changes_weights_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let run = |seed: &str, out: &str| {
        let out = dir.path().join(out);
        stdout(&spex(&["train-draft", "--seed", seed], &cfg, &out));
        fs::read(out.join("draft.spxw")).unwrap()
    };
    let a = run("3", "a");
    assert_eq!(a, run("3", "b"));
    assert_ne!(a, run("4", "c"));
}

#[test]
fn bad_input_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let o = spex(&["run"], &missing, dir.path());
    assert!(!o.status.success());
    assert!(!o.stderr.is_empty());
    let o = Command::new(env!("CARGO_BIN_EXE_spex"))
        .arg("no-such-command")
        .output()
        .unwrap();
    assert!(!o.status.success());
}
