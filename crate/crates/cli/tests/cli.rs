use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_beamllm"));
    cmd.current_dir(dir).env_remove("BEAMLLM_SEED").args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args, &[]);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// The single stderr line of a failed invocation.
fn fails(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> String {
    let out = run(dir, args, env);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    err.trim_end().to_string()
}

fn manifest(dir: &Path, name: &str) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{name}.manifest.json"))).unwrap()).unwrap()
}

const TINY: &str = r#"
[scenario]
n_passes = 10
[model]
d_model = 8
n_heads = 2
n_prototypes = 8
hidden = 8
n_layers = 1
[model.backbone]
hidden = 16
n_layers = 1
n_heads = 2
[train]
epochs = 2
"#;

#[test]
fn default_config_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = ok(d, &["gen", "--run-dir", "run", "--seed", "7"]);
    assert!(gen.contains("60 sequences"), "{gen}");
    ok(d, &["train", "--run-dir", "run", "--data", "run/data.jsonl", "--seed", "7", "--epochs", "1"]);
    let history = std::fs::read_to_string(d.join("run/history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("epoch,lr,train_loss,val_loss,train_top1"));
    assert_eq!(history.lines().count(), 2);
    let out = ok(d, &["eval", "--run-dir", "run", "--ckpt", "run/model.ckpt", "--data", "run/data.jsonl"]);
    assert!(out.contains("top-1"), "{out}");
    let metrics = std::fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("model,mode,pap,K,step,accuracy,n_test"));
    assert_eq!(metrics.lines().count(), 1 + 3 * 6);

    // eval gets no --seed and recovers the split seed from the checkpoint
    for name in ["gen", "train", "eval"] {
        let m = manifest(&d.join("run"), name);
        assert_eq!(m["command"], name);
        assert_eq!(m["seed"], 7);
        let hash = m["config_hash"].as_str().unwrap();
        assert_eq!(hash.len(), 64);
        assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
        assert!(m["versions"]["beamllm"].is_string());
        assert!(!m["outputs"].as_object().unwrap().is_empty());
    }
}

#[test]
fn retraining_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    ok(d, &["gen", "--config", "tiny.toml", "--seed", "3"]);
    for model in ["beamllm", "lstm"] {
        let mut ckpts = Vec::new();
        for out in ["one.ckpt", "two.ckpt"] {
            ok(d, &["train", "--config", "tiny.toml", "--data", "data.jsonl", "--model", model, "--seed", "3", "--out", out]);
            ckpts.push(std::fs::read(d.join(out)).unwrap());
        }
        assert_eq!(ckpts[0], ckpts[1], "{model}");
    }
    let before = std::fs::read(d.join("two.ckpt")).unwrap();
    ok(d, &["train", "--config", "tiny.toml", "--data", "data.jsonl", "--model", "lstm", "--seed", "4", "--out", "two.ckpt"]);
    assert_ne!(before, std::fs::read(d.join("two.ckpt")).unwrap());
}

#[test]
fn seed_resolution_order() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    std::fs::write(d.join("seeded.toml"), format!("seed = 5\n{TINY}")).unwrap();
    let seed_of = |args: &[&str], env: &[(&str, &str)]| {
        let out = run(d, args, env);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        manifest(d, "gen")["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of(&["gen", "--config", "tiny.toml"], &[]), 0);
    assert_eq!(seed_of(&["gen", "--config", "tiny.toml"], &[("BEAMLLM_SEED", "21")]), 21);
    assert_eq!(seed_of(&["gen", "--config", "seeded.toml"], &[("BEAMLLM_SEED", "21")]), 5);
    assert_eq!(seed_of(&["gen", "--config", "seeded.toml", "--seed", "9"], &[("BEAMLLM_SEED", "21")]), 9);
}

#[test]
fn failures_are_one_line_with_a_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "[train]\nepochs = 3\nmomentum = 0.9\n").unwrap();
    std::fs::write(d.join("zero.toml"), "[train]\nepochs = 0\n").unwrap();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();

    let e = fails(d, &["gen", "--config", "bad.toml"], &[]);
    assert!(e.starts_with("error kind=config:") && e.contains("momentum"), "{e}");
    let e = fails(d, &["gen", "--config", "zero.toml"], &[]);
    assert!(e.starts_with("error kind=config:"), "{e}");
    let e = fails(d, &["gen", "--config", "missing.toml"], &[]);
    assert!(e.starts_with("error kind=io:"), "{e}");
    let e = fails(d, &["gen", "--config", "tiny.toml"], &[("BEAMLLM_SEED", "seven")]);
    assert!(e.starts_with("error kind=config:") && e.contains("BEAMLLM_SEED"), "{e}");
    let e = fails(d, &["train", "--config", "tiny.toml"], &[]);
    assert!(e.starts_with("error kind=config:") && e.contains("dataset"), "{e}");

    ok(d, &["gen", "--config", "tiny.toml"]);
    ok(d, &["train", "--config", "tiny.toml", "--data", "data.jsonl", "--model", "rnn", "--epochs", "1"]);
    let e = fails(d, &["eval", "--config", "tiny.toml", "--ckpt", "model.ckpt", "--data", "data.jsonl", "--mode", "fewshot"], &[]);
    assert!(e.starts_with("error kind=config:"), "{e}");
    std::fs::write(d.join("broken.jsonl"), "{\"seq_id\": 1}\n").unwrap();
    let e = fails(d, &["eval", "--config", "tiny.toml", "--ckpt", "model.ckpt", "--data", "broken.jsonl"], &[]);
    assert!(e.starts_with("error kind=parse:"), "{e}");
    let e = fails(d, &["eval", "--ckpt", "data.jsonl", "--data", "data.jsonl"], &[]);
    assert!(e.starts_with("error kind=checkpoint:"), "{e}");
}

#[test]
fn fewshot_eval_infers_mode_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    ok(d, &["gen", "--config", "tiny.toml"]);
    ok(d, &["train", "--config", "tiny.toml", "--data", "data.jsonl", "--model", "gru", "--mode", "fewshot"]);
    ok(d, &["eval", "--config", "tiny.toml", "--ckpt", "model.ckpt", "--data", "data.jsonl"]);
    let metrics = std::fs::read_to_string(d.join("metrics.csv")).unwrap();
    assert!(metrics.lines().skip(1).all(|l| l.starts_with("gru,fewshot,na,")));
    assert_eq!(metrics.lines().count(), 1 + 3 * 11);
}

#[test]
fn gradcheck_reports_every_family() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 5, "{out}");
    for (line, name) in lines.iter().zip(["beamllm-pap", "beamllm-nopap", "rnn", "gru", "lstm"]) {
        assert!(line.starts_with(name), "{line}");
        let err: f64 = line.split_whitespace().nth(2).unwrap().parse().unwrap();
        assert!(err <= 1e-4, "{line}");
    }
}

#[test]
fn bench_writes_complexity_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    ok(d, &["bench", "--config", "tiny.toml", "--runs", "20"]);
    let csv = std::fs::read_to_string(d.join("complexity.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), ["beamllm", "rnn", "gru", "lstm"]);
    let n = |r: &Vec<&str>, i: usize| r[i].parse::<f64>().unwrap();
    assert!(n(&rows[0], 2) < n(&rows[0], 1));
    assert!(n(&rows[1], 1) < n(&rows[2], 1) && n(&rows[2], 1) < n(&rows[3], 1));
    assert!(rows.iter().all(|r| n(r, 3) > 0.0));
}
