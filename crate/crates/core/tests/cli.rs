use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 3

[synth]
dialogue_count = 12
n_range = [2, 3]

[model]
d_model = 8
n_heads = 2
n_enc_layers = 1
n_dec_layers = 1
ffn_dim = 16
max_positions = 64

[post]
epochs = 1

[fine]
epochs = 1
"#;

fn mpcgen(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpcgen"))
        .current_dir(dir)
        .arg("--config")
        .arg("run.toml")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    dir
}

#[test]
fn synth_is_deterministic_and_seed_sensitive() {
    let dir = workspace();
    let p = dir.path();
    ok(mpcgen(p, &["synth", "--out", "a.jsonl"]));
    ok(mpcgen(p, &["synth", "--out", "b.jsonl"]));
    ok(mpcgen(p, &["--seed", "4", "synth", "--out", "c.jsonl"]));
    let read = |n: &str| std::fs::read(p.join(n)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_ne!(read("a.jsonl"), read("c.jsonl"));
}

#[test]
fn checkpoint_with_foreign_vocabulary_is_rejected() {
    let dir = workspace();
    let p = dir.path();
    ok(mpcgen(p, &["synth", "--out", "corpus.jsonl"]));
    ok(mpcgen(p, &["--seed", "9", "synth", "--out", "other.jsonl"]));
    ok(mpcgen(p, &["build-vocab", "--corpus", "corpus.jsonl", "--out", "vocab.txt"]));
    ok(mpcgen(p, &["build-vocab", "--corpus", "other.jsonl", "--out", "other-vocab.txt"]));
    ok(mpcgen(
        p,
        &["post-train", "--corpus", "corpus.jsonl", "--vocab", "vocab.txt", "--out", "post.ckpt"],
    ));
    let out = mpcgen(
        p,
        &[
            "generate",
            "--corpus",
            "other.jsonl",
            "--vocab",
            "other-vocab.txt",
            "--checkpoint",
            "post.ckpt",
            "--out",
            "predictions.jsonl",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("digest mismatch"));
    assert!(!p.join("predictions.jsonl").exists());
}

#[test]
fn unknown_config_key_fails_before_any_work() {
    let dir = workspace();
    let p = dir.path();
    let out = mpcgen(p, &["--set", "post.learning_rate=0.1", "synth", "--out", "x.jsonl"]);
    assert!(!out.status.success());
    assert!(!p.join("x.jsonl").exists());
}
