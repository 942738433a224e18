use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn deftri(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deftri")).current_dir(dir).args(args).output().unwrap()
}

fn records(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn header(path: &Path) -> serde_json::Value {
    let text = fs::read_to_string(path).unwrap();
    serde_json::from_str(text.lines().next().unwrap().strip_prefix("# deftri ").unwrap()).unwrap()
}

#[test]
fn gen_corpus_writes_requested_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = deftri(dir.path(), &["gen-corpus", "--size", "2000", "--seed", "7", "--out", "train.jsonl"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let path = dir.path().join("train.jsonl");
    assert_eq!(records(&path).len(), 2000);
    let h = header(&path);
    assert_eq!(h["split"], "train");
    assert!(h["command"].as_str().unwrap().starts_with("gen-corpus"));

    // same seed, same bytes
    deftri(dir.path(), &["gen-corpus", "--size", "2000", "--seed", "7", "--out", "again.jsonl"]);
    assert_eq!(fs::read(&path).unwrap(), fs::read(dir.path().join("again.jsonl")).unwrap());
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let out = deftri(dir.path(), &["gen-corpus", "--size", "5", "--out", "x.jsonl", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage:"));
    assert_eq!(deftri(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(
        deftri(dir.path(), &["train", "--head", "mlp", "--train", "a", "--dev", "b", "--out", "c"]).status.code(),
        Some(1)
    );

    for sub in ["gen-corpus", "weak-label", "augment", "balance", "build-vocab", "train", "eval", "experiment"] {
        let out = deftri(dir.path(), &[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("--"), "{sub}");
    }
    assert_eq!(deftri(dir.path(), &["--version"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = deftri(dir.path(), &["build-vocab", "--input", "missing.jsonl", "--out", "v.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.jsonl"));

    fs::write(dir.path().join("bad.jsonl"), "{\"id\": \"a\", \"title\": \n").unwrap();
    let out = deftri(dir.path(), &["balance", "--input", "bad.jsonl", "--out", "b.jsonl"]);
    assert_eq!(out.status.code(), Some(2));

    let out = deftri(dir.path(), &["eval", "--ckpt", "nothing.ckpt", "--test", "bad.jsonl"]);
    assert_eq!(out.status.code(), Some(2));

    let out = deftri(
        dir.path(),
        &["weak-label", "--input", "bad.jsonl", "--lfs", "x", "--vote-threshold", "1.0", "--out", "w"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stage_commands_chain_with_lineage() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ok = |args: &[&str]| {
        let out = deftri(d, args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };
    ok(&["gen-corpus", "--size", "120", "--seed", "3", "--bundle", "data", "--dev-size", "30", "--test-size", "30"]);
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "registry.json", "lfs.json", "embeddings.txt"] {
        assert!(d.join("data").join(f).is_file(), "{f}");
    }
    let corpus = header(&d.join("data/train.jsonl"))["corpus"].clone();
    assert_eq!(header(&d.join("data/test.jsonl"))["corpus"], corpus);

    ok(&[
        "weak-label",
        "--input",
        "data/train.jsonl",
        "--lfs",
        "data/lfs.json",
        "--dev",
        "data/dev.jsonl",
        "--out",
        "w.jsonl",
    ]);
    ok(&["augment", "--input", "w.jsonl", "--embeddings", "data/embeddings.txt", "--seed", "1", "--out", "a.jsonl"]);
    ok(&["balance", "--input", "a.jsonl", "--seed", "1", "--out", "b.jsonl"]);
    for (file, command) in [("w.jsonl", "weak-label"), ("a.jsonl", "augment"), ("b.jsonl", "balance")] {
        let h = header(&d.join(file));
        assert_eq!(h["command"], command);
        assert_eq!(h["corpus"], corpus);
        assert_eq!(h["config_hash"].as_str().unwrap().len(), 16);
        assert!(d.join(format!("{file}.report.json")).is_file());
    }
    assert_eq!(records(&d.join("w.jsonl")).len(), 120);
    assert!(records(&d.join("a.jsonl")).len() > 120);
    assert!(records(&d.join("b.jsonl")).len() >= records(&d.join("a.jsonl")).len());

    let out = ok(&["build-vocab", "--input", "b.jsonl", "--out", "vocab.json"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["size"].as_u64().unwrap() > 20);

    #[rustfmt::skip]
    ok(&["train", "--train", "b.jsonl", "--dev", "data/dev.jsonl", "--vocab", "vocab.json", "--variant", "fuse_sep",
         "--head", "bilstm", "--epochs", "1", "--hidden", "16", "--max-seq-length", "48", "--learning-rate", "2e-3",
         "--out", "m.ckpt"]);
    let out = ok(&["eval", "--ckpt", "m.ckpt", "--test", "data/test.jsonl", "--threshold", "0.55"]);
    let m: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(m["n_samples"], 30);
    assert_eq!(m["threshold"], 0.55);
    assert_eq!(m["per_label"].as_array().unwrap().len(), 15);
    for l in m["per_label"].as_array().unwrap() {
        let total: u64 = ["tp", "fp", "fn", "tn"].iter().map(|k| l[k].as_u64().unwrap()).sum();
        assert_eq!(total, 30);
    }
    let acc = m["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    // a dev set from another corpus is refused
    ok(&["gen-corpus", "--size", "30", "--seed", "4", "--split", "dev", "--out", "other-dev.jsonl"]);
    let out =
        deftri(d, &["train", "--train", "b.jsonl", "--dev", "other-dev.jsonl", "--epochs", "1", "--out", "x.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lineage"));
}
