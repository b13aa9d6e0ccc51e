#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub const STRATEGIES: [&str; 3] = ["all_relations", "core_arguments", "core_nominal"];

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn synloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synloc"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("run synloc")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub fn preprocess(out: &Path, strategy: &str) -> Output {
    synloc(&[
        "preprocess",
        "--data",
        fixture("records.jsonl").to_str().unwrap(),
        "--parses",
        fixture("parses.conllu").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--strategy",
        strategy,
    ])
}

/// Compares written artifacts with the scripted pipeline's frozen output
/// for one strategy; returns a description of the first mismatch.
pub fn check_against_oracle(dir: &Path, strategy: &str) -> Result<(), String> {
    let expected = read_json(&fixture("preprocess_expected.json"));
    for id in ["r1", "r2", "r3"] {
        let got = read_json(&dir.join(format!("{id}.json")));
        let want = &expected[id][strategy];
        for key in ["I", "visible_pairs", "triples", "answer_span", "key_sentence", "selection"] {
            if got[key] != want[key] {
                return Err(format!("{strategy}/{id}/{key}: got {} want {}", got[key], want[key]));
            }
        }
        if got["strategy"] != strategy {
            return Err(format!("{id}: strategy field {}", got["strategy"]));
        }
    }
    Ok(())
}

pub fn train_toy(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train-toy", "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    synloc(&args)
}

/// train-toy, preprocess of its fixed set and generate over it.
pub fn toy_pipeline(dir: &Path, extra: &[&str]) -> Output {
    let out = train_toy(dir, extra);
    if !out.status.success() {
        return out;
    }
    let artifacts = dir.join("artifacts");
    let out = synloc(&[
        "preprocess",
        "--data",
        dir.join("examples.jsonl").to_str().unwrap(),
        "--parses",
        dir.join("parses.conllu").to_str().unwrap(),
        "--out",
        artifacts.to_str().unwrap(),
    ]);
    if !out.status.success() {
        return out;
    }
    synloc(&[
        "generate",
        "--data",
        dir.join("examples.jsonl").to_str().unwrap(),
        "--artifacts",
        artifacts.to_str().unwrap(),
        "--checkpoint",
        dir.join("checkpoint.json").to_str().unwrap(),
        "--out",
        dir.join("predictions.jsonl").to_str().unwrap(),
    ])
}
