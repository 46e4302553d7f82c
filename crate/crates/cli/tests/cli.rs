use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use autornn::evalgen::CiderVariant;
use autornn_cli::commands::{rescore_dump, DecodeRow};

fn autornn(work: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autornn"))
        .arg("--work-dir")
        .arg(work)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(work: &Path, args: &[&str]) -> String {
    let out = autornn(work, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(work: &Path, args: &[&str]) -> i32 {
    autornn(work, args).status.code().unwrap()
}

const SMALL: [&str; 10] = [
    "--set",
    "search.epochs=1",
    "--set",
    "search.derive_samples=3",
    "--set",
    "train.epochs=2",
    "--set",
    "data.images=200",
    "--set",
    "seed=7",
];

fn small(cmd: &str) -> Vec<&str> {
    let mut v = vec![cmd];
    v.extend(SMALL);
    v
}

#[test]
fn synthetic_vocabulary_is_the_template_words() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &small("preprocess"));
    let vocab: std::collections::BTreeMap<String, usize> =
        serde_json::from_str(&fs::read_to_string(dir.path().join("data/vocab.json")).unwrap()).unwrap();
    let mut tokens: Vec<(usize, String)> = vocab.into_iter().map(|(t, i)| (i, t)).collect();
    tokens.sort();
    assert!(tokens.iter().enumerate().all(|(k, (i, _))| k == *i));
    let tokens: Vec<String> = tokens.into_iter().map(|(_, t)| t).collect();
    assert_eq!(&tokens[..4], ["<pad>", "<bos>", "<eos>", "<unk>"]);
    let got: BTreeSet<&str> = tokens[4..].iter().map(String::as_str).collect();
    let want: BTreeSet<&str> = [
        "a", "ball", "box", "cup", "dog", "cat", "car", "tree", "chair", "book", "lamp", "red", "blue", "green",
        "yellow", "black", "white", "small", "large", "on", "under", "near", "behind", "beside",
    ]
    .into_iter()
    .collect();
    assert_eq!(got, want);
    assert_eq!(tokens[4], "a");
    let splits = fs::read_to_string(dir.path().join("data/splits.tsv")).unwrap();
    assert_eq!(splits.lines().count(), 201);
}

#[test]
fn preprocess_is_byte_identical_on_rerun() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(a.path(), &small("preprocess"));
    ok(b.path(), &small("preprocess"));
    for f in ["vocab.json", "stats.json", "splits.tsv", "train.jsonl", "val.jsonl", "test.jsonl"] {
        assert_eq!(
            fs::read(a.path().join("data").join(f)).unwrap(),
            fs::read(b.path().join("data").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    assert_eq!(code(w, &["--help"]), 0);
    assert_eq!(code(w, &["frobnicate"]), 1);
    assert_eq!(code(w, &["--set", "search.nope=1", "config"]), 1);
    assert_eq!(code(w, &["count-params", "--n-blocks", "0"]), 1);
    assert_eq!(code(w, &["search"]), 2);
    assert_eq!(code(w, &["evaluate"]), 2);
    assert_eq!(code(w, &["--config", "/nonexistent.json", "config"]), 1);
    ok(w, &small("preprocess"));
    let genotype = w.join("g.json");
    fs::write(&genotype, "{}").unwrap();
    assert_eq!(code(w, &["train", "--genotype", genotype.to_str().unwrap()]), 2);
    fs::write(
        &genotype,
        r#"{"n_blocks": 2, "nodes": [{"prev": null, "act": "tanh"}, {"prev": 1, "act": "relu"}],
            "macro": {"n_blocks": 2, "embed_size": 8, "hidden_size": 8, "label_smoothing": 0.0,
                      "init_hidden_each_epoch": true, "tie_embeddings": false, "controller_hidden": 32,
                      "unrestricted_dims": true},
            "semantics": "plain"}"#,
    )
    .unwrap();
    let diverge = [
        "train",
        "--genotype",
        genotype.to_str().unwrap(),
        "--set",
        r#"train.schedule={"kind":"constant","lr":1e300}"#,
        "--set",
        "train.clip_norm=null",
    ];
    let out = autornn(w, &diverge);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn count_params_prints_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["count-params", "--hidden", "512"]);
    let lines: Vec<&str> = out.lines().collect();
    assert!(lines[0].starts_with("AutoRNN-6 512: 3.7M params, 14.7M size"), "{out}");
    assert!(lines[1].starts_with("LSTM 512: 2.1M params, 8.4M size (2097152 params, 8388608 bytes)"), "{out}");
    let all = ok(dir.path(), &["count-params", "--all"]);
    assert_eq!(all.lines().count(), 8);
    assert!(all.lines().all(|l| l.contains("reported")));
}

#[test]
fn small_pipeline_writes_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    for cmd in ["preprocess", "search", "derive", "train"] {
        ok(w, &small(cmd));
    }
    let mut eval = small("evaluate");
    eval.extend(["--split", "val"]);
    let printed = ok(w, &eval);
    assert!(printed.contains("cider"));
    ok(w, &small("report"));

    let candidates = fs::read_to_string(w.join("derive/candidates.csv")).unwrap();
    assert_eq!(candidates.lines().count(), 1 + 3);
    let curves = fs::read_to_string(w.join("train/curves.csv")).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(w.join("train/summary.json")).unwrap()).unwrap();
    assert_eq!(curves.lines().count() as u64, 1 + summary["steps"].as_u64().unwrap());

    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(w.join("eval/val/metrics.json")).unwrap()).unwrap();
    let dump = w.join("eval/val/decodes.jsonl");
    let again = rescore_dump(&dump, CiderVariant::CiderD).unwrap();
    for (name, v) in autornn::evalgen::MetricReport::NAMES.iter().zip(again.percent()) {
        assert_eq!(metrics[*name].as_f64().unwrap(), v, "{name}");
    }
    let csv = fs::read_to_string(w.join("eval/val/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(w.join("manifest.json")).unwrap()).unwrap();
    for stage in ["preprocess", "search", "derive", "train", "evaluate_val"] {
        assert!(manifest["stages"][stage]["outputs"].as_object().is_some_and(|o| !o.is_empty()), "{stage}");
    }
    let report = fs::read_to_string(w.join("report/summary.md")).unwrap();
    assert!(report.contains("| val |"));
    assert!(w.join("report/train_curves.svg").is_file());
}

#[test]
fn echoing_the_references_scores_full_bleu() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    ok(w, &small("preprocess"));
    let data = autornn_cli::data::load_prepared(&w.join("data")).unwrap();
    let path = w.join("echo.jsonl");
    let mut text = String::new();
    for item in &data.test {
        let row = DecodeRow {
            image_id: item.image_id.clone(),
            caption: String::new(),
            ids: item.refs[0].clone(),
            logprob: 0.0,
            refs: item.refs.clone(),
        };
        text.push_str(&serde_json::to_string(&row).unwrap());
        text.push('\n');
    }
    fs::write(&path, text).unwrap();
    let m = rescore_dump(&path, CiderVariant::CiderD).unwrap();
    assert_eq!(m.percent()[..5], [100.0; 5]);
}

#[test]
fn resumed_search_matches_an_uninterrupted_one() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let two = ["--set", "search.epochs=2"];
    for w in [a.path(), b.path()] {
        ok(w, &small("preprocess"));
    }
    let mut full = small("search");
    full.extend(two);
    ok(a.path(), &full);
    ok(b.path(), &small("search"));
    let mut resume = full.clone();
    resume.push("--resume");
    ok(b.path(), &resume);
    let log = "search/search_log.jsonl";
    assert_eq!(fs::read(a.path().join(log)).unwrap(), fs::read(b.path().join(log)).unwrap());
}
