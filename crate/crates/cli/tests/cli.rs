use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn relic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relic"))
        .args(args)
        .env("RELIC_LOG", "error")
        .env("RUST_BACKTRACE", "0")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = relic(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_data(dir: &Path, seed: &str) {
    ok(&[
        "gen-synthetic", "--out", s(dir), "--seed", seed,
        "--n-entities", "40", "--n-types", "6", "--contexts-per-entity", "5",
    ]);
}

#[test]
fn synthetic_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    small_data(&a, "7");
    small_data(&b, "7");
    for f in ["corpus.jsonl", "types.jsonl", "categories.jsonl", "qa.jsonl", "aliases.jsonl"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = t.path().join("c");
    small_data(&c, "8");
    assert_ne!(fs::read(a.join("corpus.jsonl")).unwrap(), fs::read(c.join("corpus.jsonl")).unwrap());
}

#[test]
fn invalid_spec_fails() {
    let t = tempfile::tempdir().unwrap();
    let out = relic(&["gen-synthetic", "--out", s(t.path()), "--n-entities", "0"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_entities"));
}

#[test]
fn zero_step_train_then_nn() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    small_data(&data, "1");
    let corpus = data.join("corpus.jsonl");
    let (m1, m2) = (t.path().join("m1"), t.path().join("m2"));
    for m in [&m1, &m2] {
        ok(&["train", "--corpus", s(&corpus), "--out", s(m), "--total-steps", "0", "--seed", "5"]);
    }
    for f in ["model.rlck", "entities.relc", "vocab.txt", "config.toml"] {
        assert_eq!(fs::read(m1.join(f)).unwrap(), fs::read(m2.join(f)).unwrap(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(m1.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 5);
    let hash = manifest["inputs"][0]["hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    let manifest2: serde_json::Value = serde_json::from_slice(&fs::read(m2.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest2["inputs"][0]["hash"], hash);

    let lines = ok(&["nn", "--checkpoint", s(&m1), "--entity", "E00003", "--k", "4"]);
    let rows: Vec<&str> = lines.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("E00003\t1.0000"));
    let lines = ok(&["nn", "--checkpoint", s(&m1), "--query", "who founded it", "--k", "2"]);
    assert_eq!(lines.lines().count(), 2);
    assert!(!relic(&["nn", "--checkpoint", s(&m1), "--entity", "nope"]).status.success());
}

#[test]
fn empty_labels_is_an_error() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    small_data(&data, "2");
    let m = t.path().join("m");
    ok(&["train", "--corpus", s(&data.join("corpus.jsonl")), "--out", s(&m), "--total-steps", "0"]);
    let empty = t.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = relic(&["eval-typing", "--checkpoint", s(&m), "--labels", s(&empty)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
}

#[test]
fn eval_commands_run_on_a_short_model() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    small_data(&data, "4");
    let m = t.path().join("m");
    let cfg = t.path().join("train.toml");
    fs::write(&cfg, "batch_size = 8\n[encoder]\nhidden = 16\nlayers = 1\nheads = 2\nff_size = 32\noutput_dim = 8\n").unwrap();
    ok(&[
        "train", "--corpus", s(&data.join("corpus.jsonl")), "--config", s(&cfg),
        "--out", s(&m), "--total-steps", "20",
    ]);
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(m.join("final_metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["step"], 20);
    let csv = fs::read_to_string(m.join("metrics.csv")).unwrap();
    assert!(csv.lines().count() >= 2);

    let cat: serde_json::Value = serde_json::from_str(&ok(&[
        "eval-category", "--checkpoint", s(&m), "--categories", s(&data.join("categories.jsonl")), "--trials", "2",
    ]))
    .unwrap();
    let map = cat["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));

    let out = t.path().join("link");
    fs::create_dir(&out).unwrap();
    let link: serde_json::Value = serde_json::from_str(&ok(&[
        "eval-linking", "--checkpoint", s(&m), "--corpus", s(&data.join("corpus.jsonl")),
        "--alias", s(&data.join("aliases.jsonl")), "--out", s(&out),
    ]))
    .unwrap();
    assert_eq!(link["total"], 200);
    assert!(out.join("linking.json").exists() && out.join("manifest.json").exists());
}

#[test]
fn single_rate_ablation_gives_one_row() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    small_data(&data, "6");
    let cfg = t.path().join("ablate.toml");
    fs::write(
        &cfg,
        "[train]\nbatch_size = 8\n[train.encoder]\nhidden = 16\nlayers = 1\nheads = 2\nff_size = 32\noutput_dim = 8\n\
         [probe]\nhidden = 16\nmax_epochs = 5\nfolds = 2\n",
    )
    .unwrap();
    let out = t.path().join("ab");
    ok(&[
        "ablate-mask", "--corpus", s(&data.join("corpus.jsonl")), "--labels", s(&data.join("types.jsonl")),
        "--rates", "0.5,0.5", "--total-steps", "10", "--config", s(&cfg), "--out", s(&out),
    ]);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("0.5,"));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    ok(&["gen-synthetic", "--out", s(&data), "--config", s(&root.join("synthetic.toml")), "--n-entities", "20"]);
    let m = t.path().join("m");
    ok(&[
        "train", "--corpus", s(&data.join("corpus.jsonl")), "--config", s(&root.join("train.toml")),
        "--out", s(&m), "--total-steps", "0",
    ]);
    let back = fs::read_to_string(m.join("config.toml")).unwrap();
    assert!(back.contains("total_steps = 0"));
    for (cmd, flag, file, input, name) in [
        ("eval-typing", "--labels", "probe.toml", "types.jsonl", "typing"),
        ("eval-qa", "--qa", "qa.toml", "qa.jsonl", "qa"),
    ] {
        let text = fs::read_to_string(root.join(file)).unwrap();
        let small = text
            .replace("max_epochs = 2000", "max_epochs = 2")
            .replace("total_steps = 500 ", "total_steps = 2 ")
            .replace("total_steps = 200", "total_steps = 2")
            .replace("num_negatives = 128", "num_negatives = 4")
            .replace("batch_size = 32 ", "batch_size = 8 ");
        let cfg = t.path().join(file);
        fs::write(&cfg, small).unwrap();
        let out = ok(&[cmd, "--checkpoint", s(&m), flag, s(&data.join(input)), "--config", s(&cfg)]);
        assert!(out.contains('{'), "{name}: {out}");
    }
}
