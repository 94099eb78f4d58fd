use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use halloc_core::corpus::{self, canonical_to_json, GenerationRecord, Language};
use halloc_core::demo;
use halloc_core::features;
use halloc_core::synthetic::{planted_corpus, PlantedConfig};
use tempfile::TempDir;

fn halloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_halloc"))
        .args(args)
        .env_remove("HALLOC_DATA_DIR")
        .output()
        .expect("run halloc")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn planted(dir: &Path, n: usize) -> PathBuf {
    let records = planted_corpus(&PlantedConfig {
        records: n,
        max_tokens: 12,
        ..Default::default()
    });
    let path = dir.join("planted.jsonl");
    corpus::save_records(&path, &records).unwrap();
    path
}

/// The worked example plus a generation that matches its canonical solution.
fn localization_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let example = demo::worked_example_record();
    let mut good = example.clone();
    good.id = "good".into();
    good.tokens = ["return", " all", "(", "a", " >", " b", " for", " a", ",", " b", " in", " zip", "(tup1", ", tup2", "))", ""]
        .iter()
        .map(|s| s.to_string())
        .collect();
    good.steps = good.tokens.iter().map(|t| corpus::LogProbStep::greedy(vec![(t.clone(), -0.2)])).collect();
    let instances = dir.join("inst.jsonl");
    corpus::save_records(&instances, &[example, good]).unwrap();
    let canon = dir.join("sol.jsonl");
    let lines: Vec<String> = demo::CANONICALS
        .iter()
        .map(|s| canonical_to_json("check_greater", Language::Python, s))
        .collect();
    fs::write(&canon, lines.join("\n") + "\n").unwrap();
    (instances, canon)
}

#[test]
fn demo_prints_index_five() {
    let o = halloc(&["demo-figure1"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("hallucination token index: 5"));
}

#[test]
fn version_names_schema_versions() {
    let o = halloc(&["--version"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("instance schema 1"), "{out}");
    assert!(out.contains("feature layout 1"), "{out}");
}

#[test]
fn usage_errors_exit_two() {
    let o = halloc(&["localize", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));

    let dir = TempDir::new().unwrap();
    let input = planted(dir.path(), 20);
    let o = halloc(&["train", "--in", p(&input), "--out", "m.json", "--mode", "per-token", "--encoder", "recurrent"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = halloc(&["train", "--in", p(&input), "--out", "m.json", "--mode", "per-token", "--model", "forest"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn localize_fills_gold_index() {
    let dir = TempDir::new().unwrap();
    let (instances, canon) = localization_fixture(dir.path());
    let out = dir.path().join("labeled.jsonl");
    let debug = dir.path().join("debug.jsonl");
    let o = halloc(&[
        "localize", "--lang", "python", "--in", p(&instances), "--canon", p(&canon), "--out", p(&out),
        "--debug-out", p(&debug), "--jobs", "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let labeled = corpus::load_records(&out).unwrap();
    assert_eq!(labeled[0].gold_index, Some(5));
    assert_eq!(labeled[1].gold_index, None);
    let debug = fs::read_to_string(&debug).unwrap();
    let first: serde_json::Value = serde_json::from_str(debug.lines().next().unwrap()).unwrap();
    assert_eq!(first["index"], 5);
    assert_eq!(first["per_canonical"].as_array().unwrap().len(), 1);

    let again = dir.path().join("again.jsonl");
    halloc(&["localize", "--in", p(&instances), "--canon", p(&canon), "--out", p(&again)]);
    assert_eq!(fs::read(&out).unwrap(), fs::read(&again).unwrap());

    let o = halloc(&["localize", "--lang", "java", "--in", p(&instances), "--canon", p(&canon), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_canonicals_are_a_data_error() {
    let dir = TempDir::new().unwrap();
    let (instances, _) = localization_fixture(dir.path());
    let canon = dir.path().join("other.jsonl");
    fs::write(&canon, canonical_to_json("other", Language::Python, "return 1") + "\n").unwrap();
    let o = halloc(&["localize", "--in", p(&instances), "--canon", p(&canon), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no canonical solutions"));
}

#[test]
fn training_requires_labels() {
    let dir = TempDir::new().unwrap();
    let (instances, _) = localization_fixture(dir.path());
    let o = halloc(&[
        "train", "--mode", "per-sample", "--encoder", "recurrent", "--in", p(&instances), "--out",
        p(&dir.path().join("m.json")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("gold_index"));
}

#[test]
fn validate_reports_bad_lines() {
    let dir = TempDir::new().unwrap();
    let good = planted(dir.path(), 3);
    let o = halloc(&["validate", "--in", p(&good)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["records"], 3);

    let mut text = fs::read_to_string(&good).unwrap();
    text.push_str("{\"id\": \"broken\"}\n");
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, text).unwrap();
    let o = halloc(&["validate", "--in", p(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["invalid"], 1);
}

#[test]
fn normalize_reads_stdin() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_halloc"))
        .args(["normalize", "--lang", "python"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"for a, b in zip(tup1, tup2):\n    pass\n")
        .unwrap();
    let o = child.wait_with_output().unwrap();
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["normalized"], "for v1, v2 in zip(tup1, tup2):\n    pass\n");
    assert_eq!(v["rename_table"][0], serde_json::json!(["a", "v1"]));
}

#[test]
fn featurize_writes_a_readable_container() {
    let dir = TempDir::new().unwrap();
    let input = planted(dir.path(), 10);
    let out = dir.path().join("f.bin");
    let o = halloc(&["featurize", "--in", p(&input), "--out", p(&out), "--mode", "per-sample", "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, matrices) = features::read_container(fs::File::open(&out).unwrap()).unwrap();
    assert_eq!(header.columns, 108);
    assert_eq!(header.seed, 4);
    assert_eq!(matrices.len(), 10);
    let records: Vec<GenerationRecord> = corpus::load_records(&input).unwrap();
    assert_eq!(matrices[3].1.len(), records[3].tokens.len());
}

#[test]
fn train_predict_round_trip_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let input = planted(dir.path(), 60);
    let model = |name: &str| {
        let path = dir.path().join(name);
        let o = halloc(&["train", "--mode", "per-token", "--model", "tree-ensemble", "--trees", "5", "--in", p(&input), "--out", p(&path)]);
        assert!(o.status.success(), "{}", stderr(&o));
        path
    };
    let (a, b) = (model("a.json"), model("b.json"));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let o = halloc(&["predict", "--model-file", p(&a), "--in", p(&input)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 60);
    let hits = lines.iter().filter(|l| l["predicted_index"] == l["gold_index"]).count();
    assert!(hits >= 50, "{hits}");
}

#[test]
fn pointer_training_from_the_command_line() {
    let dir = TempDir::new().unwrap();
    let input = planted(dir.path(), 20);
    let out = dir.path().join("p.json");
    let o = halloc(&[
        "train", "--mode", "per-sample", "--encoder", "convolutional", "--hidden-dim", "4", "--layers", "1",
        "--epochs", "1", "--in", p(&input), "--out", p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(v["kind"], "convolutional-pointer");
    let o = halloc(&["train", "--mode", "per-sample", "--encoder", "attention", "--heads", "3", "--hidden-dim", "4", "--in", p(&input), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_writes_named_reports() {
    let dir = TempDir::new().unwrap();
    let input = planted(dir.path(), 40);
    let reports = dir.path().join("reports");
    let o = halloc(&[
        "eval", "--in", p(&input), "--mode", "per-sample", "--model", "oracle", "--regime", "one-per-llm",
        "--seed", "3", "--out-dir", p(&reports),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stem = "eval-one-per-llm-per-sample-oracle-seed3";
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(reports.join(format!("{stem}.json"))).unwrap()).unwrap();
    assert_eq!(report["overall_accuracy"], 1.0);
    assert_eq!(report["seed"], 3);
    assert_eq!(report["cells"].as_array().unwrap().len(), 2);
    let csv = fs::read_to_string(reports.join(format!("{stem}.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let o = halloc(&["eval", "--in", p(&input), "--mode", "per-token", "--model", "constant-0", "--out-dir", p(&reports)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn cross_produces_a_full_matrix() {
    let dir = TempDir::new().unwrap();
    let input = planted(dir.path(), 40);
    let o = halloc(&[
        "cross", "--in", p(&input), "--mode", "per-token", "--model", "linear-logistic", "--epochs", "2",
        "--out-dir", p(dir.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("eval-cross-llm-per-token-linear-logistic-seed0.json")).unwrap(),
    )
    .unwrap();
    let cells = report["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 4);
    assert!(cells.iter().all(|c| (0.0..=1.0).contains(&c["accuracy"].as_f64().unwrap())));
}

#[test]
fn analyze_writes_tables() {
    let dir = TempDir::new().unwrap();
    let input = planted(dir.path(), 30);
    let out = dir.path().join("analysis");
    let o = halloc(&["analyze", "--in", p(&input), "--out-dir", p(&out), "--rate-denominator", "all"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["type-rates-model-all.csv", "type-proportions-dataset.csv", "distributions.csv", "analysis-all.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let o = halloc(&["analyze", "--in", p(&input), "--out-dir", p(&out), "--rate-denominator", "some"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn data_dir_resolves_relative_paths() {
    let dir = TempDir::new().unwrap();
    planted(dir.path(), 10);
    let o = Command::new(env!("CARGO_BIN_EXE_halloc"))
        .args(["validate", "--in", "planted.jsonl"])
        .env("HALLOC_DATA_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
}
