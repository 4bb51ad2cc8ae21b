use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use serde_json::{json, Value};

const CVA: &str = env!("CARGO_BIN_EXE_cva");

fn cva(args: &[&str]) -> Command {
    let mut c = Command::new(CVA);
    c.args(args)
        .env_remove("CVA_LLM_URL")
        .env_remove("CVA_EMBED_URL")
        .env_remove("CVA_LOG");
    c
}

fn run(args: &[&str]) -> Output {
    cva(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_lines(path: &Path, rows: &[Value]) {
    let text: String = rows.iter().map(|r| r.to_string() + "\n").collect();
    std::fs::write(path, text).unwrap();
}

const LABELS: [&str; 8] = ["Title", "Year", "Director", "Country", "Population", "Album", "Artist", "Genre"];

/// Raw input files where each column's label names its correct term.
fn raw_inputs(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let cols: Vec<Value> = (0..12)
        .map(|i| {
            let label = LABELS[i % LABELS.len()];
            json!({"id": format!("t{}_{i}", i / 4), "label": label, "table_id": format!("t{}", i / 4),
                   "table_name": "Things", "table_columns": [label]})
        })
        .collect();
    let gloss: Vec<Value> = LABELS
        .iter()
        .map(|l| json!({"id": format!("http://dbpedia.org/ontology/{}", l.to_lowercase()), "label": l, "desc": format!("the {l}")}))
        .collect();
    let gt: Vec<Value> = (0..12)
        .map(|i| json!({"id": format!("t{}_{i}", i / 4), "gt": format!("http://dbpedia.org/ontology/{}", LABELS[i % LABELS.len()].to_lowercase())}))
        .collect();
    let (m, g, t) = (dir.join("meta.jsonl"), dir.join("gloss.jsonl"), dir.join("gt.jsonl"));
    write_lines(&m, &cols);
    write_lines(&g, &gloss);
    write_lines(&t, &gt);
    (m, g, t)
}

fn ingested(dir: &Path) -> PathBuf {
    let (m, g, t) = raw_inputs(dir);
    let out = dir.join("corpus");
    let o = run(&["ingest", "--metadata", s(&m), "--glossary", s(&g), "--ground-truth", s(&t), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct MockProcess {
    child: Child,
    url: String,
}

impl Drop for MockProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn spawn_mock(script: &str) -> MockProcess {
    let mut child = cva(&["mock-llm", "--port", "0", "--script", script, "--seed", "5"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().strip_prefix("listening on ").expect("mock banner").to_string();
    MockProcess { child, url }
}

#[test]
fn ingest_reports_counts_and_appends_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = ingested(dir.path());
    for f in ["columns.jsonl", "glossary.jsonl", "ground_truth.jsonl", "manifest.jsonl"] {
        assert!(corpus.join(f).exists(), "{f}");
    }
    let manifest: Value =
        serde_json::from_str(std::fs::read_to_string(corpus.join("manifest.jsonl")).unwrap().lines().next().unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "ingest");
    assert_eq!(manifest["config"]["counts"]["columns"], 12);
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 3);
}

#[test]
fn ingest_rejects_bad_lines_and_input_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let (m, g, _) = raw_inputs(dir.path());
    std::fs::write(&m, "{\"id\":\"c1\",\"label\":\"x\"}\n").unwrap();
    let o = run(&["ingest", "--metadata", s(&m), "--glossary", s(&g), "--out", s(&dir.path().join("c"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("table_columns"));

    let (m, g, _) = raw_inputs(dir.path());
    let clash = dir.path().join("columns.jsonl");
    std::fs::copy(&m, &clash).unwrap();
    let o = run(&["ingest", "--metadata", s(&clash), "--glossary", s(&g), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors() {
    assert_eq!(run(&["bogus"]).status.code(), Some(2));
    assert_eq!(run(&["rank", "--out", "m.jsonl"]).status.code(), Some(2));
    assert_eq!(run(&["rank", "--corpus", "c", "--k", "9", "--out", "m.jsonl"]).status.code(), Some(2));
    assert_eq!(run(&["llm-match", "--corpus", "c", "--model", "m", "--out", "o"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn rank_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = ingested(dir.path());
    let out = dir.path().join("ranked/m.jsonl");
    let o = run(&[
        "rank", "--corpus", s(&corpus), "--meta-strategy", "label", "--gloss-strategy", "label", "--backend", "local",
        "--k", "5", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("ranked/manifest.jsonl").exists());
    let first: Value = serde_json::from_str(std::fs::read_to_string(&out).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["colID"], "t0_0");
    assert_eq!(first["propID"].as_array().unwrap().len(), 5);

    let o = run(&["eval", "--mappings", s(&out), "--ground-truth", s(&corpus.join("ground_truth.jsonl"))]);
    assert!(o.status.success());
    let r: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(r["h1"], 1.0);
    assert_eq!(r["h5"], 1.0);
}

#[test]
fn shard_writes_paired_files() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = ingested(dir.path());
    let out = dir.path().join("shards");
    let o = run(&["shard", "--corpus", s(&corpus), "--n", "3", "--seed", "17", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: Value = serde_json::from_str(&std::fs::read_to_string(out.join("shards.json")).unwrap()).unwrap();
    assert_eq!(m["glossary_files"].as_array().unwrap().len(), 3);
    assert_eq!(m["metadata_sizes"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum::<u64>(), 12);
    let again = dir.path().join("shards2");
    run(&["shard", "--corpus", s(&corpus), "--n", "3", "--seed", "17", "--out", s(&again)]);
    assert_eq!(
        std::fs::read(out.join("shards.json")).unwrap(),
        std::fs::read(again.join("shards.json")).unwrap()
    );
    assert_eq!(run(&["shard", "--corpus", s(&corpus), "--n", "99", "--out", s(&out)]).status.code(), Some(2));
}

#[test]
fn llm_match_against_mock_and_settings_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = ingested(dir.path());
    let mock = spawn_mock("echo-valid-mapping");
    let dead = "http://127.0.0.1:9";
    let config = dir.path().join("cva.toml");
    std::fs::write(&config, format!("llm_url = \"{dead}\"\nmax_retries = 0\n")).unwrap();
    let out = dir.path().join("run");
    let args = [
        "llm-match", "--corpus", s(&corpus), "--model", "m", "--repetitions", "2", "--batch-size", "5", "--config",
        s(&config), "--out", s(&out),
    ];

    // environment beats the config file
    let o = cva(&args).env("CVA_LLM_URL", &mock.url).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("rep_1.mappings.jsonl").exists());
    assert!(out.join("runs/m/0.5/0/2.response.json").exists());
    let o = run(&[
        "eval", "--mappings", s(&out.join("rep_0.mappings.jsonl")), "--ground-truth",
        s(&corpus.join("ground_truth.jsonl")),
    ]);
    let r: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(r["h1"], 1.0);

    // the flag beats the environment
    let mut with_flag = args.to_vec();
    with_flag.extend(["--llm-url", &mock.url]);
    let o = cva(&with_flag).env("CVA_LLM_URL", dead).output().unwrap();
    assert!(o.status.success());

    // config alone points at a dead port
    let o = run(&args);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_is_reproducible_and_marks_failed_cells() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = ingested(dir.path());
    let mock = spawn_mock("echo-valid-mapping,gemma-7b=fail-rate(1.0)");
    let toml = dir.path().join("sweep.toml");
    std::fs::write(
        &toml,
        format!(
            "corpus = \"corpus\"\nground_truth = \"{}\"\nmodels = [\"gpt-4o\", \"gemma-7b\"]\ntemperatures = [0.5, 1.0]\nrepetitions = 3\nllm_url = \"{}\"\n",
            s(&corpus.join("ground_truth.jsonl")),
            mock.url
        ),
    )
    .unwrap();
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = run(&["sweep", "--config", s(&toml), "--out", s(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        reports.push((std::fs::read(out.join("report.jsonl")).unwrap(), std::fs::read(out.join("report.txt")).unwrap()));
    }
    assert_eq!(reports[0], reports[1]);
    let table = String::from_utf8(reports[0].1.clone()).unwrap();
    let gemma = table.lines().find(|l| l.starts_with("gemma-7b")).unwrap();
    assert_eq!(gemma.matches('X').count(), 4);
    assert!(table.lines().find(|l| l.starts_with("gpt-4o")).unwrap().contains("1.00"));
}

#[test]
fn embedding_sweep() {
    let dir = tempfile::tempdir().unwrap();
    ingested(dir.path());
    let toml = dir.path().join("sweep.toml");
    std::fs::write(
        &toml,
        "mode = \"embedding\"\ncorpus = \"corpus\"\nground_truth = \"corpus/ground_truth.jsonl\"\n",
    )
    .unwrap();
    let out = dir.path().join("r");
    let o = run(&["sweep", "--config", s(&toml), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(out.join("report.jsonl")).unwrap().lines().count(), 9);
}

#[test]
fn mock_port_in_use() {
    let held = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = held.local_addr().unwrap().port().to_string();
    let o = run(&["mock-llm", "--port", &port]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("already in use"));
}
