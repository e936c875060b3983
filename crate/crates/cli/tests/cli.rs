use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use forge_cli::results::{BacktestResults, TasksResults};

const TINY: &str = r#"
seed = 5

[synthetic]
n_patents_per_year = 40

[model]
layers = 1
heads = 2
model_dim = 16
ff_dim = 32
max_seq_len = 40

[train]
steps = 20
batch_size = 4

[backtest]
n_permutations = 5
ci = 0.01

[series]
baseline_samples = 30

[tasks]
max_queries = 10
"#;

fn forge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forge"))
        .args(args)
        .env_remove("FORGE_THREADS")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path, out: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, format!("output_dir = {:?}\n{TINY}", s(out))).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_documents_every_flag() {
    for (cmd, flags) in [
        ("ingest", &["--input", "--output", "--min-year", "--max-year"][..]),
        ("synth", &["--spec", "--out", "--seed"]),
        ("train", &["--corpus", "--config", "--out", "--steps", "--seed"]),
        ("embed", &["--ckpt", "--corpus", "--window", "--out", "--yearly", "--cls-text"]),
        ("cs", &["--store-dir", "--pairs", "--method", "--x", "--smooth", "--out"]),
        ("score", &["--corpus", "--train-window", "--test-window", "--ci", "--min-support", "--out"]),
        ("backtest", &["--config", "--ckpt", "--output-dir"]),
        ("tasks", &["--task", "--ckpt", "--store", "--corpus"]),
        ("report", &["--results"]),
        ("run", &["--config", "--stages"]),
    ] {
        let o = forge(&[cmd, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{cmd}");
        let text = stdout(&o);
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn unknown_flag_is_a_config_error() {
    let o = forge(&["report", "--results", ".", "--colour"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(forge(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn bad_thread_cap_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_forge"))
        .args(["report", "--results", s(dir.path())])
        .env("FORGE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_corpus_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, format!("corpus = {:?}\noutput_dir = {:?}\n", s(&dir.path().join("nope.jsonl")), s(&out))).unwrap();
    let o = forge(&["run", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.exists());

    let o = forge(&["train", "--corpus", s(&dir.path().join("nope.jsonl")), "--out", s(&out.join("m.ttk"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn empty_results_dir_is_missing_results() {
    let dir = tempfile::tempdir().unwrap();
    let o = forge(&["report", "--results", s(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no results"));
}

#[test]
fn malformed_corpus_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("raw.jsonl");
    std::fs::write(&input, "{\"id\": \"X\"}\n").unwrap();
    let o = forge(&["ingest", "--input", s(&input), "--output", s(&dir.path().join("c.jsonl"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn ingest_truncates_and_filters_years() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("raw.jsonl");
    std::fs::write(
        &input,
        concat!(
            r#"{"id":"B","pub_date":"2001-03-04","title":"t","abstract":"a","ipc":["A61K 31/4164","A61K 31/20","C07D 401/04"]}"#,
            "\n",
            r#"{"id":"A","pub_date":"1999-01-01","title":"t","abstract":"a","ipc":["H01M 4/02"],"citations":[]}"#,
            "\n"
        ),
    )
    .unwrap();
    let output = dir.path().join("corpus.jsonl");
    let o = forge(&["ingest", "--input", s(&input), "--output", s(&output), "--min-year", "2000"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&output).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.contains(r#""ipc":["A61K31","C07D401"]"#), "{text}");
    assert!(Path::new(&format!("{}.manifest.json", s(&output))).exists());
}

/// synth, train, embed, cs, score, backtest, tasks and report as separate
/// commands sharing one directory.
#[test]
fn stage_commands_compose() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = tiny_config(dir.path(), &out);
    let corpus = out.join("corpus.jsonl");
    let ckpt = out.join("model.ttk");

    let spec = dir.path().join("spec.toml");
    std::fs::write(&spec, "n_patents_per_year = 40\n").unwrap();
    assert_eq!(forge(&["synth", "--spec", s(&spec), "--out", s(&corpus), "--seed", "5"]).status.code(), Some(0));
    assert!(out.join("corpus.jsonl.truth.json").exists());

    let o = forge(&["train", "--corpus", s(&corpus), "--config", s(&cfg), "--out", s(&ckpt)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("train.json").exists() && out.join("loss.csv").exists());

    let stores = out.join("stores");
    let o = forge(&["embed", "--ckpt", s(&ckpt), "--corpus", s(&corpus), "--window", "2000:2002", "--out", s(&stores), "--yearly"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for y in 2000..=2002 {
        assert!(stores.join(format!("{y}.tte")).exists());
    }
    let bare = out.join("bare.tte");
    let o = forge(&["embed", "--ckpt", s(&ckpt), "--corpus", s(&corpus), "--window", "2000", "--out", s(&bare), "--cls-text", "abstract_only"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_ne!(std::fs::read(&bare).unwrap(), std::fs::read(stores.join("2000.tte")).unwrap());

    let pairs = dir.path().join("pairs.csv");
    std::fs::write(&pairs, "code_a,code_b\nA10K1,B11K1\n").unwrap();
    let cs_out = out.join("cs.csv");
    let o = forge(&["cs", "--store-dir", s(&stores), "--pairs", s(&pairs), "--out", s(&cs_out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&cs_out).unwrap();
    assert!(text.starts_with("code_a,code_b,year,cs,n_pairs_used,method\n"));
    assert_eq!(text.lines().count(), 4);
    assert_eq!(std::fs::read_to_string(out.join("cs.smoothed.csv")).unwrap().lines().count(), 4);
    let o = forge(&["cs", "--store-dir", s(&stores), "--pairs", "all-candidates", "--method", "mean_cls", "--out", s(&cs_out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = forge(&["cs", "--store-dir", s(&stores), "--pairs", "all-candidates", "--method", "median"]);
    assert_eq!(o.status.code(), Some(2));

    let stats = out.join("pair_stats.csv");
    let o = forge(&[
        "score", "--corpus", s(&corpus), "--train-window", "2002:2006", "--test-window", "2007:2009", "--ci", "0.01", "--out", s(&stats),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&stats).unwrap();
    assert!(text.starts_with("code_a,code_b,O,E,sigma,z,pvalue\n"));
    assert!(stdout(&o).contains("K = 7"));

    let o = forge(&["backtest", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = forge(&["tasks", "--task", "title", "--ckpt", s(&ckpt), "--corpus", s(&corpus)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = forge(&["tasks", "--task", "ipc", "--ckpt", s(&ckpt), "--corpus", s(&corpus), "--store", s(&stores.join("2001.tte"))]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let tasks: TasksResults = serde_json::from_str(&std::fs::read_to_string(out.join("tasks.json")).unwrap()).unwrap();
    assert_eq!(tasks.tasks.keys().collect::<Vec<_>>(), ["ipc_classification", "title_abstract"]);

    let o = forge(&["report", "--results", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("title_abstract"));
}

fn result_files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.to_str().unwrap().ends_with(".manifest.json") {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn pipeline_reports_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = tiny_config(dir.path(), &out);
    let o = forge(&["run", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let first = result_files(&out);

    let results: BacktestResults = serde_json::from_str(&std::fs::read_to_string(out.join("backtest.json")).unwrap()).unwrap();
    assert_eq!(results.schema_version, 1);
    assert_eq!(results.methods.len(), 3);
    assert_eq!(results.series.pairs.len(), 5);

    let auc = std::fs::read_to_string(out.join("plots/auc_vs_window.csv")).unwrap();
    let topx_rows = auc.lines().filter(|l| l.starts_with("topx_tech,")).count();
    assert_eq!(topx_rows, 3);
    let series = std::fs::read_to_string(out.join("plots/cs_vs_year.csv")).unwrap();
    let header: Vec<&str> = series.lines().next().unwrap().split(',').collect();
    for col in ["baseline_mean", "baseline_minus_3sd", "baseline_plus_3sd"] {
        assert!(header.contains(&col));
    }
    let planted_row = series.lines().find(|l| l.contains(",A10K1,B11K1,2007,2003,")).unwrap();
    assert_eq!(planted_row.split(',').count(), header.len());
    assert!(planted_row.split(',').all(|f| !f.is_empty()));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("backtest.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "complete");
    assert_eq!(manifest["config"]["seed"], 5);
    assert!(manifest["inputs"]["checkpoint"]["sha256"].as_str().unwrap().len() == 64);

    let o = forge(&["run", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(0));
    let second = result_files(&out);
    assert_eq!(first.len(), second.len());
    for (a, b) in first.iter().zip(&second) {
        assert_eq!(a.0, b.0);
        assert!(a.1 == b.1, "{} differs between runs", a.0.display());
    }
}

#[test]
fn thread_cap_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        let cfg = tiny_config(dir.path(), &out);
        let o = Command::new(env!("CARGO_BIN_EXE_forge"))
            .args(["run", "--config", s(&cfg), "--stages", "synth,train,backtest"])
            .env("FORGE_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out.join("backtest.json")).unwrap()
    };
    assert_eq!(run("one", "1"), run("three", "3"));
}
