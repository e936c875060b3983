//! One function per pipeline stage. Each reads its inputs from disk, writes
//! its artifacts and a manifest, and returns a short human summary.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use forge_core::evaluation::{
    citation_task, generate_synthetic, ipc_classification_task, run_backtest, title_abstract_task, SyntheticTruth,
    TaskConfig, TaskReport,
};
use forge_core::model::{build_tokenizer, train, ClsText};
use forge_core::nullmodel::{candidate_pairs, k_for_imbalance, label_innovations, write_pair_stats};
use forge_core::similarity::{baseline_series, cs_timeseries, write_cs_csv, SeriesPoint};
use forge_core::{
    CSConfig, Checkpoint, CodePair, Corpus, EmbeddingStore, NullModel, NullModelError, SyntheticSpec,
    TimeWindow,
};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::io::{read_ckpt, read_corpus, read_json, read_store, truth_path, write_ckpt, write_corpus, write_json, write_store, write_with};
use crate::manifest::{digest_file, hex, Stage};
use crate::results::*;

pub const STORE_EXT: &str = "tte";

fn echo<T: Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).unwrap_or(serde_json::Value::Null)
}

fn file_manifest(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn dir_of(path: &Path) -> PathBuf {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::io(path, e)
}

pub fn ingest(input: &Path, output: &Path, min_year: Option<i32>, max_year: Option<i32>) -> Result<String, CliError> {
    let window = TimeWindow::new(min_year.unwrap_or(i32::MIN), max_year.unwrap_or(i32::MAX))?;
    Stage {
        name: "ingest",
        manifest: file_manifest(output),
        inputs: vec![("input", input)],
        outputs: vec![output.to_path_buf()],
        config: serde_json::json!({ "min_year": min_year, "max_year": max_year }),
    }
    .run(|| {
        let corpus = read_corpus(input)?.window_slice(window);
        if corpus.is_empty() {
            return Err(CliError::Data("no patents inside the year bounds".into()));
        }
        write_corpus(output, &corpus)?;
        Ok(format!(
            "ingested {} patents, {} codes, {} links ({} duplicate codes dropped)",
            corpus.len(),
            corpus.codes().count(),
            corpus.link_count(),
            corpus.duplicate_codes_dropped()
        ))
    })
}

pub fn synth(spec: &SyntheticSpec, out: &Path) -> Result<String, CliError> {
    let truth = truth_path(out);
    Stage {
        name: "synth",
        manifest: file_manifest(out),
        inputs: vec![],
        outputs: vec![out.to_path_buf(), truth.clone()],
        config: echo(spec),
    }
    .run(|| {
        let synthetic = generate_synthetic(spec)?;
        write_corpus(out, &synthetic.corpus)?;
        write_json(&truth, &synthetic.truth)?;
        Ok(format!(
            "generated {} patents with {} planted pairs",
            synthetic.corpus.len(),
            synthetic.truth.planted.len()
        ))
    })
}

/// Trains a checkpoint and writes `train.json` and `loss.csv` beside it.
pub fn train_model(corpus_path: &Path, cfg: &ExperimentConfig, out: &Path) -> Result<String, CliError> {
    let dir = dir_of(out);
    let results = dir.join(TRAIN_FILE);
    let loss_csv = dir.join("loss.csv");
    Stage {
        name: "train",
        manifest: file_manifest(out),
        inputs: vec![("corpus", corpus_path)],
        outputs: vec![out.to_path_buf(), results.clone(), loss_csv.clone()],
        config: serde_json::json!({
            "tokenizer": echo(&cfg.tokenizer),
            "model": echo(&cfg.model),
            "train": echo(&cfg.train),
        }),
    }
    .run(|| {
        let corpus = read_corpus(corpus_path)?;
        let tok = build_tokenizer(&corpus, cfg.tokenizer.min_freq)?;
        let output = train(&corpus, &tok, cfg.model, &cfg.train)?;
        let ckpt = Checkpoint::new(output.params, tok)?;
        write_ckpt(out, &ckpt)?;
        let trace = &output.loss_trace;
        let tail = &trace[trace.len().saturating_sub(FINAL_LOSS_STEPS)..];
        let summary = TrainResults {
            schema_version: SCHEMA_VERSION,
            corpus_sha256: digest_file(corpus_path)?.sha256,
            model_sha256: hex(&ckpt.hash()),
            n_patents: corpus.len(),
            vocab_size: ckpt.tokenizer.vocab_size(),
            steps: cfg.train.steps,
            skipped_batches: output.skipped_batches,
            initial_loss: trace.first().map_or(f64::NAN, |&l| l as f64),
            final_loss: tail.iter().map(|&l| l as f64).sum::<f64>() / tail.len().max(1) as f64,
        };
        write_json(&results, &summary)?;
        write_with(&loss_csv, |w| {
            writeln!(w, "step,loss").map_err(io_err(&loss_csv))?;
            for (i, l) in trace.iter().enumerate() {
                writeln!(w, "{i},{l:.6}").map_err(io_err(&loss_csv))?;
            }
            Ok(())
        })?;
        Ok(format!(
            "trained {} steps: loss {:.4} -> {:.4}",
            summary.steps, summary.initial_loss, summary.final_loss
        ))
    })
}

/// Embeds the window into one store, or with `yearly` one store per year
/// named `<year>.tte` inside `out`.
pub fn embed(
    ckpt_path: &Path,
    corpus_path: &Path,
    window: TimeWindow,
    out: &Path,
    yearly: bool,
    cls_text: ClsText,
) -> Result<String, CliError> {
    let windows: Vec<TimeWindow> = if yearly {
        window.years().map(TimeWindow::year).collect()
    } else {
        vec![window]
    };
    let targets: Vec<PathBuf> = if yearly {
        windows
            .iter()
            .map(|w| out.join(format!("{}.{STORE_EXT}", w.start_year)))
            .collect()
    } else {
        vec![out.to_path_buf()]
    };
    let manifest = if yearly { out.join("embed.manifest.json") } else { file_manifest(out) };
    Stage {
        name: "embed",
        manifest,
        inputs: vec![("checkpoint", ckpt_path), ("corpus", corpus_path)],
        outputs: targets.clone(),
        config: serde_json::json!({ "window": window.to_string(), "yearly": yearly, "cls_text": cls_text }),
    }
    .run(|| {
        if yearly {
            std::fs::create_dir_all(out).map_err(io_err(out))?;
        }
        let ckpt = read_ckpt(ckpt_path)?;
        let corpus = read_corpus(corpus_path)?;
        let mut lines = Vec::new();
        for (w, path) in windows.iter().zip(&targets) {
            let store = ckpt.embed_with(&corpus, *w, cls_text)?;
            write_store(path, &store)?;
            lines.push(format!(
                "{}: {} technology vectors, {} patents",
                path.display(),
                store.tech_records().len(),
                store.cls_records().len()
            ));
        }
        Ok(lines.join("\n"))
    })
}

fn load_store_dir(dir: &Path) -> Result<Vec<(PathBuf, EmbeddingStore)>, CliError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == STORE_EXT))
        .collect();
    paths.sort();
    let mut stores = paths
        .into_iter()
        .map(|p| read_store(&p).map(|s| (p, s)))
        .collect::<Result<Vec<_>, _>>()?;
    if stores.is_empty() {
        return Err(CliError::Data(format!("no .{STORE_EXT} stores in {}", dir.display())));
    }
    stores.sort_by_key(|(_, s)| s.window());
    Ok(stores)
}

/// Pairs never carried together by a patent of any store.
fn store_candidates(stores: &[EmbeddingStore]) -> Vec<CodePair> {
    let mut codes = BTreeSet::new();
    let mut seen = BTreeSet::new();
    for s in stores {
        codes.extend(s.codes());
        for cs in s.patent_codes().values() {
            for (i, &a) in cs.iter().enumerate() {
                for &b in &cs[i + 1..] {
                    seen.extend(CodePair::new(a, b));
                }
            }
        }
    }
    let codes: Vec<_> = codes.into_iter().collect();
    let mut out = Vec::new();
    for (i, &a) in codes.iter().enumerate() {
        for &b in &codes[i + 1..] {
            let p = CodePair::new(a, b).expect("distinct codes");
            if !seen.contains(&p) {
                out.push(p);
            }
        }
    }
    out
}

/// Reads `code_a,code_b` lines; a header line and blank lines are skipped.
pub fn read_pairs(path: &Path) -> Result<Vec<CodePair>, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("code_a") {
            continue;
        }
        let bad = |m: String| CliError::Data(format!("{}:{}: {m}", path.display(), i + 1));
        let mut fields = line.split(',').map(str::trim);
        let (Some(a), Some(b)) = (fields.next(), fields.next()) else {
            return Err(bad("expected code_a,code_b".into()));
        };
        let a = a.parse().map_err(|e: forge_core::CorpusError| bad(e.to_string()))?;
        let b = b.parse().map_err(|e: forge_core::CorpusError| bad(e.to_string()))?;
        out.push(CodePair::new(a, b).ok_or_else(|| bad("pair of identical codes".into()))?);
    }
    Ok(out)
}

/// CS per store for each pair. Raw values go to `out`; the smoothed series
/// goes to a `.smoothed.csv` sibling.
pub fn cs(store_dir: &Path, pairs: &str, cfg: CSConfig, out: &Path) -> Result<String, CliError> {
    cfg.validate()?;
    let pairs_path = (pairs != "all-candidates").then(|| PathBuf::from(pairs));
    let mut inputs = vec![];
    if let Some(p) = &pairs_path {
        inputs.push(("pairs", p.as_path()));
    }
    let smoothed_path = out.with_extension("smoothed.csv");
    Stage {
        name: "cs",
        manifest: file_manifest(out),
        inputs,
        outputs: vec![out.to_path_buf(), smoothed_path.clone()],
        config: serde_json::json!({ "store_dir": store_dir, "pairs": pairs, "cs": echo(&cfg) }),
    }
    .run(|| {
        let loaded = load_store_dir(store_dir)?;
        let stores: Vec<EmbeddingStore> = loaded.into_iter().map(|(_, s)| s).collect();
        let pairs = match &pairs_path {
            Some(p) => read_pairs(p)?,
            None => store_candidates(&stores),
        };
        let yearly = stores.iter().all(|s| s.window().start_year == s.window().end_year);
        let mut rows = Vec::new();
        let mut series: Vec<(CodePair, Vec<SeriesPoint>)> = Vec::new();
        for &p in &pairs {
            if yearly {
                let ts = cs_timeseries(&stores, p, &cfg)?;
                rows.extend(ts.iter().filter_map(|pt| pt.raw));
                series.push((p, ts));
            } else {
                for s in &stores {
                    match forge_core::similarity::cs(s, p, &cfg) {
                        Ok(v) => rows.push(v),
                        Err(forge_core::SimilarityError::NoEmbeddings(_)) => {}
                        Err(e) => return Err(e.into()),
                    }
                }
            }
        }
        write_with(out, |w| write_cs_csv(w, &rows).map_err(io_err(out)))?;
        write_with(&smoothed_path, |w| {
            writeln!(w, "code_a,code_b,year,cs_smoothed").map_err(io_err(&smoothed_path))?;
            for (p, ts) in &series {
                for pt in ts {
                    if let Some(v) = pt.smoothed {
                        writeln!(w, "{},{},{},{v:.9}", p.a, p.b, pt.year).map_err(io_err(&smoothed_path))?;
                    }
                }
            }
            Ok(())
        })?;
        Ok(format!("{} pairs, {} CS values over {} stores", pairs.len(), rows.len(), stores.len()))
    })
}

/// Null-model statistics in `test_window` for every candidate of
/// `train_window`, plus the top-K labelling at class imbalance `ci`.
pub fn score(
    corpus_path: &Path,
    train_window: TimeWindow,
    test_window: TimeWindow,
    ci: f64,
    min_support: usize,
    out: &Path,
) -> Result<String, CliError> {
    if !(ci > 0.0 && ci < 1.0) {
        return Err(CliError::Config(format!("ci {ci} outside (0,1)")));
    }
    if test_window.start_year <= train_window.end_year {
        return Err(CliError::Config("test window must start after the training window".into()));
    }
    Stage {
        name: "score",
        manifest: file_manifest(out),
        inputs: vec![("corpus", corpus_path)],
        outputs: vec![out.to_path_buf()],
        config: serde_json::json!({
            "train_window": train_window.to_string(),
            "test_window": test_window.to_string(),
            "ci": ci,
            "min_support": min_support,
        }),
    }
    .run(|| {
        let corpus = read_corpus(corpus_path)?;
        let candidates = candidate_pairs(&corpus, train_window.end_year + 1, train_window, min_support);
        let nm = NullModel::new(&corpus.window_slice(test_window))?;
        let mut rows = Vec::new();
        let mut stats = HashMap::new();
        for &p in &candidates {
            match nm.stats(p) {
                Ok(s) => {
                    rows.push((s, nm.pvalue(p, s.observed)?));
                    stats.insert(p, s);
                }
                Err(NullModelError::UnknownCode(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        write_with(out, |w| write_pair_stats(w, &rows).map_err(io_err(out)))?;
        let k = k_for_imbalance(candidates.len(), ci);
        let labels = label_innovations(&candidates, &stats, k)?;
        let mut lines = vec![format!(
            "{} candidates, {} with statistics in {test_window}; K = {k}, z threshold {:.4}",
            candidates.len(),
            rows.len(),
            labels.z_threshold
        )];
        lines.extend(labels.positives.iter().map(|p| format!("  positive {} {}", p.a, p.b)));
        Ok(lines.join("\n"))
    })
}

fn read_truth(corpus_path: &Path) -> Result<Option<SyntheticTruth>, CliError> {
    let p = truth_path(corpus_path);
    if p.exists() {
        read_json(&p).map(Some)
    } else {
        Ok(None)
    }
}

/// Runs the backtest for every configured method and follows selected
/// pairs year by year against a band of random never-combined pairs.
pub fn backtest(cfg: &ExperimentConfig, corpus_path: &Path, ckpt_path: &Path) -> Result<String, CliError> {
    let out = cfg.output_dir.join(BACKTEST_FILE);
    let scores_csv = cfg.output_dir.join("candidate_scores.csv");
    Stage {
        name: "backtest",
        manifest: cfg.output_dir.join("backtest.manifest.json"),
        inputs: vec![("corpus", corpus_path), ("checkpoint", ckpt_path)],
        outputs: vec![out.clone(), scores_csv.clone()],
        config: echo(cfg),
    }
    .run(|| {
        let corpus = read_corpus(corpus_path)?;
        let ckpt = read_ckpt(ckpt_path)?;
        let truth = read_truth(corpus_path)?;
        let train_store = ckpt.embed_with(&corpus, cfg.backtest.train_window, cfg.embed.cls_text)?;

        let mut methods = Vec::new();
        let mut all_scores = Vec::new();
        for &m in &cfg.backtest.methods {
            let r = run_backtest(&corpus, &train_store, &cfg.backtest_config(m))?;
            methods.push(MethodResults {
                method: m,
                n_candidates: r.n_candidates,
                n_scored: r.scores.len(),
                windows: r.windows,
            });
            all_scores.push((m, r.scores));
        }

        let series = follow_pairs(cfg, &corpus, &ckpt, truth.as_ref(), &all_scores[0].1)?;
        let results = BacktestResults {
            schema_version: SCHEMA_VERSION,
            corpus_sha256: digest_file(corpus_path)?.sha256,
            model_sha256: hex(&ckpt.hash()),
            train_window: cfg.backtest.train_window,
            test_windows: cfg.backtest.test_windows.clone(),
            ci: cfg.backtest.ci,
            min_support: cfg.backtest.min_support,
            n_permutations: cfg.backtest.n_permutations,
            seed: cfg.seed,
            methods,
            series,
        };
        write_json(&out, &results)?;
        write_with(&scores_csv, |w| {
            writeln!(w, "method,code_a,code_b,cs").map_err(io_err(&scores_csv))?;
            for (m, scores) in &all_scores {
                for (p, v) in scores {
                    writeln!(w, "{m},{},{},{v:.9}", p.a, p.b).map_err(io_err(&scores_csv))?;
                }
            }
            Ok(())
        })?;
        Ok(crate::report::backtest_table(&results))
    })
}

fn follow_pairs(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    ckpt: &Checkpoint,
    truth: Option<&SyntheticTruth>,
    scores: &[(CodePair, f64)],
) -> Result<SeriesResults, CliError> {
    let range = corpus.year_range().ok_or_else(|| CliError::Data("empty corpus".into()))?;
    let mut tracked: Vec<(CodePair, Option<i32>)> = Vec::new();
    for &(a, b) in &cfg.series.pairs {
        let p = CodePair::new(a, b).ok_or_else(|| CliError::Config(format!("series pair {a},{b} repeats a code")))?;
        tracked.push((p, None));
    }
    if tracked.is_empty() {
        if let Some(t) = truth {
            tracked = t
                .planted
                .iter()
                .filter_map(|p| CodePair::new(p.a, p.b).map(|c| (c, Some(p.year))))
                .collect();
        }
    }
    if tracked.is_empty() {
        let mut ranked = scores.to_vec();
        ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
        tracked = ranked.iter().take(cfg.series.top_n).map(|s| (s.0, None)).collect();
    }

    let stores = range
        .years()
        .map(|y| ckpt.embed_with(corpus, TimeWindow::year(y), cfg.embed.cls_text))
        .collect::<Result<Vec<_>, _>>()?;
    let population = candidate_pairs(corpus, range.end_year + 1, range, cfg.backtest.min_support);
    let baseline = if population.is_empty() {
        vec![]
    } else {
        baseline_series(&stores, &population, &cfg.cs, cfg.series.baseline_samples, cfg.seed)?
            .into_iter()
            .filter_map(|(year, b)| {
                b.map(|b| BandPoint {
                    year,
                    mean: b.mean,
                    std: b.std,
                    n: b.n,
                })
            })
            .collect()
    };
    let pairs = tracked
        .into_iter()
        .map(|(p, planted_year)| {
            let ts = cs_timeseries(&stores, p, &cfg.cs)?;
            Ok(PairSeries {
                code_a: p.a,
                code_b: p.b,
                planted_year,
                points: ts
                    .into_iter()
                    .map(|pt| YearPoint {
                        year: pt.year,
                        cs: pt.raw.map(|v| v.value),
                        n_pairs_used: pt.raw.map(|v| v.n_pairs_used),
                        smoothed: pt.smoothed,
                    })
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(SeriesResults {
        method: cfg.cs.method,
        x_percent: cfg.cs.x_percent,
        window_smoothing: cfg.cs.window_smoothing,
        population_size: population.len(),
        baseline,
        pairs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Ipc,
    Cite,
    Title,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Ipc, TaskKind::Cite, TaskKind::Title];
}

/// Runs downstream tasks and merges their reports into `out`. Reports from
/// another model or corpus are replaced rather than merged.
pub fn tasks(
    kinds: &[TaskKind],
    ckpt_path: &Path,
    corpus_path: &Path,
    store_path: Option<&Path>,
    cfg: &TaskConfig,
    out: &Path,
) -> Result<String, CliError> {
    let mut inputs = vec![("checkpoint", ckpt_path), ("corpus", corpus_path)];
    if let Some(s) = store_path {
        inputs.push(("store", s));
    }
    Stage {
        name: "tasks",
        manifest: file_manifest(out),
        inputs,
        outputs: vec![out.to_path_buf()],
        config: echo(cfg),
    }
    .run(|| {
        let ckpt = read_ckpt(ckpt_path)?;
        let corpus = read_corpus(corpus_path)?;
        let store = store_path.map(read_store).transpose()?;
        let corpus_sha256 = digest_file(corpus_path)?.sha256;
        let model_sha256 = hex(&ckpt.hash());
        let mut results = match out.exists().then(|| read_json::<TasksResults>(out)) {
            Some(Ok(r)) if r.schema_version == SCHEMA_VERSION && r.model_sha256 == model_sha256 && r.corpus_sha256 == corpus_sha256 => r,
            _ => TasksResults {
                schema_version: SCHEMA_VERSION,
                corpus_sha256,
                model_sha256,
                tasks: Default::default(),
            },
        };
        let mut lines = Vec::new();
        for kind in kinds {
            let report: TaskReport = match kind {
                TaskKind::Ipc => ipc_classification_task(&ckpt, &corpus, store.as_ref(), cfg)?,
                TaskKind::Cite => citation_task(&ckpt, &corpus, cfg)?,
                TaskKind::Title => title_abstract_task(&ckpt, &corpus, cfg)?,
            };
            lines.push(crate::report::task_line(&report));
            results.tasks.insert(report.task.clone(), report);
        }
        write_json(out, &results)?;
        Ok(lines.join("\n"))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum PipelineStage {
    Synth,
    Train,
    Backtest,
    Tasks,
    Report,
}

impl PipelineStage {
    pub const ALL: [PipelineStage; 5] = [
        PipelineStage::Synth,
        PipelineStage::Train,
        PipelineStage::Backtest,
        PipelineStage::Tasks,
        PipelineStage::Report,
    ];
}

/// Runs the requested stages in order inside `cfg.output_dir`. The corpus
/// is checked before anything is written.
pub fn run_pipeline(cfg: ExperimentConfig, stages: &[PipelineStage]) -> Result<Vec<String>, CliError> {
    let cfg = cfg.effective()?;
    let mut stages = stages.to_vec();
    stages.sort();
    stages.dedup();
    if cfg.synthetic.is_none() {
        stages.retain(|s| *s != PipelineStage::Synth);
        let corpus = cfg.corpus_path();
        if !corpus.exists() {
            return Err(CliError::Config(format!("corpus {} does not exist", corpus.display())));
        }
    }
    let corpus = cfg.corpus_path();
    let ckpt = cfg.checkpoint_path();
    std::fs::create_dir_all(&cfg.output_dir).map_err(io_err(&cfg.output_dir))?;
    let echoed = toml::to_string(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(cfg.output_dir.join("config.toml"), echoed).map_err(io_err(&cfg.output_dir))?;

    let mut log = Vec::new();
    for stage in stages {
        let line = match stage {
            PipelineStage::Synth => synth(cfg.synthetic.as_ref().expect("synthetic stage kept only with a spec"), &corpus)?,
            PipelineStage::Train => train_model(&corpus, &cfg, &ckpt)?,
            PipelineStage::Backtest => backtest(&cfg, &corpus, &ckpt)?,
            PipelineStage::Tasks => tasks(&TaskKind::ALL, &ckpt, &corpus, None, &cfg.tasks, &cfg.output_dir.join(TASKS_FILE))?,
            PipelineStage::Report => crate::report::report(&cfg.output_dir)?,
        };
        log.push(line);
    }
    Ok(log)
}
