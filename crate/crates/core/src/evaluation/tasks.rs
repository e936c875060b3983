use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, PatentRecord, TechCode, TimeWindow};
use crate::model::{code_distribution, text_cls_vector, Checkpoint, CodeScore, EmbeddingStore};
use crate::similarity::cosine;

use super::knn::knn_classify;
use super::metrics::{classification_metrics, retrieval_metrics, title_abstract_eval};
use super::EvalError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub seed: u64,
    /// Upper bound on evaluated patents per split.
    pub max_queries: usize,
    /// Candidates per citation query, relevant ones included.
    pub pool_size: usize,
    pub knn_k: usize,
    pub knn_threshold: f64,
    /// Probability thresholds tried on the validation split.
    pub thresholds: Vec<f64>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            seed: 0,
            max_queries: 200,
            pool_size: 20,
            knn_k: 10,
            knn_threshold: 0.3,
            thresholds: (1..=10).map(|i| i as f64 * 0.05).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    pub n_queries: usize,
}

/// Patent ids split 80/10/10 in publication order.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

pub fn split_by_year(corpus: &Corpus) -> DataSplit {
    let mut recs: Vec<&PatentRecord> = corpus.records().iter().collect();
    recs.sort_by(|a, b| a.pub_date.cmp(&b.pub_date).then_with(|| a.id.cmp(&b.id)));
    let n = recs.len();
    let train_end = n * 8 / 10;
    let val_end = n * 9 / 10;
    let ids = |r: &[&PatentRecord]| r.iter().map(|p| p.id.clone()).collect();
    DataSplit {
        train: ids(&recs[..train_end]),
        validation: ids(&recs[train_end..val_end]),
        test: ids(&recs[val_end..]),
    }
}

fn sample_ids(ids: &[String], n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut out: Vec<String> = ids.choose_multiple(rng, n.min(ids.len())).cloned().collect();
    out.sort();
    out
}

fn predicted_set(dist: &[CodeScore], threshold: f64) -> BTreeSet<TechCode> {
    let mut set: BTreeSet<TechCode> = dist.iter().take_while(|s| s.prob >= threshold).map(|s| s.code).collect();
    if set.is_empty() {
        set.insert(dist[0].code);
    }
    set
}

fn distributions(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    ids: &[String],
) -> Result<Vec<(String, Vec<CodeScore>)>, EvalError> {
    ids.par_iter()
        .map(|id| {
            let r = corpus.get(id).expect("split ids come from the corpus");
            let d = code_distribution(&ckpt.params, &ckpt.tokenizer, &r.title, &r.abstract_text)?;
            Ok((id.clone(), d))
        })
        .collect()
}

fn gold_of(corpus: &Corpus, ids: &[String]) -> BTreeMap<String, BTreeSet<TechCode>> {
    ids.iter()
        .map(|id| (id.clone(), corpus.get(id).expect("known id").codes.iter().copied().collect()))
        .collect()
}

fn text_vectors(ckpt: &Checkpoint, items: &[(&str, &str)]) -> Result<Vec<Vec<f32>>, EvalError> {
    items
        .par_iter()
        .map(|(t, a)| Ok(text_cls_vector(&ckpt.params, &ckpt.tokenizer, t, a)?))
        .collect()
}

fn text_knn_store(ckpt: &Checkpoint, train: &Corpus, window: TimeWindow) -> Result<EmbeddingStore, EvalError> {
    let extracted = ckpt.embed(train, window)?;
    let items: Vec<(&str, &str)> = train.records().iter().map(|r| (r.title.as_str(), r.abstract_text.as_str())).collect();
    let cls = train
        .records()
        .iter()
        .map(|r| r.id.clone())
        .zip(text_vectors(ckpt, &items)?)
        .collect();
    Ok(EmbeddingStore::new(extracted.dim(), window, *extracted.model_hash(), extracted.tech_records().to_vec(), cls)?)
}

/// Code prediction from the masked technology slot, with the probability
/// threshold tuned for micro F1 on the validation split, next to a kNN
/// baseline over the training split. The kNN reference vectors come from
/// `knn_store` when given, otherwise from text-only CLS vectors.
pub fn ipc_classification_task(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    knn_store: Option<&EmbeddingStore>,
    cfg: &TaskConfig,
) -> Result<TaskReport, EvalError> {
    if cfg.thresholds.is_empty() {
        return Err(EvalError::InvalidConfig("no thresholds to tune".into()));
    }
    let split = split_by_year(corpus);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let val_ids = sample_ids(&split.validation, cfg.max_queries, &mut rng);
    let test_ids = sample_ids(&split.test, cfg.max_queries, &mut rng);
    let universe: BTreeSet<TechCode> = ckpt.tokenizer.codes().iter().copied().collect();

    let val = distributions(ckpt, corpus, &val_ids)?;
    let val_gold = gold_of(corpus, &val_ids);
    let mut best = (f64::NEG_INFINITY, cfg.thresholds[0]);
    for &t in &cfg.thresholds {
        let pred = val.iter().map(|(id, d)| (id.clone(), predicted_set(d, t))).collect();
        let f1 = classification_metrics(&pred, &val_gold, &universe)?.micro_f1;
        if f1 > best.0 {
            best = (f1, t);
        }
    }
    let threshold = best.1;

    let test = distributions(ckpt, corpus, &test_ids)?;
    let gold = gold_of(corpus, &test_ids);
    let pred = test.iter().map(|(id, d)| (id.clone(), predicted_set(d, threshold))).collect();
    let slot = classification_metrics(&pred, &gold, &universe)?;
    let argmax_hits = test.iter().filter(|(id, d)| gold[id].contains(&d[0].code)).count();

    let train = corpus.subset(split.train.iter().map(String::as_str));
    let window = train.year_range().ok_or(EvalError::EmptyStore)?;
    let store = match knn_store {
        // only training-split patents may vote
        Some(s) => s.restrict(&train, window),
        None => text_knn_store(ckpt, &train, window)?,
    };
    if store.cls_records().is_empty() {
        return Err(EvalError::EmptyStore);
    }
    let queries: Vec<(&str, &str)> = test_ids
        .iter()
        .map(|id| {
            let r = corpus.get(id).expect("known id");
            (r.title.as_str(), r.abstract_text.as_str())
        })
        .collect();
    let qv = text_vectors(ckpt, &queries)?;
    let knn_pred = test_ids
        .iter()
        .zip(&qv)
        .map(|(id, v)| Ok((id.clone(), knn_classify(&store, v, cfg.knn_k, cfg.knn_threshold, None)?)))
        .collect::<Result<BTreeMap<_, _>, EvalError>>()?;
    let knn = classification_metrics(&knn_pred, &gold, &universe)?;

    let metrics = BTreeMap::from([
        ("macro_f1".to_string(), slot.macro_f1),
        ("micro_f1".to_string(), slot.micro_f1),
        ("hamming_loss".to_string(), slot.hamming_loss),
        ("threshold".to_string(), threshold),
        ("argmax_accuracy".to_string(), argmax_hits as f64 / test_ids.len().max(1) as f64),
        ("knn_macro_f1".to_string(), knn.macro_f1),
        ("knn_micro_f1".to_string(), knn.micro_f1),
        ("knn_hamming_loss".to_string(), knn.hamming_loss),
    ]);
    Ok(TaskReport {
        task: "ipc_classification".into(),
        metrics,
        n_queries: test_ids.len(),
    })
}

/// Ranks each test patent's true citations among sampled earlier
/// non-citations by cosine of text-only CLS vectors.
pub fn citation_task(ckpt: &Checkpoint, corpus: &Corpus, cfg: &TaskConfig) -> Result<TaskReport, EvalError> {
    let split = split_by_year(corpus);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let with_citations: Vec<String> = split
        .test
        .iter()
        .filter(|id| corpus.get(id).is_some_and(|r| r.citations.iter().any(|c| corpus.get(c).is_some())))
        .cloned()
        .collect();
    let query_ids = sample_ids(&with_citations, cfg.max_queries, &mut rng);
    if query_ids.is_empty() {
        return Err(EvalError::InvalidConfig("no test patent cites a patent in the corpus".into()));
    }

    let mut pools = Vec::with_capacity(query_ids.len());
    for id in &query_ids {
        let q = corpus.get(id).expect("known id");
        let relevant: BTreeSet<String> = q.citations.iter().filter(|c| corpus.get(c).is_some()).cloned().collect();
        let earlier: Vec<String> = corpus
            .records()
            .iter()
            .filter(|r| r.pub_date < q.pub_date && !relevant.contains(&r.id))
            .map(|r| r.id.clone())
            .collect();
        let n_neg = cfg.pool_size.saturating_sub(relevant.len());
        let mut pool: Vec<String> = relevant.iter().cloned().collect();
        pool.extend(sample_ids(&earlier, n_neg, &mut rng));
        pool.sort();
        pools.push((id.clone(), pool, relevant));
    }

    let mut needed: BTreeSet<&str> = query_ids.iter().map(String::as_str).collect();
    needed.extend(pools.iter().flat_map(|(_, p, _)| p.iter().map(String::as_str)));
    let needed: Vec<&str> = needed.into_iter().collect();
    let items: Vec<(&str, &str)> = needed
        .iter()
        .map(|id| {
            let r = corpus.get(id).expect("known id");
            (r.title.as_str(), r.abstract_text.as_str())
        })
        .collect();
    let vectors: HashMap<&str, Vec<f32>> = needed.iter().copied().zip(text_vectors(ckpt, &items)?).collect();

    let mut queries = Vec::with_capacity(pools.len());
    for (id, pool, relevant) in &pools {
        let qv = &vectors[id.as_str()];
        let mut scored: Vec<(f64, String)> = pool
            .iter()
            .map(|c| Ok((cosine(qv, &vectors[c.as_str()])?, c.clone())))
            .collect::<Result<_, EvalError>>()?;
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        queries.push((scored.into_iter().map(|s| s.1).collect(), relevant.clone()));
    }
    let m = retrieval_metrics(&queries)?;
    Ok(TaskReport {
        task: "citation_retrieval".into(),
        metrics: BTreeMap::from([
            ("map".to_string(), m.map),
            ("mrr_at_10".to_string(), m.mrr_at_10),
            ("rfr".to_string(), m.rfr),
        ]),
        n_queries: queries.len(),
    })
}

/// Matches test abstracts to their titles by cosine of text-only CLS vectors.
pub fn title_abstract_task(ckpt: &Checkpoint, corpus: &Corpus, cfg: &TaskConfig) -> Result<TaskReport, EvalError> {
    let split = split_by_year(corpus);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids = sample_ids(&split.test, cfg.max_queries, &mut rng);
    let recs: Vec<&PatentRecord> = ids.iter().map(|id| corpus.get(id).expect("known id")).collect();
    let titles: Vec<(&str, &str)> = recs.iter().map(|r| (r.title.as_str(), "")).collect();
    let abstracts: Vec<(&str, &str)> = recs.iter().map(|r| ("", r.abstract_text.as_str())).collect();
    let (auc, mrr) = title_abstract_eval(&text_vectors(ckpt, &titles)?, &text_vectors(ckpt, &abstracts)?)?;
    Ok(TaskReport {
        task: "title_abstract".into(),
        metrics: BTreeMap::from([("auc_roc".to_string(), auc), ("mrr".to_string(), mrr)]),
        n_queries: ids.len(),
    })
}
