use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TimeWindow};
use crate::model::EmbeddingSource;
use crate::nullmodel::{candidate_pairs, k_for_imbalance, label_innovations, CodePair, NullModel, NullModelError};
use crate::similarity::{cs_many, CSConfig};

use super::metrics::auc_roc;
use super::EvalError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BacktestConfig {
    pub train_window: TimeWindow,
    pub test_windows: Vec<TimeWindow>,
    /// Fraction of the candidate universe labelled positive.
    pub ci: f64,
    #[serde(default)]
    pub cs_config: CSConfig,
    #[serde(default = "one")]
    pub min_support: usize,
    #[serde(default)]
    pub seed: u64,
    /// Label permutations per window for the chance band.
    #[serde(default = "hundred")]
    pub n_permutations: usize,
}

fn one() -> usize {
    1
}

fn hundred() -> usize {
    100
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.ci > 0.0 && self.ci < 1.0) {
            return Err(EvalError::InvalidConfig(format!("ci {} outside (0,1)", self.ci)));
        }
        if self.test_windows.is_empty() {
            return Err(EvalError::InvalidConfig("no test windows".into()));
        }
        if let Some(w) = self.test_windows.iter().find(|w| w.start_year <= self.train_window.end_year) {
            return Err(EvalError::InvalidConfig(format!(
                "test window {w} starts before the training window {} ends",
                self.train_window
            )));
        }
        self.cs_config.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowResult {
    pub window: TimeWindow,
    /// `None` when the window has a single class.
    pub auc_roc: Option<f64>,
    pub universe_size: usize,
    pub k: usize,
    /// z-score of the K-th positive.
    pub z_threshold: Option<f64>,
    pub positives: Vec<CodePair>,
    /// Mean and 95th percentile of AUC under shuffled labels.
    pub permutation_mean: Option<f64>,
    pub permutation_p95: Option<f64>,
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BacktestResult {
    pub config: BacktestConfig,
    /// Candidates before dropping those without a CS score.
    pub n_candidates: usize,
    /// Scored candidates in canonical order; the AUC universe.
    pub scores: Vec<(CodePair, f64)>,
    pub windows: Vec<WindowResult>,
}

/// CS over the training window for every candidate that never co-occurred
/// up to its end. Candidates lacking embeddings are dropped.
pub fn score_candidates(
    corpus: &Corpus,
    source: &(dyn EmbeddingSource + Sync),
    cfg: &BacktestConfig,
) -> Result<(usize, Vec<(CodePair, f64)>), EvalError> {
    let candidates = candidate_pairs(corpus, cfg.train_window.end_year + 1, cfg.train_window, cfg.min_support);
    let store = source.embeddings(corpus, cfg.train_window)?;
    let values = cs_many(&store, &candidates, &cfg.cs_config)?;
    let scores = candidates
        .iter()
        .zip(values)
        .filter_map(|(&p, v)| v.map(|v| (p, v.value)))
        .collect();
    Ok((candidates.len(), scores))
}

fn percentile_95(sorted: &[f64]) -> f64 {
    let idx = ((0.95 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

fn evaluate_window(
    corpus: &Corpus,
    scores: &[(CodePair, f64)],
    cfg: &BacktestConfig,
    window: TimeWindow,
    salt: u64,
) -> Result<WindowResult, EvalError> {
    let universe: Vec<CodePair> = scores.iter().map(|s| s.0).collect();
    let k = k_for_imbalance(universe.len(), cfg.ci);
    let mut result = WindowResult {
        window,
        auc_roc: None,
        universe_size: universe.len(),
        k,
        z_threshold: None,
        positives: vec![],
        permutation_mean: None,
        permutation_p95: None,
        skipped: None,
    };
    let slice = corpus.window_slice(window);
    let nm = match NullModel::new(&slice) {
        Ok(nm) => nm,
        Err(NullModelError::EmptyCorpus) => {
            result.skipped = Some("no patents in window".into());
            return Ok(result);
        }
        Err(e) => return Err(e.into()),
    };
    let mut stats = HashMap::with_capacity(universe.len());
    for &p in &universe {
        match nm.stats(p) {
            Ok(s) => {
                stats.insert(p, s);
            }
            // a code absent from the window cannot combine there
            Err(NullModelError::UnknownCode(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    let labels = match label_innovations(&universe, &stats, k) {
        Ok(l) => l,
        Err(e @ NullModelError::InsufficientCandidates { .. }) => {
            result.skipped = Some(e.to_string());
            return Ok(result);
        }
        Err(e) => return Err(e.into()),
    };
    result.z_threshold = Some(labels.z_threshold);
    result.positives = labels.positives.iter().copied().collect();
    let values: Vec<f64> = scores.iter().map(|s| s.1).collect();
    let mut flags: Vec<bool> = universe.iter().map(|p| labels.label(p)).collect();
    match auc_roc(&values, &flags) {
        Ok(auc) => result.auc_roc = Some(auc),
        Err(EvalError::SingleClass) => {
            result.skipped = Some("single class".into());
            return Ok(result);
        }
        Err(e) => return Err(e),
    }
    if cfg.n_permutations > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut perm = Vec::with_capacity(cfg.n_permutations);
        for _ in 0..cfg.n_permutations {
            flags.shuffle(&mut rng);
            perm.push(auc_roc(&values, &flags)?);
        }
        perm.sort_by(f64::total_cmp);
        result.permutation_mean = Some(perm.iter().sum::<f64>() / perm.len() as f64);
        result.permutation_p95 = Some(percentile_95(&perm));
    }
    Ok(result)
}

/// Scores never-combined candidates by CS on the training window and
/// measures, per test window, how well the scores rank the top-K z-score
/// combinations realised there.
pub fn run_backtest(
    corpus: &Corpus,
    source: &(dyn EmbeddingSource + Sync),
    cfg: &BacktestConfig,
) -> Result<BacktestResult, EvalError> {
    cfg.validate()?;
    let (n_candidates, scores) = score_candidates(corpus, source, cfg)?;
    let windows = cfg
        .test_windows
        .par_iter()
        .enumerate()
        .map(|(i, &w)| evaluate_window(corpus, &scores, cfg, w, i as u64 + 1))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BacktestResult {
        config: cfg.clone(),
        n_candidates,
        scores,
        windows,
    })
}
