//! Context similarity (CS) between technology codes.
//!
//! Three methods are supported: the cosine of the mean technology-token
//! vectors, the cosine of the mean `[CLS]` vectors of the patents carrying
//! each code, and the mean of the top `x` fraction of cosines over all cross
//! pairs of the two codes' technology-token vectors.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TechCode, TimeWindow};
use crate::model::EmbeddingStore;
use crate::nullmodel::CodePair;

/// Rows of the left code processed per similarity block.
const BLOCK_ROWS: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum SimilarityError {
    #[error("cosine of a zero vector")]
    ZeroVector,
    #[error("vector dimensions differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("code {0} has no embeddings")]
    NoEmbeddings(TechCode),
    #[error("context similarity of {0} with itself")]
    SelfPair(TechCode),
    #[error("need at least one code pair with embeddings, found {0}")]
    InsufficientCodes(usize),
    #[error("invalid similarity configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsMethod {
    MeanTech,
    TopxTech,
    MeanCls,
}

impl CsMethod {
    pub const ALL: [CsMethod; 3] = [CsMethod::MeanTech, CsMethod::TopxTech, CsMethod::MeanCls];

    pub fn as_str(&self) -> &'static str {
        match self {
            CsMethod::MeanTech => "mean_tech",
            CsMethod::TopxTech => "topx_tech",
            CsMethod::MeanCls => "mean_cls",
        }
    }
}

impl fmt::Display for CsMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CsMethod {
    type Err = SimilarityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CsMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| SimilarityError::InvalidConfig(format!("unknown method {s}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CSConfig {
    pub method: CsMethod,
    /// Fraction of cross pairs averaged by `topx_tech`, in (0, 1].
    pub x_percent: f64,
    /// Width in years of the centred moving average of time series.
    pub window_smoothing: usize,
}

impl Default for CSConfig {
    fn default() -> Self {
        CSConfig {
            method: CsMethod::TopxTech,
            x_percent: 0.01,
            window_smoothing: 3,
        }
    }
}

impl CSConfig {
    pub fn validate(&self) -> Result<(), SimilarityError> {
        if !(self.x_percent > 0.0 && self.x_percent <= 1.0) {
            return Err(SimilarityError::InvalidConfig(format!("x_percent {} outside (0,1]", self.x_percent)));
        }
        if self.window_smoothing == 0 {
            return Err(SimilarityError::InvalidConfig("window_smoothing must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CSValue {
    pub pair: CodePair,
    pub window: TimeWindow,
    pub value: f64,
    pub n_pairs_used: usize,
    pub method: CsMethod,
}

/// Which vectors of a code are averaged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VectorSource {
    Tech,
    Cls,
}

/// Cosine similarity in f64, clamped to [-1, 1].
pub fn cosine<T: Copy + Into<f64>>(u: &[T], v: &[T]) -> Result<f64, SimilarityError> {
    if u.len() != v.len() {
        return Err(SimilarityError::DimMismatch(u.len(), v.len()));
    }
    let (mut dot, mut uu, mut vv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a.into(), b.into());
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Err(SimilarityError::ZeroVector);
    }
    Ok((dot / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0))
}

fn vectors_of(store: &EmbeddingStore, code: TechCode, source: VectorSource) -> Vec<&[f32]> {
    match source {
        VectorSource::Tech => store.tech_vectors(code),
        VectorSource::Cls => store.cls_vectors_for_code(code),
    }
}

/// Arithmetic mean of a code's raw vectors.
pub fn code_mean_embedding(
    store: &EmbeddingStore,
    code: TechCode,
    source: VectorSource,
) -> Result<Vec<f64>, SimilarityError> {
    let vs = vectors_of(store, code, source);
    if vs.is_empty() {
        return Err(SimilarityError::NoEmbeddings(code));
    }
    let mut mean = vec![0.0f64; store.dim()];
    for v in &vs {
        for (m, &x) in mean.iter_mut().zip(v.iter()) {
            *m += x as f64;
        }
    }
    let n = vs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

fn unit_rows(vs: &[&[f32]], dim: usize) -> Result<Array2<f64>, SimilarityError> {
    let mut out = Array2::zeros((vs.len(), dim));
    for (mut row, v) in out.rows_mut().into_iter().zip(vs) {
        let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(SimilarityError::ZeroVector);
        }
        for (o, &x) in row.iter_mut().zip(v.iter()) {
            *o = x as f64 / norm;
        }
    }
    Ok(out)
}

/// Number of cross pairs averaged by the top-x method.
pub fn topx_count(x: f64, n_pairs: usize) -> usize {
    ((x * n_pairs as f64).ceil() as usize).clamp(1, n_pairs.max(1))
}

/// Keeps the `m` largest values pushed into it using a buffer of at most
/// `2m` entries.
struct TopM {
    m: usize,
    buf: Vec<f64>,
    /// Every discarded value is at most this.
    floor: f64,
}

impl TopM {
    fn new(m: usize) -> Self {
        TopM {
            m,
            buf: Vec::with_capacity(2 * m),
            floor: f64::NEG_INFINITY,
        }
    }

    fn push(&mut self, x: f64) {
        if x <= self.floor {
            return;
        }
        self.buf.push(x);
        if self.buf.len() == 2 * self.m {
            self.prune();
        }
    }

    fn prune(&mut self) {
        if self.buf.len() > self.m {
            let m = self.m;
            self.buf.select_nth_unstable_by(m - 1, |a, b| b.total_cmp(a));
            self.buf.truncate(m);
        }
        if self.buf.len() == self.m {
            self.floor = self.buf.iter().copied().fold(f64::INFINITY, f64::min);
        }
    }

    fn mean(mut self) -> f64 {
        self.prune();
        self.buf.sort_unstable_by(|a, b| b.total_cmp(a));
        self.buf.iter().sum::<f64>() / self.buf.len() as f64
    }
}

/// Mean of the `m = max(1, ceil(x |A| |B|))` largest cross-pair cosines.
///
/// Cosines are computed block by block and never stored in full; auxiliary
/// memory is `O((|A| + |B|) d + m)`.
pub fn cs_topx(store: &EmbeddingStore, a: TechCode, b: TechCode, x: f64) -> Result<CSValue, SimilarityError> {
    if a == b {
        return Err(SimilarityError::SelfPair(a));
    }
    if !(x > 0.0 && x <= 1.0) {
        return Err(SimilarityError::InvalidConfig(format!("x {x} outside (0,1]")));
    }
    let va = store.tech_vectors(a);
    let vb = store.tech_vectors(b);
    if va.is_empty() {
        return Err(SimilarityError::NoEmbeddings(a));
    }
    if vb.is_empty() {
        return Err(SimilarityError::NoEmbeddings(b));
    }
    let ua = unit_rows(&va, store.dim())?;
    let ub = unit_rows(&vb, store.dim())?;
    let m = topx_count(x, va.len() * vb.len());
    let mut top = TopM::new(m);
    let mut block = Array2::<f64>::zeros((BLOCK_ROWS.min(va.len()), vb.len()));
    for start in (0..va.len()).step_by(BLOCK_ROWS) {
        let end = (start + BLOCK_ROWS).min(va.len());
        let mut out = block.slice_mut(s![..end - start, ..]);
        general_mat_mul(1.0, &ua.slice(s![start..end, ..]), &ub.t(), 0.0, &mut out);
        for &c in out.iter() {
            top.push(c.clamp(-1.0, 1.0));
        }
    }
    Ok(CSValue {
        pair: CodePair::new(a, b).expect("distinct codes"),
        window: store.window(),
        value: top.mean(),
        n_pairs_used: m,
        method: CsMethod::TopxTech,
    })
}

/// Cosine of the two codes' mean vectors.
pub fn cs_mean(store: &EmbeddingStore, a: TechCode, b: TechCode, method: CsMethod) -> Result<CSValue, SimilarityError> {
    if a == b {
        return Err(SimilarityError::SelfPair(a));
    }
    let source = match method {
        CsMethod::MeanTech => VectorSource::Tech,
        CsMethod::MeanCls => VectorSource::Cls,
        CsMethod::TopxTech => {
            return Err(SimilarityError::InvalidConfig("cs_mean takes a mean method".into()));
        }
    };
    let ma = code_mean_embedding(store, a, source)?;
    let mb = code_mean_embedding(store, b, source)?;
    Ok(CSValue {
        pair: CodePair::new(a, b).expect("distinct codes"),
        window: store.window(),
        value: cosine(&ma, &mb)?,
        n_pairs_used: 1,
        method,
    })
}

/// CS of `pair` with the configured method.
pub fn cs(store: &EmbeddingStore, pair: CodePair, cfg: &CSConfig) -> Result<CSValue, SimilarityError> {
    match cfg.method {
        CsMethod::TopxTech => cs_topx(store, pair.a, pair.b, cfg.x_percent),
        m => cs_mean(store, pair.a, pair.b, m),
    }
}

fn has_vectors(store: &EmbeddingStore, code: TechCode, method: CsMethod) -> bool {
    match method {
        CsMethod::MeanCls => !store.cls_vectors_for_code(code).is_empty(),
        _ => !store.tech_vectors(code).is_empty(),
    }
}

/// CS of many pairs in parallel; results keep input order. Pairs whose codes
/// lack embeddings yield `None`.
pub fn cs_many(
    store: &EmbeddingStore,
    pairs: &[CodePair],
    cfg: &CSConfig,
) -> Result<Vec<Option<CSValue>>, SimilarityError> {
    cfg.validate()?;
    pairs
        .par_iter()
        .map(|&p| {
            if has_vectors(store, p.a, cfg.method) && has_vectors(store, p.b, cfg.method) {
                cs(store, p, cfg).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect()
}

/// Mean and population standard deviation of a CS sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Baseline {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Baseline {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }

    /// `mean + k * std`.
    pub fn upper(&self, k: f64) -> f64 {
        self.mean + k * self.std
    }
}

/// Every unordered pair of codes with embeddings in `store`.
pub fn all_pairs(store: &EmbeddingStore) -> Vec<CodePair> {
    let codes: Vec<TechCode> = store.codes().collect();
    let mut out = Vec::new();
    for (i, &a) in codes.iter().enumerate() {
        for &b in &codes[i + 1..] {
            out.push(CodePair { a, b });
        }
    }
    out
}

/// Draws up to `n_samples` distinct pairs from `population` without
/// replacement; all of them when the population is smaller. The result is in
/// canonical order.
pub fn sample_pairs(population: &[CodePair], n_samples: usize, seed: u64) -> Vec<CodePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_samples.min(population.len());
    let mut idx = rand::seq::index::sample(&mut rng, population.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| population[i]).collect()
}

/// CS mean and standard deviation over random code pairs.
///
/// Pairs are drawn from `candidates` when given, otherwise from every pair
/// of codes with embeddings; pairs lacking embeddings are excluded first.
pub fn random_pair_baseline(
    store: &EmbeddingStore,
    candidates: Option<&[CodePair]>,
    cfg: &CSConfig,
    n_samples: usize,
    seed: u64,
) -> Result<Baseline, SimilarityError> {
    let population: Vec<CodePair> = candidates
        .map(|c| c.to_vec())
        .unwrap_or_else(|| all_pairs(store))
        .into_iter()
        .filter(|p| has_vectors(store, p.a, cfg.method) && has_vectors(store, p.b, cfg.method))
        .collect();
    if population.is_empty() {
        return Err(SimilarityError::InsufficientCodes(0));
    }
    let sample = sample_pairs(&population, n_samples, seed);
    let values: Vec<f64> = cs_many(store, &sample, cfg)?
        .into_iter()
        .flatten()
        .map(|v| v.value)
        .collect();
    Baseline::from_values(&values).ok_or(SimilarityError::InsufficientCodes(0))
}

/// One year of a CS time series.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub year: i32,
    /// Unsmoothed CS; `None` where a code lacks embeddings.
    pub raw: Option<CSValue>,
    pub smoothed: Option<f64>,
}

/// Centred moving average of width `width` over years, skipping gaps. A gap
/// stays a gap; edges average the years available.
pub fn smooth(years: &[i32], values: &[Option<f64>], width: usize) -> Vec<Option<f64>> {
    let left = (width.max(1) - 1) / 2;
    let right = width.max(1) - 1 - left;
    values
        .iter()
        .zip(years)
        .map(|(v, &y)| {
            v.map(|_| {
                let lo = y - left as i32;
                let hi = y + right as i32;
                let (sum, n) = years
                    .iter()
                    .zip(values)
                    .filter(|(&yy, _)| yy >= lo && yy <= hi)
                    .filter_map(|(_, v)| *v)
                    .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
                sum / n as f64
            })
        })
        .collect()
}

fn check_sorted(stores: &[EmbeddingStore]) -> Result<Vec<i32>, SimilarityError> {
    let years: Vec<i32> = stores.iter().map(|s| s.window().start_year).collect();
    if !years.windows(2).all(|w| w[0] < w[1]) {
        return Err(SimilarityError::InvalidConfig("stores must be sorted by year".into()));
    }
    Ok(years)
}

/// Per-year CS of `pair` followed by centred smoothing.
pub fn cs_timeseries(
    stores: &[EmbeddingStore],
    pair: CodePair,
    cfg: &CSConfig,
) -> Result<Vec<SeriesPoint>, SimilarityError> {
    cfg.validate()?;
    let years = check_sorted(stores)?;
    let raw: Vec<Option<CSValue>> = stores
        .iter()
        .map(|s| {
            if has_vectors(s, pair.a, cfg.method) && has_vectors(s, pair.b, cfg.method) {
                cs(s, pair, cfg).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_, _>>()?;
    let values: Vec<Option<f64>> = raw.iter().map(|r| r.map(|v| v.value)).collect();
    let smoothed = smooth(&years, &values, cfg.window_smoothing);
    Ok(years
        .into_iter()
        .zip(raw)
        .zip(smoothed)
        .map(|((year, raw), smoothed)| SeriesPoint { year, raw, smoothed })
        .collect())
}

/// Per-year baseline over the smoothed series of a fixed random sample of
/// pairs from `population`. Years where no sampled pair has a value are `None`.
pub fn baseline_series(
    stores: &[EmbeddingStore],
    population: &[CodePair],
    cfg: &CSConfig,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<(i32, Option<Baseline>)>, SimilarityError> {
    let years = check_sorted(stores)?;
    if population.is_empty() {
        return Err(SimilarityError::InsufficientCodes(0));
    }
    let sample = sample_pairs(population, n_samples, seed);
    let series: Vec<Vec<SeriesPoint>> = sample
        .par_iter()
        .map(|&p| cs_timeseries(stores, p, cfg))
        .collect::<Result<_, _>>()?;
    Ok(years
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let vals: Vec<f64> = series.iter().filter_map(|s| s[i].smoothed).collect();
            (y, Baseline::from_values(&vals))
        })
        .collect())
}

fn window_label(w: TimeWindow) -> String {
    if w.start_year == w.end_year {
        w.start_year.to_string()
    } else {
        w.to_string()
    }
}

/// Writes `code_a,code_b,year,cs,n_pairs_used,method` rows. Multi-year
/// windows are written as `Y1:Y2`.
pub fn write_cs_csv<W: Write>(mut out: W, rows: &[CSValue]) -> std::io::Result<()> {
    writeln!(out, "code_a,code_b,year,cs,n_pairs_used,method")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.9},{},{}",
            r.pair.a,
            r.pair.b,
            window_label(r.window),
            r.value,
            r.n_pairs_used,
            r.method
        )?;
    }
    Ok(())
}

/// Codes named in `pairs`.
pub fn codes_of(pairs: &[CodePair]) -> BTreeSet<TechCode> {
    pairs.iter().flat_map(|p| [p.a, p.b]).collect()
}
