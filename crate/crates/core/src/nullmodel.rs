//! Bipartite patent–technology null model.
//!
//! Under the Chung-Lu model a patent `p` links to code `c` with probability
//! `P_pc = w_p * w_c / N`, clamped at 1, where `w_p` and `w_c` are degrees and
//! `N` is the number of links. Co-occurrence of a code pair is then a sum of
//! independent Bernoulli(`P_pc * P_pc'`) over patents, which gives the
//! expectation, standard deviation, z-score and exact Poisson-binomial tail
//! used to decide which first combinations are genuine.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, TechCode, TimeWindow};

#[derive(Debug, Error, PartialEq)]
pub enum NullModelError {
    #[error("corpus window contains no patents")]
    EmptyCorpus,
    #[error("code {0} has no links in this window")]
    UnknownCode(TechCode),
    #[error("standard deviation is zero for {0}; z-score undefined")]
    DegenerateSigma(CodePair),
    #[error("asked for {requested} positives but only {available} candidates have a defined z-score")]
    InsufficientCandidates { requested: usize, available: usize },
}

/// Unordered pair of distinct codes, stored with `a < b`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CodePair {
    pub a: TechCode,
    pub b: TechCode,
}

impl CodePair {
    /// Canonical pair, or `None` when both codes are the same.
    pub fn new(x: TechCode, y: TechCode) -> Option<Self> {
        match x.cmp(&y) {
            std::cmp::Ordering::Less => Some(CodePair { a: x, b: y }),
            std::cmp::Ordering::Greater => Some(CodePair { a: y, b: x }),
            std::cmp::Ordering::Equal => None,
        }
    }
}

impl fmt::Display for CodePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.a, self.b)
    }
}

impl fmt::Debug for CodePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CodePair({}, {})", self.a, self.b)
    }
}

/// Degrees of both sides of the patent–code bipartite network.
#[derive(Clone, Debug, PartialEq)]
pub struct BipartiteDegrees {
    pub patent: BTreeMap<String, usize>,
    pub code: BTreeMap<TechCode, usize>,
    pub links: usize,
}

pub fn degrees(corpus: &Corpus) -> Result<BipartiteDegrees, NullModelError> {
    if corpus.is_empty() {
        return Err(NullModelError::EmptyCorpus);
    }
    let patent = corpus
        .records()
        .iter()
        .map(|r| (r.id.clone(), r.codes.len()))
        .collect();
    let code = corpus.codes().map(|c| (c, corpus.code_support(c))).collect();
    Ok(BipartiteDegrees {
        patent,
        code,
        links: corpus.link_count(),
    })
}

/// Number of patents in which each co-occurring pair appears together.
pub fn cooccurrence_counts(corpus: &Corpus) -> HashMap<CodePair, u32> {
    let mut counts = HashMap::new();
    for r in corpus.records() {
        for (i, &x) in r.codes.iter().enumerate() {
            for &y in &r.codes[i + 1..] {
                // codes are sorted and distinct, so (x, y) is canonical
                *counts.entry(CodePair { a: x, b: y }).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Pairs that never co-occurred in any patent published before `cutoff_year`
/// and whose codes each appear in at least `min_support` patents of
/// `support_window`. Sorted in canonical order.
pub fn candidate_pairs(
    corpus: &Corpus,
    cutoff_year: i32,
    support_window: TimeWindow,
    min_support: usize,
) -> Vec<CodePair> {
    let mut seen: BTreeSet<CodePair> = BTreeSet::new();
    for r in corpus.records().iter().filter(|r| r.pub_year() < cutoff_year) {
        for (i, &x) in r.codes.iter().enumerate() {
            for &y in &r.codes[i + 1..] {
                seen.insert(CodePair { a: x, b: y });
            }
        }
    }
    let window = corpus.window_slice(support_window);
    let eligible: Vec<TechCode> = window
        .codes()
        .filter(|&c| window.code_support(c) >= min_support.max(1))
        .collect();
    let mut out = Vec::new();
    for (i, &x) in eligible.iter().enumerate() {
        for &y in &eligible[i + 1..] {
            let pair = CodePair { a: x, b: y };
            if !seen.contains(&pair) {
                out.push(pair);
            }
        }
    }
    out
}

/// Observed and null-model statistics of one pair in one window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub pair: CodePair,
    pub observed: u32,
    pub expected: f64,
    pub sigma: f64,
    /// `None` when `sigma == 0`.
    pub z: Option<f64>,
    /// Some `w_p * w_c` exceeded `N` and the link probability was clamped to 1.
    pub clamped: bool,
}

impl PairStats {
    pub fn z_score(&self) -> Result<f64, NullModelError> {
        self.z.ok_or(NullModelError::DegenerateSigma(self.pair))
    }
}

/// Chung-Lu null model of one corpus window.
#[derive(Clone, Debug)]
pub struct NullModel {
    links: usize,
    code_degree: HashMap<TechCode, usize>,
    /// (patent degree, number of patents with that degree), ascending.
    patent_degree_hist: Vec<(usize, usize)>,
    cooccurrence: HashMap<CodePair, u32>,
}

impl NullModel {
    pub fn new(window: &Corpus) -> Result<Self, NullModelError> {
        if window.is_empty() {
            return Err(NullModelError::EmptyCorpus);
        }
        let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
        for r in window.records() {
            *hist.entry(r.codes.len()).or_default() += 1;
        }
        Ok(NullModel {
            links: window.link_count(),
            code_degree: window.codes().map(|c| (c, window.code_support(c))).collect(),
            patent_degree_hist: hist.into_iter().collect(),
            cooccurrence: cooccurrence_counts(window),
        })
    }

    pub fn links(&self) -> usize {
        self.links
    }

    pub fn code_degree(&self, code: TechCode) -> Result<usize, NullModelError> {
        self.code_degree
            .get(&code)
            .copied()
            .ok_or(NullModelError::UnknownCode(code))
    }

    pub fn observed(&self, pair: CodePair) -> u32 {
        self.cooccurrence.get(&pair).copied().unwrap_or(0)
    }

    /// Clamped link probability and whether clamping was needed.
    fn link_prob(&self, patent_degree: usize, code_degree: usize) -> (f64, bool) {
        let raw = (patent_degree as f64) * (code_degree as f64) / self.links as f64;
        (raw.min(1.0), raw > 1.0)
    }

    /// Per-degree-class joint probabilities `q = P_pc * P_pc'` with multiplicities.
    fn joint_probs(&self, pair: CodePair) -> Result<(Vec<(f64, usize)>, bool), NullModelError> {
        let wa = self.code_degree(pair.a)?;
        let wb = self.code_degree(pair.b)?;
        let mut clamped = false;
        let q = self
            .patent_degree_hist
            .iter()
            .map(|&(wp, n)| {
                let (pa, ca) = self.link_prob(wp, wa);
                let (pb, cb) = self.link_prob(wp, wb);
                clamped |= ca | cb;
                (pa * pb, n)
            })
            .collect();
        Ok((q, clamped))
    }

    pub fn stats(&self, pair: CodePair) -> Result<PairStats, NullModelError> {
        let (q, clamped) = self.joint_probs(pair)?;
        let expected: f64 = q.iter().map(|&(q, n)| n as f64 * q).sum();
        let variance: f64 = q.iter().map(|&(q, n)| n as f64 * q * (1.0 - q)).sum();
        let sigma = variance.max(0.0).sqrt();
        let observed = self.observed(pair);
        let z = (sigma > 0.0).then(|| (observed as f64 - expected) / sigma);
        Ok(PairStats {
            pair,
            observed,
            expected,
            sigma,
            z,
            clamped,
        })
    }

    /// `P[X >= observed]` for the Poisson-binomial co-occurrence count `X`.
    ///
    /// Dynamic programming over patents keeps the mass of `{X >= observed}`
    /// in an absorbing bucket, so the tail is accumulated directly rather than
    /// as `1 - cdf` and probabilities never exceed one.
    pub fn pvalue(&self, pair: CodePair, observed: u32) -> Result<f64, NullModelError> {
        let (q, _) = self.joint_probs(pair)?;
        if observed == 0 {
            return Ok(1.0);
        }
        let k = observed as usize;
        // dist[j] = P[X = j] for j < k, dist[k] = P[X >= k]
        let mut dist = vec![0.0f64; k + 1];
        dist[0] = 1.0;
        for &(q, n) in &q {
            for _ in 0..n {
                dist[k] += dist[k - 1] * q;
                for j in (1..k).rev() {
                    dist[j] = dist[j] * (1.0 - q) + dist[j - 1] * q;
                }
                dist[0] *= 1.0 - q;
            }
        }
        Ok(dist[k].clamp(0.0, 1.0))
    }

    /// Empirical mean and standard deviation of the co-occurrence count under
    /// independent link draws. Test oracle for [`NullModel::stats`].
    pub fn monte_carlo(
        &self,
        pair: CodePair,
        samples: usize,
        seed: u64,
    ) -> Result<(f64, f64), NullModelError> {
        let wa = self.code_degree(pair.a)?;
        let wb = self.code_degree(pair.b)?;
        let probs: Vec<(f64, f64)> = self
            .patent_degree_hist
            .iter()
            .flat_map(|&(wp, n)| {
                std::iter::repeat_n((self.link_prob(wp, wa).0, self.link_prob(wp, wb).0), n)
            })
            .collect();
        Ok(monte_carlo_counts(&probs, samples, seed))
    }
}

/// Mean and sample standard deviation of `sum_p [U_pa < pa][U_pb < pb]`.
fn monte_carlo_counts(probs: &[(f64, f64)], samples: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let mut count = 0u32;
        for &(pa, pb) in probs {
            let la = rng.random::<f64>() < pa;
            let lb = rng.random::<f64>() < pb;
            count += (la && lb) as u32;
        }
        let c = count as f64;
        sum += c;
        sum_sq += c * c;
    }
    let n = samples.max(1) as f64;
    let mean = sum / n;
    let var = if samples > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn chung_lu_stats(window: &Corpus, pair: CodePair) -> Result<PairStats, NullModelError> {
    NullModel::new(window)?.stats(pair)
}

pub fn monte_carlo_null(
    window: &Corpus,
    pair: CodePair,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64), NullModelError> {
    NullModel::new(window)?.monte_carlo(pair, samples, seed)
}

pub fn poisson_binomial_pvalue(
    window: &Corpus,
    pair: CodePair,
    observed: u32,
) -> Result<f64, NullModelError> {
    NullModel::new(window)?.pvalue(pair, observed)
}

/// Top-K candidates by z-score, labelled as realized innovations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnovationLabels {
    pub positives: BTreeSet<CodePair>,
    pub k: usize,
    /// z-score of the K-th ranked positive.
    pub z_threshold: f64,
    pub universe_size: usize,
    pub class_imbalance: f64,
}

impl InnovationLabels {
    pub fn label(&self, pair: &CodePair) -> bool {
        self.positives.contains(pair)
    }
}

/// Labels the `k` candidates with the highest z-score as positives.
///
/// Ties are broken by higher observed count, then canonical pair order.
/// Candidates without stats or with an undefined z-score are never positive.
pub fn label_innovations(
    candidates: &[CodePair],
    stats: &HashMap<CodePair, PairStats>,
    k: usize,
) -> Result<InnovationLabels, NullModelError> {
    let mut ranked: Vec<(f64, u32, CodePair)> = candidates
        .iter()
        .filter_map(|p| {
            let s = stats.get(p)?;
            Some((s.z?, s.observed, *p))
        })
        .collect();
    if k > ranked.len() {
        return Err(NullModelError::InsufficientCandidates {
            requested: k,
            available: ranked.len(),
        });
    }
    ranked.sort_by(|x, y| {
        y.0.total_cmp(&x.0)
            .then_with(|| y.1.cmp(&x.1))
            .then_with(|| x.2.cmp(&y.2))
    });
    let z_threshold = ranked[..k].last().map_or(f64::INFINITY, |r| r.0);
    let positives = ranked[..k].iter().map(|r| r.2).collect();
    Ok(InnovationLabels {
        positives,
        k,
        z_threshold,
        universe_size: candidates.len(),
        class_imbalance: k as f64 / candidates.len().max(1) as f64,
    })
}

/// Number of positives giving class imbalance `ci`; at least one.
pub fn k_for_imbalance(universe_size: usize, ci: f64) -> usize {
    ((ci * universe_size as f64).round() as usize).max(1)
}

/// Writes `code_a,code_b,O,E,sigma,z,pvalue` rows; an undefined z is left empty.
pub fn write_pair_stats<W: Write>(
    mut out: W,
    rows: &[(PairStats, f64)],
) -> std::io::Result<()> {
    writeln!(out, "code_a,code_b,O,E,sigma,z,pvalue")?;
    for (s, p) in rows {
        let z = s.z.map(|z| format!("{z:.6}")).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{:.6},{:.6},{},{:.6e}",
            s.pair.a, s.pair.b, s.observed, s.expected, s.sigma, z, p
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PatentRecord;
    use approx::assert_abs_diff_eq;
    use chrono::NaiveDate;

    fn code(s: &str) -> TechCode {
        s.parse().unwrap()
    }

    fn pair(x: &str, y: &str) -> CodePair {
        CodePair::new(code(x), code(y)).unwrap()
    }

    fn corpus(patents: &[(i32, &[&str])]) -> Corpus {
        let records = patents
            .iter()
            .enumerate()
            .map(|(i, (year, codes))| PatentRecord {
                id: format!("P{i}"),
                pub_date: NaiveDate::from_ymd_opt(*year, 1, 1).unwrap(),
                title: "t".into(),
                abstract_text: "a".into(),
                codes: codes.iter().map(|c| code(c)).collect(),
                citations: vec![],
            })
            .collect();
        Corpus::from_records(records).unwrap()
    }

    const A: &str = "A01B1";
    const B: &str = "B01B1";
    const C: &str = "C01B1";
    const D: &str = "D01B1";

    fn triangle() -> Corpus {
        corpus(&[(2000, &[A, B]), (2000, &[A, C]), (2000, &[B, C])])
    }

    #[test]
    fn degree_counts() {
        let d = degrees(&triangle()).unwrap();
        assert_eq!(d.links, 6);
        assert!(d.code.values().all(|&w| w == 2));
        assert!(d.patent.values().all(|&w| w == 2));

        let single = degrees(&corpus(&[(2000, &[A])])).unwrap();
        assert_eq!(single.links, 1);
        assert_eq!(single.code[&code(A)], 1);

        let doubled = corpus(&[
            (2000, &[A, B]),
            (2000, &[A, C]),
            (2000, &[B, C]),
            (2001, &[A, B]),
            (2001, &[A, C]),
            (2001, &[B, C]),
        ]);
        let d2 = degrees(&doubled).unwrap();
        assert_eq!(d2.links, 12);
        assert!(d2.code.values().all(|&w| w == 4));
        assert_eq!(degrees(&Corpus::default()), Err(NullModelError::EmptyCorpus));
    }

    #[test]
    fn cooccurrence() {
        let counts = cooccurrence_counts(&corpus(&[(2000, &[A, B]), (2000, &[A, B, C])]));
        assert_eq!(counts[&pair(A, B)], 2);
        assert_eq!(counts[&pair(B, A)], 2);
        assert_eq!(counts[&pair(A, C)], 1);
        assert_eq!(counts[&pair(B, C)], 1);
        assert!(cooccurrence_counts(&corpus(&[(2000, &[A]), (2000, &[B])])).is_empty());
    }

    #[test]
    fn candidates() {
        let c = corpus(&[(2000, &[A, B]), (2000, &[C]), (2001, &[A]), (2005, &[A, C])]);
        let w = TimeWindow::new(2000, 2004).unwrap();
        assert_eq!(candidate_pairs(&c, 2005, w, 1), vec![pair(A, C), pair(B, C)]);

        let all = corpus(&[(2000, &[A, B, C])]);
        assert!(candidate_pairs(&all, 2001, TimeWindow::year(2000), 1).is_empty());

        let sparse = corpus(&[(2000, &[A]), (2000, &[A]), (2000, &[B]), (2000, &[B]), (2000, &[D])]);
        let cands = candidate_pairs(&sparse, 2001, TimeWindow::year(2000), 2);
        assert_eq!(cands, vec![pair(A, B)]);
    }

    #[test]
    fn triangle_stats() {
        // P_pc = 2*2/6 for every link; q = 4/9 in each of 3 patents.
        let s = chung_lu_stats(&triangle(), pair(A, B)).unwrap();
        let q: f64 = 4.0 / 9.0;
        assert_eq!(s.observed, 1);
        assert_abs_diff_eq!(s.expected, 3.0 * q, epsilon = 1e-12);
        assert_abs_diff_eq!(s.sigma, (3.0 * q * (1.0 - q)).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(s.expected, 1.3333, epsilon = 1e-4);
        assert_abs_diff_eq!(s.sigma, 0.8607, epsilon = 1e-4);
        assert_abs_diff_eq!(s.z.unwrap(), -0.3873, epsilon = 1e-4);
        assert!(!s.clamped);
    }

    #[test]
    fn z_is_zero_when_observed_equals_expected() {
        // N=8 and every degree is 2, so P=1/2, q=1/4 and E(A,B)=1=O.
        let c = corpus(&[(2000, &[A, B]), (2000, &[C, D]), (2000, &[A, C]), (2000, &[B, D])]);
        let s = chung_lu_stats(&c, pair(A, B)).unwrap();
        assert_abs_diff_eq!(s.expected, 1.0, epsilon = 1e-12);
        assert_eq!(s.z, Some(0.0));
    }

    #[test]
    fn degenerate_sigma_and_unknown_code() {
        let c = corpus(&[(2000, &[A, B]), (2000, &[A, B])]);
        let s = chung_lu_stats(&c, pair(A, B)).unwrap();
        assert_eq!(s.sigma, 0.0);
        assert_eq!(s.z_score(), Err(NullModelError::DegenerateSigma(pair(A, B))));
        assert_eq!(
            chung_lu_stats(&c, pair(A, D)),
            Err(NullModelError::UnknownCode(code(D)))
        );
    }

    #[test]
    fn clamping_is_flagged() {
        // w_p = 3, w_A = 3, N = 5: P = 9/5 > 1.
        let c = corpus(&[(2000, &[A, B, C]), (2000, &[A]), (2000, &[A])]);
        let s = chung_lu_stats(&c, pair(A, B)).unwrap();
        assert!(s.clamped);
        assert!(s.expected.is_finite() && s.sigma >= 0.0);
    }

    #[test]
    fn pvalues() {
        let c = triangle();
        assert_eq!(poisson_binomial_pvalue(&c, pair(A, B), 0).unwrap(), 1.0);
        let q: f64 = 4.0 / 9.0;
        let expected = 3.0 * q * q * (1.0 - q) + q * q * q;
        let p = poisson_binomial_pvalue(&c, pair(A, B), 2).unwrap();
        assert_abs_diff_eq!(p, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(p, 0.4170, epsilon = 1e-4);
        assert!(poisson_binomial_pvalue(&c, pair(A, B), 4).unwrap() == 0.0);
    }

    #[test]
    fn single_bernoulli_pvalue() {
        let m = NullModel {
            links: 4,
            code_degree: [(code(A), 1), (code(B), 1)].into_iter().collect(),
            patent_degree_hist: vec![(2, 1)],
            cooccurrence: HashMap::new(),
        };
        // P = 2*1/4 = 0.5 for each code, q = 0.25
        assert_abs_diff_eq!(m.pvalue(pair(A, B), 1).unwrap(), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn monte_carlo_edge_cases() {
        assert_eq!(monte_carlo_counts(&[(0.0, 0.0); 5], 100, 1), (0.0, 0.0));
        assert_eq!(monte_carlo_counts(&[(1.0, 1.0); 7], 100, 1), (7.0, 0.0));
        let a = monte_carlo_counts(&[(0.3, 0.6); 7], 500, 9);
        assert_eq!(a, monte_carlo_counts(&[(0.3, 0.6); 7], 500, 9));
    }

    #[test]
    fn monte_carlo_matches_triangle() {
        let c = triangle();
        let s = chung_lu_stats(&c, pair(A, B)).unwrap();
        let n = 100_000;
        let (mean, _) = monte_carlo_null(&c, pair(A, B), n, 7).unwrap();
        let se = s.sigma / (n as f64).sqrt();
        assert!((mean - s.expected).abs() <= 3.0 * se, "{mean} vs {}", s.expected);
    }

    #[test]
    fn labelling() {
        let pairs = [pair(A, B), pair(A, C), pair(B, C)];
        let mk = |p: CodePair, z: f64, o: u32| PairStats {
            pair: p,
            observed: o,
            expected: 0.0,
            sigma: 1.0,
            z: Some(z),
            clamped: false,
        };
        let stats: HashMap<_, _> = [mk(pairs[0], 5.0, 1), mk(pairs[1], 3.0, 1), mk(pairs[2], 1.0, 1)]
            .into_iter()
            .map(|s| (s.pair, s))
            .collect();
        let l = label_innovations(&pairs, &stats, 1).unwrap();
        assert_eq!(l.positives.iter().copied().collect::<Vec<_>>(), vec![pairs[0]]);
        assert_eq!(l.z_threshold, 5.0);
        let all = label_innovations(&pairs, &stats, 3).unwrap();
        assert_eq!(all.positives.len(), 3);
        assert!(matches!(
            label_innovations(&pairs, &stats, 4),
            Err(NullModelError::InsufficientCandidates { requested: 4, available: 3 })
        ));

        // tie at the boundary: higher O wins, then canonical order
        let tied: HashMap<_, _> = [mk(pairs[0], 2.0, 1), mk(pairs[1], 2.0, 3), mk(pairs[2], 2.0, 1)]
            .into_iter()
            .map(|s| (s.pair, s))
            .collect();
        let l = label_innovations(&pairs, &tied, 1).unwrap();
        assert!(l.label(&pairs[1]));
        let l = label_innovations(&pairs, &tied, 2).unwrap();
        assert!(l.label(&pairs[1]) && l.label(&pairs[0]) && !l.label(&pairs[2]));
    }

    #[test]
    fn imbalance_to_k() {
        assert_eq!(k_for_imbalance(20_000_000, 0.00005), 1000);
        assert_eq!(k_for_imbalance(10, 0.2), 2);
        assert_eq!(k_for_imbalance(10, 1e-6), 1);
    }

    #[test]
    fn export_format() {
        let s = chung_lu_stats(&triangle(), pair(A, B)).unwrap();
        let mut buf = Vec::new();
        write_pair_stats(&mut buf, &[(s, 0.5)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("code_a,code_b,O,E,sigma,z,pvalue"));
        assert!(lines.next().unwrap().starts_with("A01B1,B01B1,1,1.333333,"));
    }
}
