use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::TechCode;
use crate::similarity::cosine;

use super::EvalError;

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from average ranks in `O(n log n)`.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::CountMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; a tie group shares its mean rank
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        pos_rank_sum += mean_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub hamming_loss: f64,
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Multi-label metrics over `universe`. Macro F1 averages the codes that occur
/// in at least one gold set; Hamming loss is the fraction of wrong
/// patent-code cells.
pub fn classification_metrics(
    pred: &BTreeMap<String, BTreeSet<TechCode>>,
    gold: &BTreeMap<String, BTreeSet<TechCode>>,
    universe: &BTreeSet<TechCode>,
) -> Result<ClassificationMetrics, EvalError> {
    if !pred.keys().eq(gold.keys()) {
        return Err(EvalError::KeyMismatch);
    }
    let mut per_code: BTreeMap<TechCode, (usize, usize, usize)> = BTreeMap::new();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (id, g) in gold {
        let p = &pred[id];
        for &c in universe {
            let entry = per_code.entry(c).or_default();
            match (p.contains(&c), g.contains(&c)) {
                (true, true) => {
                    tp += 1;
                    entry.0 += 1;
                }
                (true, false) => {
                    fp += 1;
                    entry.1 += 1;
                }
                (false, true) => {
                    fn_ += 1;
                    entry.2 += 1;
                }
                (false, false) => {}
            }
        }
    }
    let gold_codes: BTreeSet<TechCode> = gold.values().flatten().filter(|c| universe.contains(c)).copied().collect();
    let macro_f1 = if gold_codes.is_empty() {
        0.0
    } else {
        gold_codes
            .iter()
            .map(|c| {
                let (t, p, n) = per_code[c];
                f1(t, p, n)
            })
            .sum::<f64>()
            / gold_codes.len() as f64
    };
    let cells = gold.len() * universe.len();
    Ok(ClassificationMetrics {
        macro_f1,
        micro_f1: f1(tp, fp, fn_),
        hamming_loss: if cells == 0 { 0.0 } else { (fp + fn_) as f64 / cells as f64 },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub map: f64,
    pub mrr_at_10: f64,
    /// Mean 1-based rank of the first relevant item; lower is better.
    pub rfr: f64,
}

/// Average precision of one ranking; `None` when nothing relevant is ranked.
pub fn average_precision(ranked: &[String], relevant: &BTreeSet<String>) -> Option<f64> {
    let mut hits = 0;
    let mut sum = 0.0;
    for (i, item) in ranked.iter().enumerate() {
        if relevant.contains(item) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// MAP, MRR@10 and mean first-relevant rank over queries given as
/// (ranked candidates, relevant set).
pub fn retrieval_metrics(queries: &[(Vec<String>, BTreeSet<String>)]) -> Result<RetrievalMetrics, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::InvalidConfig("no queries".into()));
    }
    let (mut map, mut mrr, mut rfr) = (0.0, 0.0, 0.0);
    for (q, (ranked, relevant)) in queries.iter().enumerate() {
        let ap = average_precision(ranked, relevant).ok_or(EvalError::NoRelevant(q))?;
        let first = ranked.iter().position(|x| relevant.contains(x)).expect("a relevant item is ranked") + 1;
        map += ap;
        if first <= 10 {
            mrr += 1.0 / first as f64;
        }
        rfr += first as f64;
    }
    let n = queries.len() as f64;
    Ok(RetrievalMetrics {
        map: map / n,
        mrr_at_10: mrr / n,
        rfr: rfr / n,
    })
}

/// Matches abstract `i` with title `i`. Returns the AUC of matched against
/// unmatched cosines over all `n^2` pairs, and the mean reciprocal rank of
/// the true title among all titles (ties ranked against the true title).
pub fn title_abstract_eval(titles: &[Vec<f32>], abstracts: &[Vec<f32>]) -> Result<(f64, f64), EvalError> {
    if titles.len() != abstracts.len() {
        return Err(EvalError::CountMismatch(titles.len(), abstracts.len()));
    }
    let n = titles.len();
    let mut scores = Vec::with_capacity(n * n);
    let mut labels = Vec::with_capacity(n * n);
    let mut mrr = 0.0;
    for (i, a) in abstracts.iter().enumerate() {
        let row: Vec<f64> = titles.iter().map(|t| cosine(a, t)).collect::<Result<_, _>>()?;
        let rank = 1 + row.iter().enumerate().filter(|&(j, &c)| j != i && c >= row[i]).count();
        mrr += 1.0 / rank as f64;
        for (j, c) in row.into_iter().enumerate() {
            scores.push(c);
            labels.push(i == j);
        }
    }
    Ok((auc_roc(&scores, &labels)?, mrr / n.max(1) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Concordant-pair counting over every positive-negative pair.
    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    num += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_roc(&[0.9, 0.8, 0.7, 0.1], &[true, false, true, false]).unwrap(), 0.75);
        assert_eq!(auc_roc(&[3.0, 2.0, 1.0], &[true, false, false]).unwrap(), 1.0);
        assert_eq!(auc_roc(&[1.0; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(matches!(auc_roc(&[1.0, 2.0], &[true, true]), Err(EvalError::SingleClass)));
        assert!(matches!(auc_roc(&[1.0], &[true, false]), Err(EvalError::CountMismatch(1, 2))));
    }

    fn set(codes: &[&str]) -> BTreeSet<TechCode> {
        codes.iter().map(|c| c.parse().unwrap()).collect()
    }

    #[test]
    fn classification_fixture() {
        let universe = set(&["A01B1", "B01B1"]);
        let gold = BTreeMap::from([("p1".to_string(), set(&["A01B1"])), ("p2".to_string(), set(&["B01B1"]))]);
        let pred = BTreeMap::from([("p1".to_string(), set(&["A01B1"])), ("p2".to_string(), set(&["A01B1"]))]);
        let m = classification_metrics(&pred, &gold, &universe).unwrap();
        assert_eq!(m.micro_f1, 0.5);
        assert_eq!(m.hamming_loss, 0.5);
        // A: tp 1 fp 1 -> 2/3; B: fn 1 -> 0
        assert!((m.macro_f1 - 1.0 / 3.0).abs() < 1e-12);

        let perfect = classification_metrics(&gold, &gold, &universe).unwrap();
        assert_eq!((perfect.macro_f1, perfect.micro_f1, perfect.hamming_loss), (1.0, 1.0, 0.0));

        let empty = BTreeMap::from([("p1".to_string(), set(&[])), ("p2".to_string(), set(&[]))]);
        let e = classification_metrics(&empty, &gold, &universe).unwrap();
        assert_eq!(e.micro_f1, 0.0);
        assert_eq!(e.hamming_loss, 0.5);

        let other = BTreeMap::from([("p1".to_string(), set(&[]))]);
        assert!(matches!(classification_metrics(&other, &gold, &universe), Err(EvalError::KeyMismatch)));
    }

    fn q(ranked: &[&str], relevant: &[&str]) -> (Vec<String>, BTreeSet<String>) {
        (
            ranked.iter().map(|s| s.to_string()).collect(),
            relevant.iter().map(|s| s.to_string()).collect(),
        )
    }

    #[test]
    fn retrieval_fixtures() {
        let top = retrieval_metrics(&[q(&["a", "b"], &["a"]), q(&["c", "d", "e"], &["c"])]).unwrap();
        assert_eq!((top.map, top.mrr_at_10, top.rfr), (1.0, 1.0, 1.0));

        let second = retrieval_metrics(&[q(&["x", "r", "y", "z", "w"], &["r"])]).unwrap();
        assert_eq!((second.mrr_at_10, second.rfr), (0.5, 2.0));

        let two = retrieval_metrics(&[q(&["r1", "x", "r2"], &["r1", "r2"])]).unwrap();
        assert!((two.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);

        let late: Vec<String> = (0..12).map(|i| format!("n{i}")).collect();
        let mut ranked = late.clone();
        ranked.push("hit".into());
        let far = retrieval_metrics(&[(ranked, BTreeSet::from(["hit".to_string()]))]).unwrap();
        assert_eq!(far.mrr_at_10, 0.0);
        assert_eq!(far.rfr, 13.0);

        assert!(matches!(retrieval_metrics(&[q(&["a"], &["b"])]), Err(EvalError::NoRelevant(0))));
    }

    #[test]
    fn title_abstract_fixtures() {
        let basis: Vec<Vec<f32>> = (0..4).map(|i| (0..4).map(|j| (i == j) as u8 as f32).collect()).collect();
        let (auc, mrr) = title_abstract_eval(&basis, &basis).unwrap();
        assert_eq!((auc, mrr), (1.0, 1.0));
        // titles are orthonormal, so abstract coordinates are the cosines:
        // matched {0.9, 0.8}, unmatched {0.1, 0.2}
        let t = vec![vec![1.0f32, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let a = |x: f32, y: f32| vec![x, y, (1.0 - x * x - y * y).sqrt()];
        let a = vec![a(0.9, 0.1), a(0.2, 0.8)];
        let (auc2, mrr2) = title_abstract_eval(&t, &a).unwrap();
        assert_eq!((auc2, mrr2), (1.0, 1.0));
        assert!(matches!(title_abstract_eval(&t, &a[..1]), Err(EvalError::CountMismatch(2, 1))));
    }

    proptest! {
        #[test]
        fn auc_matches_brute_force(data in prop::collection::vec((0u8..20, any::<bool>()), 2..300)) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 4.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            prop_assert_eq!(auc_roc(&scores, &labels).unwrap(), brute_auc(&scores, &labels));
        }

        #[test]
        fn negated_scores_complement(data in prop::collection::vec((any::<u32>(), any::<bool>()), 2..200)) {
            let scores: Vec<f64> = data.iter().enumerate().map(|(i, d)| d.0 as f64 + i as f64 * 1e-3).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|w| w[0] < w[1]));
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let total = auc_roc(&scores, &labels).unwrap() + auc_roc(&neg, &labels).unwrap();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
