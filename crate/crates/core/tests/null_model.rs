//! Null-model p-values against exhaustive enumeration of link outcomes.

use forge_core::{CodePair, Corpus, NullModel, PatentRecord, TechCode};
use proptest::prelude::*;

const POOL: [&str; 5] = ["A01B1", "B02C3", "C07D4", "G06F3", "H01M4"];

fn corpus(code_sets: &[Vec<usize>]) -> Corpus {
    let records = code_sets
        .iter()
        .enumerate()
        .map(|(i, set)| {
            let mut codes: Vec<TechCode> = set.iter().map(|&j| POOL[j].parse().unwrap()).collect();
            codes.sort();
            codes.dedup();
            PatentRecord {
                id: format!("P{i}"),
                pub_date: chrono::NaiveDate::from_ymd_opt(2001, 1, 1).unwrap(),
                title: String::new(),
                abstract_text: String::new(),
                codes,
                citations: vec![],
            }
        })
        .collect();
    Corpus::from_records(records).unwrap()
}

/// Exact upper tail of the co-occurrence count by summing all 2^n outcomes.
fn enumerated_tail(c: &Corpus, pair: CodePair, k: usize) -> f64 {
    let links = c.link_count() as f64;
    let (wa, wb) = (c.code_support(pair.a) as f64, c.code_support(pair.b) as f64);
    let q: Vec<f64> = c
        .records()
        .iter()
        .map(|r| {
            let wp = r.codes.len() as f64;
            (wp * wa / links).min(1.0) * (wp * wb / links).min(1.0)
        })
        .collect();
    let mut tail = 0.0;
    for mask in 0u32..(1 << q.len()) {
        if (mask.count_ones() as usize) < k {
            continue;
        }
        tail += q
            .iter()
            .enumerate()
            .map(|(i, qi)| if mask >> i & 1 == 1 { *qi } else { 1.0 - qi })
            .product::<f64>();
    }
    tail
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pvalue_matches_enumeration(
        sets in prop::collection::vec(prop::collection::vec(0..POOL.len(), 1..=3), 2..=12),
    ) {
        let c = corpus(&sets);
        let codes: Vec<TechCode> = c.codes().collect();
        prop_assume!(codes.len() >= 2);
        let nm = NullModel::new(&c).unwrap();
        let pair = CodePair::new(codes[0], codes[codes.len() - 1]).unwrap();
        for k in 0..=c.len() + 1 {
            let got = nm.pvalue(pair, k as u32).unwrap();
            let want = enumerated_tail(&c, pair, k);
            prop_assert!((got - want).abs() <= 1e-12, "k={} got {} want {}", k, got, want);
        }
        let s = nm.stats(pair).unwrap();
        prop_assert!(s.sigma >= 0.0 && s.expected >= 0.0);
    }
}
