use std::collections::{BTreeMap, BTreeSet};

use crate::corpus::TechCode;
use crate::model::EmbeddingStore;
use crate::similarity::cosine;

use super::EvalError;

/// The `k` patents whose CLS vectors are closest to `query` by cosine, best
/// first; ties go to the smaller id. `exclude` skips one patent id.
pub fn nearest_patents<'a>(
    store: &'a EmbeddingStore,
    query: &[f32],
    k: usize,
    exclude: Option<&str>,
) -> Result<Vec<(&'a str, f64)>, EvalError> {
    if store.cls_records().is_empty() {
        return Err(EvalError::EmptyStore);
    }
    let mut scored: Vec<(&str, f64)> = store
        .cls_records()
        .iter()
        .filter(|(id, _)| Some(id.as_str()) != exclude)
        .map(|(id, v)| Ok((id.as_str(), cosine(query, v)?)))
        .collect::<Result<_, EvalError>>()?;
    let by_rank = |a: &(&str, f64), b: &(&str, f64)| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0));
    let k = k.min(scored.len());
    if k < scored.len() && k > 0 {
        scored.select_nth_unstable_by(k - 1, by_rank);
    }
    scored.truncate(k);
    scored.sort_by(by_rank);
    Ok(scored)
}

/// Codes carried by at least `ceil(threshold * k)` of the `k` nearest patents.
pub fn knn_classify(
    store: &EmbeddingStore,
    query: &[f32],
    k: usize,
    threshold: f64,
    exclude: Option<&str>,
) -> Result<BTreeSet<TechCode>, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidConfig("k must be at least 1".into()));
    }
    let neighbours = nearest_patents(store, query, k, exclude)?;
    let codes = store.patent_codes();
    let mut votes: BTreeMap<TechCode, usize> = BTreeMap::new();
    for (id, _) in &neighbours {
        for &c in codes.get(id).into_iter().flatten() {
            *votes.entry(c).or_default() += 1;
        }
    }
    let need = ((threshold * k as f64).ceil() as usize).max(1);
    Ok(votes.into_iter().filter(|&(_, n)| n >= need).map(|(c, _)| c).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TimeWindow;
    use crate::model::TechRecord;

    fn store() -> EmbeddingStore {
        let rec = |id: &str, code: &str| TechRecord {
            patent_id: id.into(),
            code: code.parse().unwrap(),
            vector: vec![1.0, 0.0],
        };
        EmbeddingStore::new(
            2,
            TimeWindow::year(2001),
            [0; 32],
            vec![rec("P1", "A01B1"), rec("P2", "A01B1"), rec("P2", "B01B1"), rec("P3", "C01B1")],
            vec![
                ("P1".into(), vec![1.0, 0.0]),
                ("P2".into(), vec![1.0, 0.2]),
                ("P3".into(), vec![0.0, 1.0]),
            ],
        )
        .unwrap()
    }

    fn set(codes: &[&str]) -> BTreeSet<TechCode> {
        codes.iter().map(|c| c.parse().unwrap()).collect()
    }

    #[test]
    fn single_neighbour() {
        let s = store();
        assert_eq!(knn_classify(&s, &[1.0, 0.0], 1, 0.5, None).unwrap(), set(&["A01B1"]));
        assert_eq!(nearest_patents(&s, &[0.0, 1.0], 1, None).unwrap()[0].0, "P3");
        assert_eq!(nearest_patents(&s, &[1.0, 0.0], 1, Some("P1")).unwrap()[0].0, "P2");
    }

    #[test]
    fn threshold_controls_votes() {
        let s = store();
        assert_eq!(knn_classify(&s, &[1.0, 0.1], 2, 1.0, None).unwrap(), set(&["A01B1"]));
        assert_eq!(knn_classify(&s, &[1.0, 0.1], 3, 0.0, None).unwrap(), set(&["A01B1", "B01B1", "C01B1"]));
    }

    #[test]
    fn ties_break_by_id() {
        let s = EmbeddingStore::new(
            2,
            TimeWindow::year(2001),
            [0; 32],
            vec![],
            vec![("Q2".into(), vec![1.0, 1.0]), ("Q1".into(), vec![2.0, 2.0])],
        )
        .unwrap();
        assert_eq!(nearest_patents(&s, &[1.0, 1.0], 1, None).unwrap()[0].0, "Q1");
        let empty = EmbeddingStore::empty(2, TimeWindow::year(2001));
        assert!(matches!(knn_classify(&empty, &[1.0, 0.0], 1, 0.5, None), Err(EvalError::EmptyStore)));
    }
}
