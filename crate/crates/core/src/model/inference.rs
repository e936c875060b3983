use ndarray::{Array2, Axis};
use rayon::prelude::*;

use crate::corpus::{Corpus, PatentRecord, TechCode, TimeWindow};

use super::encoder::{check_batch, forward_batch, head_logits, Batch};
use super::params::ModelParams;
use super::sequence::{encode_patent, encode_query, EncodedSequence};
use super::store::{EmbeddingStore, TechRecord};
use super::tokenizer::Tokenizer;
use super::{ClsText, ModelError};

const EXTRACT_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodeScore {
    pub code: TechCode,
    pub prob: f64,
}

/// Hidden states (one row per position, padding included) and vocabulary
/// logits of a single sequence.
pub fn forward(
    params: &ModelParams<f32>,
    seq: &EncodedSequence,
) -> Result<(Array2<f32>, Array2<f32>), ModelError> {
    let batch = Batch::from_padded(seq);
    check_batch(params, &batch)?;
    let hidden = forward_batch(params, &batch).hidden;
    let logits = head_logits(params, hidden.view());
    Ok((hidden, logits))
}

fn hidden_of(params: &ModelParams<f32>, seqs: &[EncodedSequence]) -> Result<Vec<Array2<f32>>, ModelError> {
    let batch = Batch::from_sequences(seqs);
    check_batch(params, &batch)?;
    let hidden = forward_batch(params, &batch).hidden;
    Ok(batch
        .segments
        .iter()
        .map(|r| hidden.slice(ndarray::s![r.clone(), ..]).to_owned())
        .collect())
}

/// Last-layer vectors at every technology token and at `[CLS]` for the
/// patents of `window`. Records keep corpus order.
pub fn extract_tech_embeddings(
    params: &ModelParams<f32>,
    tok: &Tokenizer,
    corpus: &Corpus,
    window: TimeWindow,
    model_hash: [u8; 32],
    cls_text: ClsText,
) -> Result<EmbeddingStore, ModelError> {
    let max_len = params.config.max_seq_len;
    let patents: Vec<&PatentRecord> = corpus
        .records()
        .iter()
        .filter(|r| window.contains(r.pub_year()))
        .collect();
    let chunks: Vec<Result<(Vec<TechRecord>, Vec<(String, Vec<f32>)>, usize), ModelError>> = patents
        .par_chunks(EXTRACT_CHUNK)
        .map(|chunk| {
            let seqs = chunk
                .iter()
                .map(|p| encode_patent(tok, p, max_len))
                .collect::<Result<Vec<_>, _>>()?;
            let hidden = hidden_of(params, &seqs)?;
            let cls_hidden = match cls_text {
                ClsText::TitleAndAbstract => None,
                ClsText::AbstractOnly => {
                    let untitled = chunk
                        .iter()
                        .map(|p| {
                            let p = PatentRecord { title: String::new(), ..(*p).clone() };
                            encode_patent(tok, &p, max_len)
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    Some(hidden_of(params, &untitled)?)
                }
            };
            let mut tech = Vec::new();
            let mut cls = Vec::with_capacity(chunk.len());
            let mut skipped = 0;
            for (i, ((p, seq), h)) in chunk.iter().zip(&seqs).zip(&hidden).enumerate() {
                for (&pos, &code) in seq.tech_positions.iter().zip(&seq.tech_codes) {
                    tech.push(TechRecord {
                        patent_id: p.id.clone(),
                        code,
                        vector: h.row(pos).to_vec(),
                    });
                }
                let h_cls = cls_hidden.as_ref().map_or(h, |c| &c[i]);
                cls.push((p.id.clone(), h_cls.row(EncodedSequence::CLS_POSITION).to_vec()));
                skipped += seq.skipped_codes;
            }
            Ok((tech, cls, skipped))
        })
        .collect();
    let mut tech = Vec::new();
    let mut cls = Vec::new();
    let mut skipped = 0;
    for c in chunks {
        let (t, c, s) = c?;
        tech.extend(t);
        cls.extend(c);
        skipped += s;
    }
    if skipped > 0 {
        log::warn!("{skipped} code links had no vocabulary token and were skipped");
    }
    let mut store = EmbeddingStore::new(params.config.model_dim, window, model_hash, tech, cls)?;
    store.skipped_codes = skipped;
    Ok(store)
}

/// Distribution over technology codes at a `[MASK]` slot appended to the
/// text, renormalised over technology tokens and sorted by falling probability.
pub fn code_distribution(
    params: &ModelParams<f32>,
    tok: &Tokenizer,
    title: &str,
    abstract_text: &str,
) -> Result<Vec<CodeScore>, ModelError> {
    let range = tok.tech_range();
    if range.is_empty() {
        return Err(ModelError::InvalidConfig("tokenizer has no technology tokens".into()));
    }
    let seq = encode_query(tok, title, abstract_text, true, params.config.max_seq_len)?;
    let slot = seq.tech_positions[0];
    let hidden = &hidden_of(params, std::slice::from_ref(&seq))?[0];
    let logits = head_logits(params, hidden.select(Axis(0), &[slot]).view());
    let tech: Vec<f64> = logits
        .row(0)
        .iter()
        .skip(range.start as usize)
        .take(range.len())
        .map(|&x| x as f64)
        .collect();
    let max = tech.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = tech.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    let mut scores: Vec<CodeScore> = exp
        .iter()
        .zip(tok.codes())
        .map(|(e, &code)| CodeScore { code, prob: e / sum })
        .collect();
    scores.sort_by(|a, b| b.prob.total_cmp(&a.prob).then(a.code.cmp(&b.code)));
    Ok(scores)
}

/// Codes whose probability reaches `threshold`; the single most likely code
/// when none does.
pub fn predict_codes(
    params: &ModelParams<f32>,
    tok: &Tokenizer,
    title: &str,
    abstract_text: &str,
    threshold: f64,
) -> Result<Vec<CodeScore>, ModelError> {
    let mut scores = code_distribution(params, tok, title, abstract_text)?;
    let keep = scores.iter().take_while(|s| s.prob >= threshold).count().max(1);
    scores.truncate(keep);
    Ok(scores)
}

/// `[CLS]` vector of a patent encoded with its technology tokens.
pub fn patent_cls_vector(
    params: &ModelParams<f32>,
    tok: &Tokenizer,
    patent: &PatentRecord,
) -> Result<Vec<f32>, ModelError> {
    let seq = encode_patent(tok, patent, params.config.max_seq_len)?;
    Ok(hidden_of(params, &[seq])?[0].row(EncodedSequence::CLS_POSITION).to_vec())
}

/// `[CLS]` vector of text alone, without technology tokens.
pub fn text_cls_vector(
    params: &ModelParams<f32>,
    tok: &Tokenizer,
    title: &str,
    abstract_text: &str,
) -> Result<Vec<f32>, ModelError> {
    let seq = encode_query(tok, title, abstract_text, false, params.config.max_seq_len)?;
    Ok(hidden_of(params, &[seq])?[0].row(EncodedSequence::CLS_POSITION).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use chrono::NaiveDate;

    fn setup() -> (ModelParams<f32>, Tokenizer, Corpus) {
        let recs = vec![
            PatentRecord {
                id: "P1".into(),
                pub_date: NaiveDate::from_ymd_opt(2001, 3, 1).unwrap(),
                title: "gear train".into(),
                abstract_text: "a gear with teeth".into(),
                codes: vec!["F16H1".parse().unwrap(), "B60K6".parse().unwrap()],
                citations: vec![],
            },
            PatentRecord {
                id: "P2".into(),
                pub_date: NaiveDate::from_ymd_opt(2002, 3, 1).unwrap(),
                title: "battery".into(),
                abstract_text: "cell with anode".into(),
                codes: vec!["H01M10".parse().unwrap()],
                citations: vec![],
            },
        ];
        let corpus = Corpus::from_records(recs).unwrap();
        let tok = super::super::build_tokenizer(&corpus, 1).unwrap();
        let params = ModelParams::init(ModelConfig {
            layers: 1,
            heads: 2,
            model_dim: 8,
            ff_dim: 16,
            max_seq_len: 16,
            vocab_size: tok.vocab_size(),
            seed: 1,
        })
        .unwrap();
        (params, tok, corpus)
    }

    #[test]
    fn extraction_matches_single_forward() {
        let (params, tok, corpus) = setup();
        let store = extract_tech_embeddings(&params, &tok, &corpus, TimeWindow::new(2000, 2005).unwrap(), [0; 32], ClsText::TitleAndAbstract).unwrap();
        assert_eq!(store.tech_records().len(), 3);
        assert_eq!(store.cls_records().len(), 2);
        let seq = encode_patent(&tok, &corpus.records()[0], 16).unwrap();
        let (hidden, logits) = forward(&params, &seq).unwrap();
        assert_eq!(logits.dim(), (16, tok.vocab_size()));
        let rec = &store.tech_records()[0];
        assert_eq!(rec.code, seq.tech_codes[0]);
        for (a, b) in rec.vector.iter().zip(hidden.row(seq.tech_positions[0])) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn window_filters_patents() {
        let (params, tok, corpus) = setup();
        let store = extract_tech_embeddings(&params, &tok, &corpus, TimeWindow::year(2002), [0; 32], ClsText::TitleAndAbstract).unwrap();
        assert_eq!(store.cls_records().len(), 1);
        assert_eq!(store.codes().count(), 1);
    }

    #[test]
    fn abstract_only_changes_cls_vectors_only() {
        let (params, tok, corpus) = setup();
        let w = TimeWindow::new(2000, 2005).unwrap();
        let full = extract_tech_embeddings(&params, &tok, &corpus, w, [0; 32], ClsText::TitleAndAbstract).unwrap();
        let bare = extract_tech_embeddings(&params, &tok, &corpus, w, [0; 32], ClsText::AbstractOnly).unwrap();
        assert_eq!(full.tech_records(), bare.tech_records());
        assert_ne!(full.cls_records(), bare.cls_records());
        let untitled = PatentRecord { title: String::new(), ..corpus.records()[1].clone() };
        let (hidden, _) = forward(&params, &encode_patent(&tok, &untitled, 16).unwrap()).unwrap();
        for (a, b) in bare.cls_records()[1].1.iter().zip(hidden.row(EncodedSequence::CLS_POSITION)) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn distribution_sums_to_one() {
        let (params, tok, _) = setup();
        let d = code_distribution(&params, &tok, "gear", "teeth").unwrap();
        assert_eq!(d.len(), 3);
        let total: f64 = d.iter().map(|s| s.prob).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(d.windows(2).all(|w| w[0].prob >= w[1].prob));
        let top = predict_codes(&params, &tok, "gear", "teeth", 2.0).unwrap();
        assert_eq!(top, vec![d[0]]);
        assert_eq!(predict_codes(&params, &tok, "gear", "teeth", 0.0).unwrap().len(), 3);
    }

    #[test]
    fn cls_vectors_differ_with_codes() {
        let (params, tok, corpus) = setup();
        let p = &corpus.records()[0];
        let with = patent_cls_vector(&params, &tok, p).unwrap();
        let without = text_cls_vector(&params, &tok, &p.title, &p.abstract_text).unwrap();
        assert_eq!(with.len(), 8);
        assert_ne!(with, without);
    }
}
