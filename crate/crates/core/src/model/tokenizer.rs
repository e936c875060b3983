use std::collections::{BTreeMap, HashMap};

use crate::corpus::{Corpus, TechCode};

use super::ModelError;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_SPECIAL: u32 = 5;

const SPECIAL_NAMES: [&str; NUM_SPECIAL as usize] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Lower-cases and splits text into alphanumeric runs and single punctuation marks.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Word-level vocabulary extended with one token per technology code.
///
/// Ids are laid out as special tokens, then words in lexicographic order, then
/// codes in lexicographic order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    words: Vec<String>,
    codes: Vec<TechCode>,
    word_ids: HashMap<String, u32>,
    code_ids: HashMap<TechCode, u32>,
}

impl Tokenizer {
    pub fn from_parts(words: Vec<String>, codes: Vec<TechCode>) -> Self {
        let word_ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), NUM_SPECIAL + i as u32))
            .collect();
        let base = NUM_SPECIAL + words.len() as u32;
        let code_ids = codes
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, base + i as u32))
            .collect();
        Tokenizer {
            words,
            codes,
            word_ids,
            code_ids,
        }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn codes(&self) -> &[TechCode] {
        &self.codes
    }

    pub fn vocab_size(&self) -> usize {
        NUM_SPECIAL as usize + self.words.len() + self.codes.len()
    }

    /// Id range of the technology tokens.
    pub fn tech_range(&self) -> std::ops::Range<u32> {
        let start = NUM_SPECIAL + self.words.len() as u32;
        start..start + self.codes.len() as u32
    }

    pub fn word_id(&self, word: &str) -> u32 {
        self.word_ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn code_id(&self, code: TechCode) -> Option<u32> {
        self.code_ids.get(&code).copied()
    }

    pub fn code_of(&self, id: u32) -> Option<TechCode> {
        let r = self.tech_range();
        r.contains(&id).then(|| self.codes[(id - r.start) as usize])
    }

    pub fn is_tech(&self, id: u32) -> bool {
        self.tech_range().contains(&id)
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        split_words(text).iter().map(|w| self.word_id(w)).collect()
    }

    /// Token strings for `ids`; technology tokens render as `[A61K31]`.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&id| {
                if id < NUM_SPECIAL {
                    SPECIAL_NAMES[id as usize].to_string()
                } else if let Some(code) = self.code_of(id) {
                    format!("[{code}]")
                } else {
                    self.words
                        .get((id - NUM_SPECIAL) as usize)
                        .cloned()
                        .unwrap_or_else(|| SPECIAL_NAMES[UNK as usize].to_string())
                }
            })
            .collect()
    }
}

/// Builds a vocabulary from titles and abstracts; words seen fewer than
/// `min_freq` times map to `[UNK]`. Every code in the corpus gets a token.
pub fn build_tokenizer(corpus: &Corpus, min_freq: usize) -> Result<Tokenizer, ModelError> {
    if corpus.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in corpus.records() {
        for w in split_words(&r.title)
            .into_iter()
            .chain(split_words(&r.abstract_text))
        {
            *counts.entry(w).or_default() += 1;
        }
    }
    let words = counts
        .into_iter()
        .filter(|&(_, n)| n >= min_freq)
        .map(|(w, _)| w)
        .collect();
    Ok(Tokenizer::from_parts(words, corpus.codes().collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PatentRecord;
    use chrono::NaiveDate;

    fn record(id: &str, abstract_text: &str, codes: &[&str]) -> PatentRecord {
        PatentRecord {
            id: id.into(),
            pub_date: NaiveDate::from_ymd_opt(2001, 1, 1).unwrap(),
            title: "battery".into(),
            abstract_text: abstract_text.into(),
            codes: codes.iter().map(|c| c.parse().unwrap()).collect(),
            citations: vec![],
        }
    }

    #[test]
    fn splitting() {
        assert_eq!(split_words("A Li-ion cell, (new)."), vec!["a", "li", "-", "ion", "cell", ",", "(", "new", ")", "."]);
    }

    #[test]
    fn min_freq_and_codes() {
        let corpus = Corpus::from_records(vec![
            record("P1", "battery battery rare", &["A61K31"]),
            record("P2", "battery", &["H01L21"]),
        ])
        .unwrap();
        let tok = build_tokenizer(&corpus, 2).unwrap();
        assert_ne!(tok.word_id("battery"), UNK);
        assert_eq!(tok.word_id("rare"), UNK);
        let a = tok.code_id("A61K31".parse().unwrap()).unwrap();
        let h = tok.code_id("H01L21".parse().unwrap()).unwrap();
        assert!(tok.is_tech(a) && tok.is_tech(h));
        assert_eq!(tok.vocab_size(), 5 + 1 + 2);
        assert!(build_tokenizer(&Corpus::default(), 1).is_err());
    }

    #[test]
    fn decode_round_trip() {
        let tok = Tokenizer::from_parts(vec!["a".into(), "cell".into(), "new".into()], vec![]);
        let ids = tok.encode_text("A new cell");
        assert_eq!(tok.decode(&ids), vec!["a", "new", "cell"]);
        assert_eq!(tok.decode(&[CLS, UNK]), vec!["[CLS]", "[UNK]"]);
    }
}
