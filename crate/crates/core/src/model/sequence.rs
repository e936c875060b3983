use crate::corpus::{PatentRecord, TechCode};

use super::tokenizer::{Tokenizer, CLS, MASK, PAD, SEP};
use super::ModelError;

/// `[CLS] title [SEP] abstract [SEP] [code_1] ... [code_n]` padded to the
/// model's maximum length.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence {
    pub ids: Vec<u32>,
    /// `false` on padding.
    pub attention_mask: Vec<bool>,
    /// Position of each technology token, aligned with `tech_codes`.
    pub tech_positions: Vec<usize>,
    pub tech_codes: Vec<TechCode>,
    /// Codes of the patent with no token in the vocabulary.
    pub skipped_codes: usize,
}

impl EncodedSequence {
    pub const CLS_POSITION: usize = 0;

    /// Length of the non-padding prefix.
    pub fn active_len(&self) -> usize {
        self.attention_mask.iter().take_while(|&&m| m).count()
    }

    /// The sequence without its padding tail.
    pub fn trimmed(&self) -> EncodedSequence {
        let n = self.active_len();
        EncodedSequence {
            ids: self.ids[..n].to_vec(),
            attention_mask: self.attention_mask[..n].to_vec(),
            ..self.clone()
        }
    }
}

fn assemble(
    title: Vec<u32>,
    mut body: Vec<u32>,
    tail: Vec<u32>,
    max_len: usize,
) -> Result<(Vec<u32>, usize), ModelError> {
    if tail.len() + 3 > max_len {
        return Err(ModelError::TooManyCodes {
            codes: tail.len(),
            max_len,
        });
    }
    let budget = max_len - 3 - tail.len();
    let mut title = title;
    if title.len() + body.len() > budget {
        // abstract goes first, then the title tail
        body.truncate(budget.saturating_sub(title.len()));
        title.truncate(budget - body.len());
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(title);
    ids.push(SEP);
    ids.extend(body);
    ids.push(SEP);
    let tail_start = ids.len();
    ids.extend(tail);
    Ok((ids, tail_start))
}

fn pad(mut ids: Vec<u32>, max_len: usize) -> (Vec<u32>, Vec<bool>) {
    let n = ids.len();
    ids.resize(max_len, PAD);
    let mask = (0..max_len).map(|i| i < n).collect();
    (ids, mask)
}

/// Encodes a patent for training or embedding extraction. Codes without a
/// vocabulary entry are skipped and counted.
pub fn encode_patent(
    tok: &Tokenizer,
    patent: &PatentRecord,
    max_len: usize,
) -> Result<EncodedSequence, ModelError> {
    let mut tech_codes = Vec::with_capacity(patent.codes.len());
    let mut tail = Vec::with_capacity(patent.codes.len());
    // record codes are already in lexicographic order
    for &code in &patent.codes {
        if let Some(id) = tok.code_id(code) {
            tech_codes.push(code);
            tail.push(id);
        }
    }
    let skipped_codes = patent.codes.len() - tech_codes.len();
    let (ids, tail_start) = assemble(
        tok.encode_text(&patent.title),
        tok.encode_text(&patent.abstract_text),
        tail,
        max_len,
    )?;
    let tech_positions = (tail_start..ids.len()).collect();
    let (ids, attention_mask) = pad(ids, max_len);
    Ok(EncodedSequence {
        ids,
        attention_mask,
        tech_positions,
        tech_codes,
        skipped_codes,
    })
}

/// `[CLS] title [SEP] abstract [SEP]`, followed by one `[MASK]` slot when
/// `mask_slot` is set. The mask position is reported in `tech_positions`.
pub fn encode_query(
    tok: &Tokenizer,
    title: &str,
    abstract_text: &str,
    mask_slot: bool,
    max_len: usize,
) -> Result<EncodedSequence, ModelError> {
    let tail = if mask_slot { vec![MASK] } else { vec![] };
    let (ids, tail_start) = assemble(
        tok.encode_text(title),
        tok.encode_text(abstract_text),
        tail,
        max_len,
    )?;
    let tech_positions = (tail_start..ids.len()).collect();
    let (ids, attention_mask) = pad(ids, max_len);
    Ok(EncodedSequence {
        ids,
        attention_mask,
        tech_positions,
        tech_codes: vec![],
        skipped_codes: 0,
    })
}
