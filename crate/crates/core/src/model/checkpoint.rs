//! Checkpoint file layout (little endian):
//!
//! ```text
//! magic "TTK1" | u32 version | u32 config_len | config (JSON, config_len bytes)
//! | u32 n_words | n_words x (u16 len | UTF-8 bytes)
//! | u32 n_codes | n_codes x (u8 len | ASCII bytes)
//! | u64 n_params | n_params x f32
//! ```
//!
//! Tensors follow [`ModelParams::tensors`] order, each flattened row-major:
//! `tok_emb (V x d)`, `pos_emb (L x d)`, then per layer `ln1_g, ln1_b, wq, bq,
//! wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1 (d x ff), b1, w2 (ff x d), b2`,
//! then `lnf_g, lnf_b, out_bias (V)`. Weight matrices map inputs (rows) to
//! outputs (columns).

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, TechCode, TimeWindow};

use super::inference::extract_tech_embeddings;
use super::params::ModelParams;
use super::store::{EmbeddingSource, EmbeddingStore};
use super::tokenizer::Tokenizer;
use super::{ClsText, ModelConfig, ModelError};

const MAGIC: &[u8; 4] = b"TTK1";
const VERSION: u32 = 1;

/// A trained model with its vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub tokenizer: Tokenizer,
}

fn ckpt_err(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(params: ModelParams<f32>, tokenizer: Tokenizer) -> Result<Self, ModelError> {
        if params.config.vocab_size != tokenizer.vocab_size() {
            return Err(ckpt_err(format!(
                "model vocabulary {} differs from tokenizer {}",
                params.config.vocab_size,
                tokenizer.vocab_size()
            )));
        }
        Ok(Checkpoint { params, tokenizer })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, self).expect("writing to memory");
        buf
    }

    /// SHA-256 of the serialised checkpoint.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }

    pub fn embed(&self, corpus: &Corpus, window: TimeWindow) -> Result<EmbeddingStore, ModelError> {
        self.embed_with(corpus, window, ClsText::default())
    }

    pub fn embed_with(&self, corpus: &Corpus, window: TimeWindow, cls_text: ClsText) -> Result<EmbeddingStore, ModelError> {
        extract_tech_embeddings(&self.params, &self.tokenizer, corpus, window, self.hash(), cls_text)
    }
}

impl EmbeddingSource for Checkpoint {
    fn embeddings(&self, corpus: &Corpus, window: TimeWindow) -> Result<EmbeddingStore, ModelError> {
        self.embed(corpus, window)
    }
}

pub fn write_checkpoint<W: Write>(mut out: W, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let config = serde_json::to_vec(&ckpt.params.config).map_err(|e| ckpt_err(e.to_string()))?;
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    out.write_u32::<LittleEndian>(config.len() as u32)?;
    out.write_all(&config)?;

    let words = ckpt.tokenizer.words();
    out.write_u32::<LittleEndian>(words.len() as u32)?;
    for w in words {
        let len = u16::try_from(w.len()).map_err(|_| ckpt_err(format!("word too long: {w}")))?;
        out.write_u16::<LittleEndian>(len)?;
        out.write_all(w.as_bytes())?;
    }
    let codes = ckpt.tokenizer.codes();
    out.write_u32::<LittleEndian>(codes.len() as u32)?;
    for c in codes {
        out.write_u8(c.as_str().len() as u8)?;
        out.write_all(c.as_str().as_bytes())?;
    }

    out.write_u64::<LittleEndian>(ckpt.params.num_params() as u64)?;
    for t in ckpt.params.tensors() {
        for &x in t {
            out.write_f32::<LittleEndian>(x)?;
        }
    }
    Ok(())
}

fn read_string<R: Read>(input: &mut R, len: usize) -> Result<String, ModelError> {
    let mut buf = vec![0u8; len];
    input.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| ckpt_err("string is not UTF-8"))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint, ModelError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ckpt_err("bad magic"));
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(ckpt_err(format!("unsupported version {version}")));
    }
    let config_len = input.read_u32::<LittleEndian>()? as usize;
    let mut config = vec![0u8; config_len];
    input.read_exact(&mut config)?;
    let config: ModelConfig = serde_json::from_slice(&config).map_err(|e| ckpt_err(e.to_string()))?;
    config.validate()?;

    let n_words = input.read_u32::<LittleEndian>()? as usize;
    let mut words = Vec::with_capacity(n_words);
    for _ in 0..n_words {
        let len = input.read_u16::<LittleEndian>()? as usize;
        words.push(read_string(&mut input, len)?);
    }
    let n_codes = input.read_u32::<LittleEndian>()? as usize;
    let mut codes = Vec::with_capacity(n_codes);
    for _ in 0..n_codes {
        let len = input.read_u8()? as usize;
        let s = read_string(&mut input, len)?;
        let code: TechCode = s.parse().map_err(|e: crate::corpus::CorpusError| ckpt_err(e.to_string()))?;
        codes.push(code);
    }
    if !words.windows(2).all(|w| w[0] < w[1]) || !codes.windows(2).all(|c| c[0] < c[1]) {
        return Err(ckpt_err("tokenizer tables are not strictly sorted"));
    }
    let tokenizer = Tokenizer::from_parts(words, codes);

    let mut params = ModelParams::<f32>::zeros(config);
    let n_params = input.read_u64::<LittleEndian>()? as usize;
    if n_params != params.num_params() {
        return Err(ckpt_err(format!(
            "{n_params} parameters stored, configuration needs {}",
            params.num_params()
        )));
    }
    for t in params.tensors_mut() {
        input.read_f32_into::<LittleEndian>(t)?;
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(ckpt_err("trailing bytes"));
    }
    Checkpoint::new(params, tokenizer)
}
