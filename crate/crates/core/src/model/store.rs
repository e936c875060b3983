//! Per-patent code embeddings and their binary file format.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "TTE1" | u32 version | u32 dim | u64 n_tech | u64 n_cls
//! | i32 start_year | i32 end_year | [u8; 32] model_hash | u32 id_width
//! n_tech x ( id[id_width] | code[8] | f32 x dim )
//! n_cls  x ( id[id_width] | f32 x dim )
//! ```
//!
//! Ids and codes are zero-padded ASCII/UTF-8.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::corpus::{Corpus, TechCode, TimeWindow};

use super::ModelError;

const MAGIC: &[u8; 4] = b"TTE1";
const VERSION: u32 = 1;
const CODE_WIDTH: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct TechRecord {
    pub patent_id: String,
    pub code: TechCode,
    pub vector: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    window: TimeWindow,
    model_hash: [u8; 32],
    tech: Vec<TechRecord>,
    cls: Vec<(String, Vec<f32>)>,
    by_code: BTreeMap<TechCode, Vec<usize>>,
    cls_by_patent: HashMap<String, usize>,
    /// Codes that had no token in the model vocabulary during extraction.
    pub skipped_codes: usize,
}

fn store_err(msg: impl Into<String>) -> ModelError {
    ModelError::Store(msg.into())
}

impl EmbeddingStore {
    pub fn new(
        dim: usize,
        window: TimeWindow,
        model_hash: [u8; 32],
        tech: Vec<TechRecord>,
        cls: Vec<(String, Vec<f32>)>,
    ) -> Result<Self, ModelError> {
        let mut seen = HashSet::new();
        let mut by_code: BTreeMap<TechCode, Vec<usize>> = BTreeMap::new();
        for (i, r) in tech.iter().enumerate() {
            if !seen.insert((r.patent_id.as_str(), r.code)) {
                return Err(store_err(format!("duplicate record ({}, {})", r.patent_id, r.code)));
            }
            check_vector(&r.vector, dim)?;
            by_code.entry(r.code).or_default().push(i);
        }
        let mut cls_by_patent = HashMap::with_capacity(cls.len());
        for (i, (id, v)) in cls.iter().enumerate() {
            check_vector(v, dim)?;
            if cls_by_patent.insert(id.clone(), i).is_some() {
                return Err(store_err(format!("duplicate CLS record {id}")));
            }
        }
        Ok(EmbeddingStore {
            dim,
            window,
            model_hash,
            tech,
            cls,
            by_code,
            cls_by_patent,
            skipped_codes: 0,
        })
    }

    pub fn empty(dim: usize, window: TimeWindow) -> Self {
        EmbeddingStore::new(dim, window, [0; 32], vec![], vec![]).expect("empty store is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn window(&self) -> TimeWindow {
        self.window
    }

    pub fn model_hash(&self) -> &[u8; 32] {
        &self.model_hash
    }

    pub fn tech_records(&self) -> &[TechRecord] {
        &self.tech
    }

    pub fn cls_records(&self) -> &[(String, Vec<f32>)] {
        &self.cls
    }

    /// Codes with at least one technology-token vector, sorted.
    pub fn codes(&self) -> impl Iterator<Item = TechCode> + '_ {
        self.by_code.keys().copied()
    }

    pub fn tech_vectors(&self, code: TechCode) -> Vec<&[f32]> {
        self.by_code
            .get(&code)
            .into_iter()
            .flatten()
            .map(|&i| self.tech[i].vector.as_slice())
            .collect()
    }

    /// Tech records of `code`, in store order.
    pub fn records_of(&self, code: TechCode) -> impl Iterator<Item = &TechRecord> {
        self.by_code
            .get(&code)
            .into_iter()
            .flatten()
            .map(|&i| &self.tech[i])
    }

    pub fn cls_vector(&self, patent_id: &str) -> Option<&[f32]> {
        self.cls_by_patent.get(patent_id).map(|&i| self.cls[i].1.as_slice())
    }

    /// CLS vectors of the patents carrying `code`.
    pub fn cls_vectors_for_code(&self, code: TechCode) -> Vec<&[f32]> {
        self.records_of(code)
            .filter_map(|r| self.cls_vector(&r.patent_id))
            .collect()
    }

    /// Codes of each patent, reconstructed from the technology records.
    pub fn patent_codes(&self) -> BTreeMap<&str, Vec<TechCode>> {
        let mut out: BTreeMap<&str, Vec<TechCode>> = BTreeMap::new();
        for r in &self.tech {
            out.entry(r.patent_id.as_str()).or_default().push(r.code);
        }
        for codes in out.values_mut() {
            codes.sort_unstable();
        }
        out
    }

    /// Restricts the store to the patents of `window` in `corpus`.
    pub fn restrict(&self, corpus: &Corpus, window: TimeWindow) -> EmbeddingStore {
        let slice = corpus.window_slice(window);
        let ids: HashSet<&str> = slice.records().iter().map(|r| r.id.as_str()).collect();
        let tech = self
            .tech
            .iter()
            .filter(|t| ids.contains(t.patent_id.as_str()))
            .cloned()
            .collect();
        let cls = self
            .cls
            .iter()
            .filter(|(id, _)| ids.contains(id.as_str()))
            .cloned()
            .collect();
        EmbeddingStore::new(self.dim, window, self.model_hash, tech, cls).expect("subset of a valid store")
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<(), ModelError> {
        let id_width = self
            .tech
            .iter()
            .map(|r| r.patent_id.len())
            .chain(self.cls.iter().map(|(id, _)| id.len()))
            .max()
            .unwrap_or(0);
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(VERSION)?;
        out.write_u32::<LittleEndian>(self.dim as u32)?;
        out.write_u64::<LittleEndian>(self.tech.len() as u64)?;
        out.write_u64::<LittleEndian>(self.cls.len() as u64)?;
        out.write_i32::<LittleEndian>(self.window.start_year)?;
        out.write_i32::<LittleEndian>(self.window.end_year)?;
        out.write_all(&self.model_hash)?;
        out.write_u32::<LittleEndian>(id_width as u32)?;
        for r in &self.tech {
            write_padded(&mut out, r.patent_id.as_bytes(), id_width)?;
            write_padded(&mut out, r.code.as_str().as_bytes(), CODE_WIDTH)?;
            write_f32s(&mut out, &r.vector)?;
        }
        for (id, v) in &self.cls {
            write_padded(&mut out, id.as_bytes(), id_width)?;
            write_f32s(&mut out, v)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self, ModelError> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(store_err("bad magic"));
        }
        let version = input.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(store_err(format!("unsupported version {version}")));
        }
        let dim = input.read_u32::<LittleEndian>()? as usize;
        let n_tech = input.read_u64::<LittleEndian>()? as usize;
        let n_cls = input.read_u64::<LittleEndian>()? as usize;
        let start = input.read_i32::<LittleEndian>()?;
        let end = input.read_i32::<LittleEndian>()?;
        let window = TimeWindow::new(start, end).map_err(|e| store_err(e.to_string()))?;
        let mut model_hash = [0u8; 32];
        input.read_exact(&mut model_hash)?;
        let id_width = input.read_u32::<LittleEndian>()? as usize;
        let mut tech = Vec::with_capacity(n_tech);
        for _ in 0..n_tech {
            let patent_id = read_padded(&mut input, id_width)?;
            let code_str = read_padded(&mut input, CODE_WIDTH)?;
            let code = code_str.parse().map_err(|e: crate::corpus::CorpusError| store_err(e.to_string()))?;
            let vector = read_f32s(&mut input, dim)?;
            tech.push(TechRecord {
                patent_id,
                code,
                vector,
            });
        }
        let mut cls = Vec::with_capacity(n_cls);
        for _ in 0..n_cls {
            let id = read_padded(&mut input, id_width)?;
            cls.push((id, read_f32s(&mut input, dim)?));
        }
        EmbeddingStore::new(dim, window, model_hash, tech, cls)
    }
}

fn check_vector(v: &[f32], dim: usize) -> Result<(), ModelError> {
    if v.len() != dim {
        return Err(store_err(format!("vector of length {} in store of dim {dim}", v.len())));
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(store_err("non-finite vector"));
    }
    Ok(())
}

fn write_padded<W: Write>(out: &mut W, bytes: &[u8], width: usize) -> std::io::Result<()> {
    out.write_all(bytes)?;
    out.write_all(&vec![0u8; width - bytes.len()])
}

fn read_padded<R: Read>(input: &mut R, width: usize) -> Result<String, ModelError> {
    let mut buf = vec![0u8; width];
    input.read_exact(&mut buf)?;
    let end = buf.iter().position(|&b| b == 0).unwrap_or(width);
    buf.truncate(end);
    String::from_utf8(buf).map_err(|_| store_err("id is not UTF-8"))
}

fn write_f32s<W: Write>(out: &mut W, v: &[f32]) -> std::io::Result<()> {
    for &x in v {
        out.write_f32::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_f32s<R: Read>(input: &mut R, n: usize) -> Result<Vec<f32>, ModelError> {
    let mut v = vec![0f32; n];
    input.read_f32_into::<LittleEndian>(&mut v)?;
    Ok(v)
}

/// Something that can produce code embeddings for the patents of a window.
pub trait EmbeddingSource {
    fn embeddings(&self, corpus: &Corpus, window: TimeWindow) -> Result<EmbeddingStore, ModelError>;
}

impl EmbeddingSource for EmbeddingStore {
    fn embeddings(&self, corpus: &Corpus, window: TimeWindow) -> Result<EmbeddingStore, ModelError> {
        Ok(self.restrict(corpus, window))
    }
}
