use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use forge_core::model::{read_checkpoint, write_checkpoint};
use forge_core::{parse_corpus, Checkpoint, Corpus, EmbeddingStore};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::CliError;

pub fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e)),
        _ => Ok(()),
    }
}

/// Runs `body` on a buffered writer for `path`, creating parent directories.
pub fn write_with<F>(path: &Path, body: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<(), CliError>,
{
    ensure_parent(path)?;
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut out = BufWriter::new(file);
    body(&mut out)?;
    out.flush().map_err(|e| CliError::io(path, e))
}

/// Pretty JSON with a trailing newline; field order follows the type, so
/// identical values give identical bytes.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_with(path, |out| {
        serde_json::to_writer_pretty(&mut *out, value)?;
        out.write_all(b"\n").map_err(|e| CliError::io(path, e))
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn read_corpus(path: &Path) -> Result<Corpus, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    parse_corpus(BufReader::new(file)).map_err(|e| CliError::from(e).prefixed(path))
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<(), CliError> {
    write_with(path, |out| Ok(corpus.write_jsonl(out)?))
}

pub fn read_ckpt(path: &Path) -> Result<Checkpoint, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    read_checkpoint(BufReader::new(file)).map_err(|e| CliError::from(e).prefixed(path))
}

pub fn write_ckpt(path: &Path, ckpt: &Checkpoint) -> Result<(), CliError> {
    write_with(path, |out| Ok(write_checkpoint(out, ckpt)?))
}

pub fn read_store(path: &Path) -> Result<EmbeddingStore, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    EmbeddingStore::read(BufReader::new(file)).map_err(|e| CliError::from(e).prefixed(path))
}

pub fn write_store(path: &Path, store: &EmbeddingStore) -> Result<(), CliError> {
    write_with(path, |out| Ok(store.write(out)?))
}

/// Ground truth written next to a synthetic corpus.
pub fn truth_path(corpus: &Path) -> PathBuf {
    let mut s = corpus.as_os_str().to_owned();
    s.push(".truth.json");
    PathBuf::from(s)
}

impl CliError {
    fn prefixed(self, path: &Path) -> CliError {
        let p = path.display();
        match self {
            CliError::Config(m) => CliError::Config(format!("{p}: {m}")),
            CliError::Data(m) => CliError::Data(format!("{p}: {m}")),
            CliError::Runtime(m) => CliError::Runtime(format!("{p}: {m}")),
            e => e,
        }
    }
}
