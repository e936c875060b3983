//! Per-stage manifests: input digests, the effective configuration, timings
//! and the outputs produced. Timestamps appear only here, never in results.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub tool_version: String,
    pub status: StageStatus,
    pub started_at: String,
    pub elapsed_seconds: f64,
    pub inputs: BTreeMap<String, FileDigest>,
    pub config: serde_json::Value,
    pub outputs: Vec<FileDigest>,
    /// Outputs left behind by a failed stage; not to be trusted.
    pub partial_outputs: Vec<PathBuf>,
    pub error: Option<String>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_file(path: &Path) -> Result<FileDigest, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    let mut bytes = 0u64;
    loop {
        let n = reader.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        bytes += n as u64;
    }
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: hex(&hasher.finalize()),
        bytes,
    })
}

/// A stage about to run: inputs must exist before any artifact is written.
pub struct Stage<'a> {
    pub name: &'static str,
    pub manifest: PathBuf,
    pub inputs: Vec<(&'a str, &'a Path)>,
    pub outputs: Vec<PathBuf>,
    pub config: serde_json::Value,
}

impl Stage<'_> {
    /// Hashes the inputs, runs `body`, then records the outcome. A missing
    /// input is a configuration error and leaves no trace on disk.
    pub fn run<T>(self, body: impl FnOnce() -> Result<T, CliError>) -> Result<T, CliError> {
        let mut inputs = BTreeMap::new();
        for (role, path) in &self.inputs {
            if !path.exists() {
                return Err(CliError::Config(format!("{role} {} does not exist", path.display())).in_stage(self.name));
            }
            inputs.insert(role.to_string(), digest_file(path).map_err(|e| e.in_stage(self.name))?);
        }
        let started_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
        let clock = Instant::now();
        log::info!("stage {} started", self.name);
        let result = body();
        let mut manifest = Manifest {
            stage: self.name.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            status: StageStatus::Complete,
            started_at,
            elapsed_seconds: 0.0,
            inputs,
            config: self.config,
            outputs: vec![],
            partial_outputs: vec![],
            error: None,
        };
        match &result {
            Ok(_) => {
                for p in &self.outputs {
                    manifest.outputs.push(digest_file(p).map_err(|e| e.in_stage(self.name))?);
                }
            }
            Err(e) => {
                manifest.status = StageStatus::Failed;
                manifest.error = Some(e.to_string());
                manifest.partial_outputs = self.outputs.iter().filter(|p| p.exists()).cloned().collect();
            }
        }
        manifest.elapsed_seconds = clock.elapsed().as_secs_f64();
        log::info!("stage {} finished in {:.2}s", self.name, manifest.elapsed_seconds);
        // a failed stage that never created its directory leaves nothing behind
        let dir_exists = self.manifest.parent().is_none_or(|d| d.as_os_str().is_empty() || d.exists());
        if result.is_ok() || dir_exists {
            crate::io::write_json(&self.manifest, &manifest).map_err(|e| e.in_stage(self.name))?;
        }
        result.map_err(|e| e.in_stage(self.name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_known_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        std::fs::write(&p, b"abc").unwrap();
        let d = digest_file(&p).unwrap();
        assert_eq!(d.sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(d.bytes, 3);
    }

    #[test]
    fn failed_stage_flags_partial_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("half.txt");
        let manifest = dir.path().join("m.json");
        let stage = Stage {
            name: "demo",
            manifest: manifest.clone(),
            inputs: vec![],
            outputs: vec![out.clone(), dir.path().join("never.txt")],
            config: serde_json::json!({"k": 1}),
        };
        let err = stage
            .run(|| -> Result<(), CliError> {
                std::fs::write(&out, b"partial").unwrap();
                Err(CliError::Runtime("boom".into()))
            })
            .unwrap_err();
        assert_eq!(err.exit_code(), crate::error::EXIT_RUNTIME);
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
        assert_eq!(m.status, StageStatus::Failed);
        assert_eq!(m.partial_outputs, vec![out]);
        assert!(m.error.unwrap().contains("boom"));
    }

    #[test]
    fn missing_input_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.jsonl");
        let manifest = dir.path().join("m.json");
        let stage = Stage {
            name: "demo",
            manifest: manifest.clone(),
            inputs: vec![("corpus", &missing)],
            outputs: vec![],
            config: serde_json::Value::Null,
        };
        let err = stage.run(|| Ok(())).unwrap_err();
        assert_eq!(err.exit_code(), crate::error::EXIT_CONFIG);
        assert!(!manifest.exists());
    }
}
