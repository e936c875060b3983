use std::path::PathBuf;

use forge_core::evaluation::EvalError;
use forge_core::{CorpusError, ModelError, NullModelError, SimilarityError};
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("runtime failure: {0}")]
    Runtime(String),
    #[error("no results found in {}", .0.display())]
    MissingResults(PathBuf),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CliError>,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) | CliError::MissingResults(_) => EXIT_DATA,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Stage { source, .. } => source.exit_code(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> CliError {
        match self {
            e @ CliError::Stage { .. } => e,
            e => CliError::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> CliError {
        let msg = format!("{}: {e}", path.display());
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Data(msg)
        } else {
            CliError::Runtime(msg)
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::InvalidWindow(_) => CliError::Config(e.to_string()),
            CorpusError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => CliError::Config(e.to_string()),
            ModelError::EmptyCorpus | ModelError::TooManyCodes { .. } | ModelError::Checkpoint(_) | ModelError::Store(_) => {
                CliError::Data(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<NullModelError> for CliError {
    fn from(e: NullModelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SimilarityError> for CliError {
    fn from(e: SimilarityError) -> Self {
        match e {
            SimilarityError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Corpus(e) => e.into(),
            EvalError::Model(e) => e.into(),
            EvalError::NullModel(e) => e.into(),
            EvalError::Similarity(e) => e.into(),
            EvalError::InvalidConfig(_) | EvalError::InfeasibleSpec(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
