//! Forecast backtesting, downstream patent-task metrics, and the synthetic
//! corpus generator used to exercise the whole pipeline.

mod backtest;
mod knn;
mod metrics;
mod synthetic;
mod tasks;

use thiserror::Error;

use crate::corpus::CorpusError;
use crate::model::ModelError;
use crate::nullmodel::NullModelError;
use crate::similarity::SimilarityError;

pub use backtest::{run_backtest, score_candidates, BacktestConfig, BacktestResult, WindowResult};
pub use knn::{knn_classify, nearest_patents};
pub use metrics::{
    auc_roc, average_precision, classification_metrics, retrieval_metrics, title_abstract_eval,
    ClassificationMetrics, RetrievalMetrics,
};
pub use synthetic::{family_code, generate_synthetic, PlantedPair, SyntheticCorpus, SyntheticSpec, SyntheticTruth};
pub use tasks::{
    citation_task, ipc_classification_task, split_by_year, title_abstract_task, DataSplit, TaskConfig, TaskReport,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("only one class present")]
    SingleClass,
    #[error("prediction and gold sets cover different patents")]
    KeyMismatch,
    #[error("query {0} has no relevant candidate in its pool")]
    NoRelevant(usize),
    #[error("length mismatch: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("embedding store has no CLS vectors")]
    EmptyStore,
    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),
    #[error("invalid evaluation configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    NullModel(#[from] NullModelError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}
