//! Forecasting technology combinations from the language of patents.
//!
//! The crate covers the full pipeline: ingesting patent corpora, training a
//! small masked-language-model encoder whose vocabulary carries one token per
//! technology code, extracting per-patent code embeddings, measuring context
//! similarity between codes, labelling genuine first combinations against a
//! bipartite null model, and backtesting the similarity signal as a
//! forecaster.

pub mod corpus;
pub mod evaluation;
pub mod model;
pub mod nullmodel;
pub mod similarity;

pub use corpus::{parse_corpus, truncate_code, Corpus, CorpusError, PatentRecord, TechCode, TimeWindow};
pub use nullmodel::{CodePair, InnovationLabels, NullModel, NullModelError, PairStats};
pub use model::{Checkpoint, EmbeddingStore, ModelConfig, ModelError, ModelParams, TrainConfig};
pub use similarity::{CSConfig, CSValue, CsMethod, SimilarityError};
pub use evaluation::{EvalError, SyntheticSpec};
