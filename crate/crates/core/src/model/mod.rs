//! A small bidirectional transformer encoder trained with masked language
//! modelling, whose vocabulary holds one token per technology code.
//!
//! Each patent is laid out as
//! `[CLS] title [SEP] abstract [SEP] [code_1] ... [code_n]`, so attention links
//! every technology token to the patent's words and to the other codes. The
//! last-layer vector at a technology token is that code's embedding in that
//! patent; the `[CLS]` vector embeds the whole patent.

mod checkpoint;
mod encoder;
mod gradcheck;
mod inference;
mod mlm;
mod params;
mod sequence;
mod store;
mod tokenizer;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use encoder::{Batch, ForwardOutput};
pub use gradcheck::{check_gradients, grad_check, GradCheckReport};
pub use inference::{code_distribution, extract_tech_embeddings, forward, patent_cls_vector, predict_codes, text_cls_vector, CodeScore};
pub use mlm::{masked_accuracy, mask_batch, mlm_loss, mlm_step, MaskedBatch};
pub use params::{LayerParams, ModelParams, Scalar};
pub use sequence::{encode_patent, encode_query, EncodedSequence};
pub use store::{EmbeddingSource, EmbeddingStore, TechRecord};
pub use tokenizer::{build_tokenizer, split_words, Tokenizer, CLS, MASK, NUM_SPECIAL, PAD, SEP, UNK};
pub use train::{train, TrainOutput};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("corpus contains no patents")]
    EmptyCorpus,
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("{codes} technology tokens do not fit in a sequence of {max_len}")]
    TooManyCodes { codes: usize, max_len: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no maskable positions in batch")]
    NoMaskedPositions,
    #[error("training diverged at step {step}: loss {loss}")]
    DivergenceDetected { step: usize, loss: f32 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("embedding store: {0}")]
    Store(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Encoder architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    /// Filled from the tokenizer when zero.
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            heads: 4,
            model_dim: 128,
            ff_dim: 512,
            max_seq_len: 128,
            vocab_size: 0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("model_dim", self.model_dim),
            ("ff_dim", self.ff_dim),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if self.model_dim % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.max_seq_len < 4 {
            return Err(ModelError::InvalidConfig("max_seq_len must be at least 4".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// Text behind the `[CLS]` vectors of an embedding store. Technology-token
/// vectors always see the title and the abstract.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsText {
    #[default]
    TitleAndAbstract,
    /// `[CLS]` from a second pass with the title left out.
    AbstractOnly,
}

impl ClsText {
    pub fn as_str(self) -> &'static str {
        match self {
            ClsText::TitleAndAbstract => "title_and_abstract",
            ClsText::AbstractOnly => "abstract_only",
        }
    }
}

impl std::fmt::Display for ClsText {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ClsText {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [ClsText::TitleAndAbstract, ClsText::AbstractOnly]
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| ModelError::InvalidConfig(format!("unknown CLS text {s}")))
    }
}

/// Optimisation settings for [`train`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub seed: u64,
    /// Fraction of `steps` spent on linear learning-rate warmup.
    pub warmup_frac: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f32,
    /// Keep patents with a single code. They add language but no code pairs.
    pub keep_single_code: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            steps: 2000,
            batch_size: 16,
            mask_prob: 0.15,
            seed: 0,
            warmup_frac: 0.05,
            clip_norm: 1.0,
            keep_single_code: true,
        }
    }
}
