use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Corpus;

use super::mlm::{loss_and_grad, mask_batch};
use super::params::ModelParams;
use super::sequence::{encode_patent, EncodedSequence};
use super::tokenizer::Tokenizer;
use super::{ModelConfig, ModelError, TrainConfig};

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ModelParams<f32>,
    /// Batch loss at every step.
    pub loss_trace: Vec<f32>,
    /// Batches skipped because no position was masked.
    pub skipped_batches: usize,
}

struct Adam {
    m: ModelParams<f32>,
    v: ModelParams<f32>,
    t: i32,
}

impl Adam {
    fn new(p: &ModelParams<f32>) -> Self {
        Adam {
            m: p.zeros_like(),
            v: p.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams<f32>, grads: &ModelParams<f32>, lr: f32) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Linear warmup over the first `warmup_frac` of steps, then linear decay to
/// a tenth of the peak rate.
fn learning_rate(tc: &TrainConfig, step: usize) -> f32 {
    let warmup = ((tc.steps as f64 * tc.warmup_frac).ceil() as usize).max(1);
    if step < warmup {
        return tc.lr * (step + 1) as f32 / warmup as f32;
    }
    let rest = (tc.steps - warmup).max(1) as f32;
    let frac = (step - warmup) as f32 / rest;
    tc.lr * (1.0 - 0.9 * frac)
}

/// Encodes the training patents in corpus order.
pub(crate) fn encode_corpus(
    tok: &Tokenizer,
    corpus: &Corpus,
    max_len: usize,
    keep_single_code: bool,
) -> Result<Vec<EncodedSequence>, ModelError> {
    corpus
        .records()
        .iter()
        .filter(|r| keep_single_code || r.codes.len() > 1)
        .map(|r| encode_patent(tok, r, max_len))
        .collect()
}

/// Trains the encoder from scratch with Adam on masked-token prediction.
///
/// Single-threaded and fully determined by `mc.seed` (initialisation) and
/// `tc.seed` (shuffling and masking).
pub fn train(
    corpus: &Corpus,
    tok: &Tokenizer,
    mc: ModelConfig,
    tc: &TrainConfig,
) -> Result<TrainOutput, ModelError> {
    let mc = ModelConfig {
        vocab_size: if mc.vocab_size == 0 { tok.vocab_size() } else { mc.vocab_size },
        ..mc
    };
    if mc.vocab_size != tok.vocab_size() {
        return Err(ModelError::InvalidConfig(format!(
            "vocab_size {} does not match tokenizer ({})",
            mc.vocab_size,
            tok.vocab_size()
        )));
    }
    if !(tc.mask_prob > 0.0 && tc.mask_prob < 1.0) || tc.batch_size == 0 {
        return Err(ModelError::InvalidConfig("mask_prob must be in (0,1) and batch_size positive".into()));
    }
    let mut params = ModelParams::<f32>::init(mc)?;
    let seqs = encode_corpus(tok, corpus, mc.max_seq_len, tc.keep_single_code)?;
    if seqs.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut cursor = order.len();
    let mut adam = Adam::new(&params);
    let mut loss_trace = Vec::with_capacity(tc.steps);
    let mut skipped_batches = 0;

    for step in 0..tc.steps {
        let mut batch = Vec::with_capacity(tc.batch_size);
        while batch.len() < tc.batch_size.min(seqs.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&seqs[order[cursor]]);
            cursor += 1;
        }
        let mut mask_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let mut masked = mask_batch(&batch, mc.vocab_size, tc.mask_prob, &mut mask_rng);
        if masked.targets.is_empty() {
            masked = mask_batch(&batch, mc.vocab_size, tc.mask_prob, &mut mask_rng);
        }
        if masked.targets.is_empty() {
            log::warn!("step {step}: no masked positions, batch skipped");
            skipped_batches += 1;
            continue;
        }
        let (loss, mut grads) = loss_and_grad(&params, &masked);
        if !loss.is_finite() {
            return Err(ModelError::DivergenceDetected { step, loss });
        }
        loss_trace.push(loss);
        if tc.clip_norm > 0.0 {
            let norm = grads.norm();
            if norm > tc.clip_norm {
                grads.scale(tc.clip_norm / norm);
            }
        }
        adam.step(&mut params, &grads, learning_rate(tc, step));
        if step % 100 == 0 {
            log::debug!("step {step} loss {loss:.4}");
        }
    }
    if !params.is_finite() {
        return Err(ModelError::DivergenceDetected {
            step: tc.steps,
            loss: f32::NAN,
        });
    }
    Ok(TrainOutput {
        params,
        loss_trace,
        skipped_batches,
    })
}
