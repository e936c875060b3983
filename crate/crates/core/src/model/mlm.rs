use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::encoder::{backward_batch, forward_batch, head_logits, Batch};
use super::params::{ModelParams, Scalar};
use super::sequence::EncodedSequence;
use super::tokenizer::{CLS, MASK, NUM_SPECIAL, PAD, SEP};
use super::ModelError;

/// A corrupted batch with the original ids of the positions to predict.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub batch: Batch,
    /// (row in `batch`, original token id)
    pub targets: Vec<(usize, u32)>,
}

fn maskable(id: u32) -> bool {
    !matches!(id, PAD | CLS | SEP | MASK)
}

/// Selects each word or technology position with probability `mask_prob`;
/// selected tokens become `[MASK]` 80% of the time, a random token 10%, and
/// stay unchanged 10%.
pub fn mask_batch<R: Rng>(
    seqs: &[&EncodedSequence],
    vocab_size: usize,
    mask_prob: f64,
    rng: &mut R,
) -> MaskedBatch {
    let mut batch = Batch::from_sequences(seqs.iter().copied());
    let mut targets = Vec::new();
    for (row, id) in batch.ids.iter_mut().enumerate() {
        if !maskable(*id) || rng.random::<f64>() >= mask_prob {
            continue;
        }
        targets.push((row, *id));
        let r = rng.random::<f64>();
        if r < 0.8 {
            *id = MASK;
        } else if r < 0.9 {
            *id = rng.random_range(NUM_SPECIAL..vocab_size as u32);
        }
    }
    MaskedBatch { batch, targets }
}

fn select_rows<T: Scalar>(hidden: &Array2<T>, targets: &[(usize, u32)]) -> Array2<T> {
    let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
    hidden.select(Axis(0), &rows)
}

/// Mean cross-entropy of the targets; softmax probabilities are left in `logits`.
fn cross_entropy<T: Scalar>(logits: &mut Array2<T>, targets: &[(usize, u32)]) -> T {
    let mut total = T::zero();
    for (mut row, &(_, target)) in logits.rows_mut().into_iter().zip(targets) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        total += sum.ln() - row[target as usize].ln();
        row.mapv_inplace(|x| x / sum);
    }
    total / T::of(targets.len() as f64)
}

/// Masked-token cross-entropy.
pub fn mlm_loss<T: Scalar>(params: &ModelParams<T>, masked: &MaskedBatch) -> T {
    let out = forward_batch(params, &masked.batch);
    let mut logits = head_logits(params, select_rows(&out.hidden, &masked.targets).view());
    cross_entropy(&mut logits, &masked.targets)
}

/// Masked-token cross-entropy and its gradient with respect to every parameter.
pub(crate) fn loss_and_grad<T: Scalar>(
    params: &ModelParams<T>,
    masked: &MaskedBatch,
) -> (T, ModelParams<T>) {
    let out = forward_batch(params, &masked.batch);
    let h_sel = select_rows(&out.hidden, &masked.targets);
    let mut probs = head_logits(params, h_sel.view());
    let loss = cross_entropy(&mut probs, &masked.targets);

    let m = T::of(masked.targets.len() as f64);
    let mut dlogits = probs;
    for (mut row, &(_, target)) in dlogits.rows_mut().into_iter().zip(&masked.targets) {
        row[target as usize] -= T::one();
        row.mapv_inplace(|x| x / m);
    }

    let mut grads = params.zeros_like();
    grads.out_bias += &dlogits.sum_axis(Axis(0));
    ndarray::linalg::general_mat_mul(T::one(), &dlogits.t(), &h_sel, T::one(), &mut grads.tok_emb);
    let dh_sel = dlogits.dot(&params.tok_emb);
    let mut dhidden = Array2::zeros(out.hidden.raw_dim());
    for (row, &(r, _)) in dh_sel.rows().into_iter().zip(&masked.targets) {
        let mut dst = dhidden.row_mut(r);
        dst += &row;
    }
    backward_batch(params, &masked.batch, &out, &dhidden, &mut grads);
    (loss, grads)
}

/// One masked-language-modelling step: masks `seqs` with a generator seeded by
/// `seed` and returns the loss and gradients. If no position is selected the
/// mask is drawn once more before giving up.
pub fn mlm_step<T: Scalar>(
    params: &ModelParams<T>,
    seqs: &[&EncodedSequence],
    mask_prob: f64,
    seed: u64,
) -> Result<(T, ModelParams<T>), ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..2 {
        let masked = mask_batch(seqs, params.config.vocab_size, mask_prob, &mut rng);
        if !masked.targets.is_empty() {
            super::encoder::check_batch(params, &masked.batch)?;
            return Ok(loss_and_grad(params, &masked));
        }
    }
    Err(ModelError::NoMaskedPositions)
}

/// Fraction of masked positions whose argmax prediction is the original token.
/// Every selected position is replaced by `[MASK]`.
pub fn masked_accuracy(
    params: &ModelParams<f32>,
    seqs: &[&EncodedSequence],
    mask_prob: f64,
    seed: u64,
) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0;
    let mut total = 0;
    for chunk in seqs.chunks(32) {
        let mut batch = Batch::from_sequences(chunk.iter().copied());
        let mut targets = Vec::new();
        for (row, id) in batch.ids.iter_mut().enumerate() {
            if maskable(*id) && rng.random::<f64>() < mask_prob {
                targets.push((row, *id));
                *id = MASK;
            }
        }
        if targets.is_empty() {
            continue;
        }
        let out = forward_batch(params, &batch);
        let logits = head_logits(params, select_rows(&out.hidden, &targets).view());
        for (row, &(_, target)) in logits.rows().into_iter().zip(&targets) {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i as u32);
            correct += (argmax == Some(target)) as usize;
            total += 1;
        }
    }
    (correct as f64 / total.max(1) as f64, total)
}
