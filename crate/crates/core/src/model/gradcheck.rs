use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mlm::{loss_and_grad, mask_batch, mlm_loss};
use super::params::ModelParams;
use super::sequence::EncodedSequence;

/// Below this combined magnitude `|analytic| + |numeric|` errors are measured
/// relative to the floor instead; central differences in f64 with `eps = 1e-5`
/// carry roughly 1e-10 of absolute noise.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Flat index of the worst parameter.
    pub worst_index: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` with central differences of `f` at the given indices of `x`.
pub fn check_gradients<F: FnMut(&[f64]) -> f64>(
    x: &[f64],
    analytic: &[f64],
    indices: &[usize],
    eps: f64,
    mut f: F,
) -> GradCheckReport {
    let mut probe = x.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst_index: 0,
    };
    for &i in indices {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&probe);
        probe[i] = orig - eps;
        let down = f(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    report
}

fn flatten(p: &ModelParams<f64>) -> Vec<f64> {
    p.tensors().concat()
}

fn unflatten(into: &mut ModelParams<f64>, flat: &[f64]) {
    let mut offset = 0;
    for t in into.tensors_mut() {
        t.copy_from_slice(&flat[offset..offset + t.len()]);
        offset += t.len();
    }
}

/// Checks the masked-LM gradient of `params` on one sequence against central
/// differences on `per_tensor` random entries of every tensor.
pub fn grad_check(
    params: &ModelParams<f64>,
    seq: &EncodedSequence,
    eps: f64,
    per_tensor: usize,
    seed: u64,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = mask_batch(&[seq], params.config.vocab_size, 0.3, &mut rng);
    if masked.targets.is_empty() {
        let row = masked
            .batch
            .ids
            .iter()
            .position(|&id| id >= super::tokenizer::NUM_SPECIAL)
            .expect("sequence has a maskable token");
        masked.targets.push((row, masked.batch.ids[row]));
        masked.batch.ids[row] = super::tokenizer::MASK;
    }
    let (_, grads) = loss_and_grad(params, &masked);
    let x = flatten(params);
    let analytic = flatten(&grads);

    let mut indices = Vec::new();
    let mut offset = 0;
    for t in params.tensors() {
        for _ in 0..per_tensor.min(t.len()) {
            indices.push(offset + rng.random_range(0..t.len()));
        }
        offset += t.len();
    }

    let mut scratch = params.clone();
    check_gradients(&x, &analytic, &indices, eps, |flat| {
        unflatten(&mut scratch, flat);
        mlm_loss(&scratch, &masked)
    })
}
