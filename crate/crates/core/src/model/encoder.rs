//! Pre-norm transformer encoder with hand-written backward pass.
//!
//! Sequences of a batch are concatenated row-wise so every linear layer is a
//! single matrix product; attention runs per sequence segment and head.

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::params::{LayerParams, ModelParams, Scalar};
use super::sequence::EncodedSequence;
use super::ModelError;

const LN_EPS: f64 = 1e-5;

/// Token rows of one or more sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub positions: Vec<usize>,
    /// Whether each row may be attended to.
    pub key_valid: Vec<bool>,
    pub segments: Vec<Range<usize>>,
}

impl Batch {
    /// Active (non-padding) tokens of each sequence.
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a EncodedSequence>) -> Self {
        let mut b = Batch {
            ids: vec![],
            positions: vec![],
            key_valid: vec![],
            segments: vec![],
        };
        for seq in seqs {
            let n = seq.active_len();
            let start = b.ids.len();
            b.ids.extend_from_slice(&seq.ids[..n]);
            b.positions.extend(0..n);
            b.key_valid.extend(std::iter::repeat_n(true, n));
            b.segments.push(start..start + n);
        }
        b
    }

    /// Every position of one sequence, padding included but masked out of attention.
    pub fn from_padded(seq: &EncodedSequence) -> Self {
        let n = seq.ids.len();
        Batch {
            ids: seq.ids.clone(),
            positions: (0..n).collect(),
            key_valid: seq.attention_mask.clone(),
            segments: vec![0..n],
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

struct LnCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

struct LayerCache<T> {
    ln1: LnCache<T>,
    a: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    ctx: Array2<T>,
    ln2: LnCache<T>,
    b: Array2<T>,
    u: Array2<T>,
    g: Array2<T>,
}

/// Final hidden states plus everything the backward pass needs.
pub struct ForwardOutput<T> {
    pub hidden: Array2<T>,
    layers: Vec<LayerCache<T>>,
    lnf: LnCache<T>,
}

fn layer_norm<T: Scalar>(x: &Array2<T>, g: &Array1<T>, b: &Array1<T>) -> (Array2<T>, LnCache<T>) {
    let d = T::of(x.ncols() as f64);
    let eps = T::of(LN_EPS);
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / d;
        *r = T::one() / (var + eps).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward<T: Scalar>(
    dy: &Array2<T>,
    cache: &LnCache<T>,
    g: &Array1<T>,
    dg: &mut Array1<T>,
    db: &mut Array1<T>,
) -> Array2<T> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let d = T::of(dy.ncols() as f64);
    let mut dx = dy * g;
    for ((mut row, xhat), &rstd) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.rstd.iter())
    {
        let mean_d = row.sum() / d;
        let mean_dx = row.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).sum::<T>() / d;
        Zip::from(&mut row)
            .and(&xhat)
            .for_each(|v, &xh| *v = rstd * (*v - mean_d - xh * mean_dx));
    }
    dx
}

fn linear<T: Scalar>(x: &Array2<T>, w: &Array2<T>, b: &Array1<T>) -> Array2<T> {
    let mut y = x.dot(w);
    y += b;
    y
}

/// Accumulates weight and bias gradients; returns the input gradient.
fn linear_backward<T: Scalar>(
    x: &Array2<T>,
    w: &Array2<T>,
    dy: &Array2<T>,
    dw: &mut Array2<T>,
    db: &mut Array1<T>,
) -> Array2<T> {
    general_mat_mul(T::one(), &x.t(), dy, T::one(), dw);
    *db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(u: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    T::of(0.5) * u * (T::one() + (c * (u + a * u * u * u)).tanh())
}

fn gelu_grad<T: Scalar>(u: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (u + a * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * u * u)
}

/// Row-wise softmax restricted to valid keys; invalid keys get probability zero.
fn masked_softmax<T: Scalar>(scores: &mut Array2<T>, valid: &[bool]) {
    for mut row in scores.rows_mut() {
        let max = row
            .iter()
            .zip(valid)
            .filter(|(_, &ok)| ok)
            .map(|(&s, _)| s)
            .fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (s, &ok) in row.iter_mut().zip(valid) {
            *s = if ok { (*s - max).exp() } else { T::zero() };
            sum += *s;
        }
        if sum > T::zero() {
            row.mapv_inplace(|s| s / sum);
        }
    }
}

fn head_cols(h: usize, dh: usize) -> Range<usize> {
    h * dh..(h + 1) * dh
}

fn attention<T: Scalar>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    batch: &Batch,
    heads: usize,
) -> (Array2<T>, Vec<Array2<T>>) {
    let dh = q.ncols() / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut ctx = Array2::zeros(q.raw_dim());
    let mut probs = Vec::with_capacity(batch.segments.len() * heads);
    for seg in &batch.segments {
        let valid = &batch.key_valid[seg.clone()];
        for h in 0..heads {
            let cols = head_cols(h, dh);
            let qs = q.slice(s![seg.clone(), cols.clone()]);
            let ks = k.slice(s![seg.clone(), cols.clone()]);
            let vs = v.slice(s![seg.clone(), cols.clone()]);
            let mut p = qs.dot(&ks.t());
            p.mapv_inplace(|x| x * scale);
            masked_softmax(&mut p, valid);
            ctx.slice_mut(s![seg.clone(), cols]).assign(&p.dot(&vs));
            probs.push(p);
        }
    }
    (ctx, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    dctx: &Array2<T>,
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    probs: &[Array2<T>],
    batch: &Batch,
    heads: usize,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let dh = q.ncols() / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    let mut idx = 0;
    for seg in &batch.segments {
        for h in 0..heads {
            let p = &probs[idx];
            idx += 1;
            let cols = head_cols(h, dh);
            let rows = seg.clone();
            let qs = q.slice(s![rows.clone(), cols.clone()]);
            let ks = k.slice(s![rows.clone(), cols.clone()]);
            let vs = v.slice(s![rows.clone(), cols.clone()]);
            let dcs = dctx.slice(s![rows.clone(), cols.clone()]);
            let dp = dcs.dot(&vs.t());
            dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&dcs));
            let row_dot = (&dp * p).sum_axis(Axis(1));
            let mut ds = dp;
            Zip::from(ds.rows_mut())
                .and(p.rows())
                .and(&row_dot)
                .for_each(|mut dsr, pr, &rd| {
                    Zip::from(&mut dsr)
                        .and(&pr)
                        .for_each(|d, &pv| *d = pv * (*d - rd) * scale);
                });
            dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&ks));
            dk.slice_mut(s![rows, cols]).assign(&ds.t().dot(&qs));
        }
    }
    (dq, dk, dv)
}

fn embed<T: Scalar>(params: &ModelParams<T>, batch: &Batch) -> Array2<T> {
    let d = params.config.model_dim;
    let mut x = Array2::zeros((batch.len(), d));
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        let t = params.tok_emb.row(batch.ids[i] as usize);
        let p = params.pos_emb.row(batch.positions[i]);
        Zip::from(&mut row).and(&t).and(&p).for_each(|o, &a, &b| *o = a + b);
    }
    x
}

pub(crate) fn check_batch<T: Scalar>(params: &ModelParams<T>, batch: &Batch) -> Result<(), ModelError> {
    let cfg = &params.config;
    if let Some(&id) = batch.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(ModelError::ShapeMismatch(format!(
            "token id {id} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    if let Some(&p) = batch.positions.iter().find(|&&p| p >= cfg.max_seq_len) {
        return Err(ModelError::ShapeMismatch(format!(
            "position {p} beyond max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    Ok(())
}

fn layer_forward<T: Scalar>(
    layer: &LayerParams<T>,
    x: &Array2<T>,
    batch: &Batch,
    heads: usize,
) -> (Array2<T>, LayerCache<T>) {
    let (a, ln1) = layer_norm(x, &layer.ln1_g, &layer.ln1_b);
    let q = linear(&a, &layer.wq, &layer.bq);
    let k = linear(&a, &layer.wk, &layer.bk);
    let v = linear(&a, &layer.wv, &layer.bv);
    let (ctx, probs) = attention(&q, &k, &v, batch, heads);
    let mut x_mid = linear(&ctx, &layer.wo, &layer.bo);
    x_mid += x;
    let (b, ln2) = layer_norm(&x_mid, &layer.ln2_g, &layer.ln2_b);
    let u = linear(&b, &layer.w1, &layer.b1);
    let g = u.mapv(gelu);
    let mut out = linear(&g, &layer.w2, &layer.b2);
    out += &x_mid;
    let cache = LayerCache {
        ln1,
        a,
        q,
        k,
        v,
        probs,
        ctx,
        ln2,
        b,
        u,
        g,
    };
    (out, cache)
}

/// Runs the encoder; `hidden` holds the final (layer-normalised) states.
pub(crate) fn forward_batch<T: Scalar>(params: &ModelParams<T>, batch: &Batch) -> ForwardOutput<T> {
    let heads = params.config.heads;
    let mut x = embed(params, batch);
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (next, cache) = layer_forward(layer, &x, batch, heads);
        layers.push(cache);
        x = next;
    }
    let (hidden, lnf) = layer_norm(&x, &params.lnf_g, &params.lnf_b);
    ForwardOutput { hidden, layers, lnf }
}

fn layer_backward<T: Scalar>(
    layer: &LayerParams<T>,
    grad: &mut LayerParams<T>,
    cache: &LayerCache<T>,
    dout: Array2<T>,
    batch: &Batch,
    heads: usize,
) -> Array2<T> {
    // feed-forward block: out = x_mid + gelu(b W1 + b1) W2 + b2
    let dg = linear_backward(&cache.g, &layer.w2, &dout, &mut grad.w2, &mut grad.b2);
    let mut du = dg;
    Zip::from(&mut du)
        .and(&cache.u)
        .for_each(|d, &u| *d = *d * gelu_grad(u));
    let db = linear_backward(&cache.b, &layer.w1, &du, &mut grad.w1, &mut grad.b1);
    let mut dx_mid = layer_norm_backward(&db, &cache.ln2, &layer.ln2_g, &mut grad.ln2_g, &mut grad.ln2_b);
    dx_mid += &dout;

    // attention block: x_mid = x + attn(LN1(x)) Wo + bo
    let dctx = linear_backward(&cache.ctx, &layer.wo, &dx_mid, &mut grad.wo, &mut grad.bo);
    let (dq, dk, dv) = attention_backward(&dctx, &cache.q, &cache.k, &cache.v, &cache.probs, batch, heads);
    let mut da = linear_backward(&cache.a, &layer.wq, &dq, &mut grad.wq, &mut grad.bq);
    da += &linear_backward(&cache.a, &layer.wk, &dk, &mut grad.wk, &mut grad.bk);
    da += &linear_backward(&cache.a, &layer.wv, &dv, &mut grad.wv, &mut grad.bv);
    let mut dx = layer_norm_backward(&da, &cache.ln1, &layer.ln1_g, &mut grad.ln1_g, &mut grad.ln1_b);
    dx += &dx_mid;
    dx
}

/// Back-propagates `dhidden` through the encoder, accumulating into `grads`.
pub(crate) fn backward_batch<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch,
    out: &ForwardOutput<T>,
    dhidden: &Array2<T>,
    grads: &mut ModelParams<T>,
) {
    let heads = params.config.heads;
    let mut dx = layer_norm_backward(dhidden, &out.lnf, &params.lnf_g, &mut grads.lnf_g, &mut grads.lnf_b);
    for ((layer, grad), cache) in params
        .layers
        .iter()
        .zip(grads.layers.iter_mut())
        .zip(out.layers.iter())
        .rev()
    {
        dx = layer_backward(layer, grad, cache, dx, batch, heads);
    }
    for (i, row) in dx.rows().into_iter().enumerate() {
        let mut t = grads.tok_emb.row_mut(batch.ids[i] as usize);
        t += &row;
        let mut p = grads.pos_emb.row_mut(batch.positions[i]);
        p += &row;
    }
}

/// Output-head logits `h E^T + bias` for the given hidden rows.
pub(crate) fn head_logits<T: Scalar>(params: &ModelParams<T>, hidden: ArrayView2<T>) -> Array2<T> {
    let mut logits = hidden.dot(&params.tok_emb.t());
    logits += &params.out_bias;
    logits
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn params() -> ModelParams<f64> {
        ModelParams::init(ModelConfig {
            layers: 2,
            heads: 2,
            model_dim: 8,
            ff_dim: 12,
            max_seq_len: 12,
            vocab_size: 30,
            seed: 11,
        })
        .unwrap()
    }

    fn seq(ids: &[u32], len: usize) -> EncodedSequence {
        let mut padded = ids.to_vec();
        padded.resize(len, 0);
        EncodedSequence {
            ids: padded,
            attention_mask: (0..len).map(|i| i < ids.len()).collect(),
            tech_positions: vec![],
            tech_codes: vec![],
            skipped_codes: 0,
        }
    }

    #[test]
    fn padding_content_is_ignored() {
        let p = params();
        let mut a = seq(&[2, 7, 8, 3, 9, 3, 25], 12);
        let h1 = forward_batch(&p, &Batch::from_padded(&a)).hidden;
        for (i, id) in a.ids.iter_mut().enumerate().skip(7) {
            *id = 10 + i as u32;
        }
        let h2 = forward_batch(&p, &Batch::from_padded(&a)).hidden;
        assert_eq!(h1.slice(s![..7, ..]), h2.slice(s![..7, ..]));
        // and the trimmed path agrees with the padded one
        let h3 = forward_batch(&p, &Batch::from_sequences([&a])).hidden;
        for (x, y) in h3.iter().zip(h1.slice(s![..7, ..]).iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_rows_are_independent() {
        let p = params();
        let a = seq(&[2, 7, 8, 3, 9, 3, 25], 12);
        let b = seq(&[2, 11, 3, 3, 26, 27], 12);
        let single = forward_batch(&p, &Batch::from_sequences([&a])).hidden;
        let pair = forward_batch(&p, &Batch::from_sequences([&a, &b, &a])).hidden;
        assert_eq!(pair.slice(s![..7, ..]), single);
        assert_eq!(pair.slice(s![13.., ..]), single);
    }

    #[test]
    fn zero_weights_give_bias_only_logits() {
        let mut p = params();
        for t in p.tensors_mut() {
            t.fill(0.0);
        }
        for (i, b) in p.out_bias.iter_mut().enumerate() {
            *b = i as f64 * 0.1;
        }
        let a = seq(&[2, 7, 8, 3], 12);
        let out = forward_batch(&p, &Batch::from_sequences([&a]));
        let logits = head_logits(&p, out.hidden.view());
        for row in logits.rows() {
            assert_eq!(row, p.out_bias);
        }
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for &u in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8);
        }
    }
}
