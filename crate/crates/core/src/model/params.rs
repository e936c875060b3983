use ndarray::{Array1, Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError};

/// Floating point type the encoder runs in: `f32` for training, `f64` for
/// gradient checking.
pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + Send
    + Sync
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_g: Array1<T>,
    pub ln1_b: Array1<T>,
    pub wq: Array2<T>,
    pub bq: Array1<T>,
    pub wk: Array2<T>,
    pub bk: Array1<T>,
    pub wv: Array2<T>,
    pub bv: Array1<T>,
    pub wo: Array2<T>,
    pub bo: Array1<T>,
    pub ln2_g: Array1<T>,
    pub ln2_b: Array1<T>,
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

/// Encoder weights. Linear maps are stored `(in, out)` and applied as `x W + b`.
/// The output head reuses `tok_emb` and adds `out_bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub config: ModelConfig,
    pub tok_emb: Array2<T>,
    pub pos_emb: Array2<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_g: Array1<T>,
    pub lnf_b: Array1<T>,
    pub out_bias: Array1<T>,
}

impl<T: Scalar> LayerParams<T> {
    fn zeros(d: usize, ff: usize) -> Self {
        LayerParams {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            w1: Array2::zeros((d, ff)),
            b1: Array1::zeros(ff),
            w2: Array2::zeros((ff, d)),
            b2: Array1::zeros(d),
        }
    }

    fn slices(&self) -> [&[T]; 16] {
        [
            sl(&self.ln1_g),
            sl(&self.ln1_b),
            sl2(&self.wq),
            sl(&self.bq),
            sl2(&self.wk),
            sl(&self.bk),
            sl2(&self.wv),
            sl(&self.bv),
            sl2(&self.wo),
            sl(&self.bo),
            sl(&self.ln2_g),
            sl(&self.ln2_b),
            sl2(&self.w1),
            sl(&self.b1),
            sl2(&self.w2),
            sl(&self.b2),
        ]
    }

    fn slices_mut(&mut self) -> [&mut [T]; 16] {
        [
            sl_mut(&mut self.ln1_g),
            sl_mut(&mut self.ln1_b),
            sl2_mut(&mut self.wq),
            sl_mut(&mut self.bq),
            sl2_mut(&mut self.wk),
            sl_mut(&mut self.bk),
            sl2_mut(&mut self.wv),
            sl_mut(&mut self.bv),
            sl2_mut(&mut self.wo),
            sl_mut(&mut self.bo),
            sl_mut(&mut self.ln2_g),
            sl_mut(&mut self.ln2_b),
            sl2_mut(&mut self.w1),
            sl_mut(&mut self.b1),
            sl2_mut(&mut self.w2),
            sl_mut(&mut self.b2),
        ]
    }
}

fn sl<T>(a: &Array1<T>) -> &[T] {
    a.as_slice().expect("standard layout")
}
fn sl2<T>(a: &Array2<T>) -> &[T] {
    a.as_slice().expect("standard layout")
}
fn sl_mut<T>(a: &mut Array1<T>) -> &mut [T] {
    a.as_slice_mut().expect("standard layout")
}
fn sl2_mut<T>(a: &mut Array2<T>) -> &mut [T] {
    a.as_slice_mut().expect("standard layout")
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero parameters with the shapes of `config`.
    pub fn zeros(config: ModelConfig) -> Self {
        let (d, v, l, ff) = (
            config.model_dim,
            config.vocab_size,
            config.max_seq_len,
            config.ff_dim,
        );
        ModelParams {
            config,
            tok_emb: Array2::zeros((v, d)),
            pos_emb: Array2::zeros((l, d)),
            layers: (0..config.layers).map(|_| LayerParams::zeros(d, ff)).collect(),
            lnf_g: Array1::zeros(d),
            lnf_b: Array1::zeros(d),
            out_bias: Array1::zeros(v),
        }
    }

    /// Weights drawn from N(0, 0.02^2); biases zero; layer-norm gains one.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut fill = |a: &mut [T]| {
            for x in a {
                *x = T::of(normal.sample(&mut rng));
            }
        };
        fill(sl2_mut(&mut p.tok_emb));
        fill(sl2_mut(&mut p.pos_emb));
        for layer in &mut p.layers {
            for w in [&mut layer.wq, &mut layer.wk, &mut layer.wv, &mut layer.wo, &mut layer.w1, &mut layer.w2] {
                fill(sl2_mut(w));
            }
            layer.ln1_g.fill(T::one());
            layer.ln2_g.fill(T::one());
        }
        p.lnf_g.fill(T::one());
        Ok(p)
    }

    /// Every tensor as a flat row-major slice, in checkpoint order.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out = vec![sl2(&self.tok_emb), sl2(&self.pos_emb)];
        for layer in &self.layers {
            out.extend(layer.slices());
        }
        out.extend([sl(&self.lnf_g), sl(&self.lnf_b), sl(&self.out_bias)]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = vec![sl2_mut(&mut self.tok_emb), sl2_mut(&mut self.pos_emb)];
        for layer in &mut self.layers {
            out.extend(layer.slices_mut());
        }
        out.extend([
            sl_mut(&mut self.lnf_g),
            sl_mut(&mut self.lnf_b),
            sl_mut(&mut self.out_bias),
        ]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// `self += other * scale`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y * scale;
            }
        }
    }

    pub fn norm(&self) -> T {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|&x| x * x)
            .sum::<T>()
            .sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            for x in t {
                *x *= s;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let conv1 = |a: &Array1<T>| a.mapv(|x| U::of(x.to_f64().expect("finite")));
        let conv2 = |a: &Array2<T>| a.mapv(|x| U::of(x.to_f64().expect("finite")));
        ModelParams {
            config: self.config,
            tok_emb: conv2(&self.tok_emb),
            pos_emb: conv2(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_g: conv1(&l.ln1_g),
                    ln1_b: conv1(&l.ln1_b),
                    wq: conv2(&l.wq),
                    bq: conv1(&l.bq),
                    wk: conv2(&l.wk),
                    bk: conv1(&l.bk),
                    wv: conv2(&l.wv),
                    bv: conv1(&l.bv),
                    wo: conv2(&l.wo),
                    bo: conv1(&l.bo),
                    ln2_g: conv1(&l.ln2_g),
                    ln2_b: conv1(&l.ln2_b),
                    w1: conv2(&l.w1),
                    b1: conv1(&l.b1),
                    w2: conv2(&l.w2),
                    b2: conv1(&l.b2),
                })
                .collect(),
            lnf_g: conv1(&self.lnf_g),
            lnf_b: conv1(&self.lnf_b),
            out_bias: conv1(&self.out_bias),
        }
    }
}
