//! Layers, optimiser and schedule shared by every trainable model.

mod attention;
mod optim;

pub use attention::{causal_mask, segment_mean_matrix, EncoderBlock, FeedForward, MultiHeadAttention};
pub use optim::{AdamW, AdamWConfig, CosineSchedule};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Mat, ParamId, ParamStore, Tape, Var};

/// Uniform Xavier/Glorot initialisation.
pub fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-a..a)).collect())
}

pub fn normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Mat {
    let d = Normal::new(0.0, std).expect("finite std");
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| d.sample(rng)).collect())
}

/// `y = x W + b`, with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(in_dim, out_dim, rng));
        let bias = Some(store.add(format!("{name}.bias"), Mat::zeros(1, out_dim)));
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(in_dim, out_dim, rng));
        Linear { weight, bias: None, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Layer normalisation with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Mat::filled(1, dim, 1.0));
        let bias = store.add(format!("{name}.bias"), Mat::zeros(1, dim));
        LayerNorm { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let n = tape.layer_norm(x, Self::EPS);
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let y = tape.mul_row(n, g);
        tape.add_row(y, b)
    }
}

/// Two linear layers with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            first: Linear::new(store, &format!("{name}.0"), in_dim, hidden, rng),
            second: Linear::new(store, &format!("{name}.1"), hidden, out_dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.first.forward(tape, store, x);
        let h = tape.relu(h);
        self.second.forward(tape, store, h)
    }
}

/// Mean squared error between two equally shaped values.
pub fn mse(tape: &mut Tape, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let sq = tape.mul(d, d);
    tape.mean_all(sq)
}

/// Mean next-token cross-entropy of `logits` (one row per position) against
/// `targets`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Var {
    let lp = tape.log_softmax_rows(logits);
    let picked = tape.pick_cols(lp, targets);
    let m = tape.mean_all(picked);
    tape.scale(m, -1.0)
}
