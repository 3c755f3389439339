use rand::Rng;

use super::{LayerNorm, Linear};
use crate::tensor::{Mat, ParamStore, Tape, Var, NEG_INF_MASK};

/// Multi-head scaled dot-product attention. Query and key/value sequences may
/// differ, which makes the same type serve self- and cross-attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
            dim,
        }
    }

    /// `mask`, when given, is added to the `q_len × kv_len` score matrix of
    /// every head; use [`NEG_INF_MASK`] to hide a key.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x_q: Var, x_kv: Var, mask: Option<&Mat>) -> Var {
        let q = self.q.forward(tape, store, x_q);
        let k = self.k.forward(tape, store, x_kv);
        let v = self.v.forward(tape, store, x_kv);
        let mask = mask.map(|m| {
            assert_eq!(m.shape(), (tape.shape(x_q).0, tape.shape(x_kv).0), "attention mask shape");
            tape.constant(m.clone())
        });
        let cat = self.attend(tape, q, k, v, mask);
        self.out.forward(tape, store, cat)
    }

    /// Attention over already projected `q`, `k`, `v`. Returns the heads
    /// concatenated, before the output projection.
    pub fn attend(&self, tape: &mut Tape, q: Var, k: Var, v: Var, mask: Option<Var>) -> Var {
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (tape.slice_cols(q, h * dh, dh), tape.slice_cols(k, h * dh, dh), tape.slice_cols(v, h * dh, dh))
            };
            let kt = tape.transpose(kh);
            let s = tape.matmul(qh, kt);
            let mut s = tape.scale(s, scale);
            if let Some(m) = mask {
                s = tape.add(s, m);
            }
            let p = tape.softmax_rows(s);
            outs.push(tape.matmul(p, vh));
        }
        if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)
        }
    }

    /// Self-attention inside each `(start, len)` segment of the stacked rows
    /// of `x`. Rows never attend across segments.
    pub fn forward_segments(&self, tape: &mut Tape, store: &ParamStore, x: Var, segments: &[(usize, usize)]) -> Var {
        let q = self.q.forward(tape, store, x);
        let k = self.k.forward(tape, store, x);
        let v = self.v.forward(tape, store, x);
        let parts: Vec<Var> = segments
            .iter()
            .map(|&(start, len)| {
                let (qs, ks, vs) = (tape.slice_rows(q, start, len), tape.slice_rows(k, start, len), tape.slice_rows(v, start, len));
                self.attend(tape, qs, ks, vs, None)
            })
            .collect();
        let cat = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) };
        self.out.forward(tape, store, cat)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.up.forward(tape, store, x);
        let h = tape.relu(h);
        self.down.forward(tape, store, h)
    }
}

/// Pre-norm transformer block: self-attention then feed-forward, both residual.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        EncoderBlock {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, 4 * dim, rng),
        }
    }

    pub fn with_hidden(store: &mut ParamStore, name: &str, dim: usize, heads: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        EncoderBlock {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, hidden, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mask: Option<&Mat>) -> Var {
        let h = self.ln_attn.forward(tape, store, x);
        let a = self.attn.forward(tape, store, h, h, mask);
        let x = tape.add(x, a);
        let h = self.ln_ff.forward(tape, store, x);
        let f = self.ff.forward(tape, store, h);
        tape.add(x, f)
    }

    /// [`Self::forward`] over stacked sequences, attention confined to each segment.
    pub fn forward_segments(&self, tape: &mut Tape, store: &ParamStore, x: Var, segments: &[(usize, usize)]) -> Var {
        let h = self.ln_attn.forward(tape, store, x);
        let a = self.attn.forward_segments(tape, store, h, segments);
        let x = tape.add(x, a);
        let h = self.ln_ff.forward(tape, store, x);
        let f = self.ff.forward(tape, store, h);
        tape.add(x, f)
    }
}

/// `segments.len() × total` averaging matrix: row `i` holds `1/len` over
/// segment `i`.
pub fn segment_mean_matrix(segments: &[(usize, usize)], total: usize) -> Mat {
    let mut m = Mat::zeros(segments.len(), total);
    for (i, &(start, len)) in segments.iter().enumerate() {
        for c in start..start + len {
            m.set(i, c, 1.0 / len as f64);
        }
    }
    m
}

/// Lower-triangular visibility: row `i` sees columns `0..=i`.
pub fn causal_mask(n: usize) -> Mat {
    let mut m = Mat::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            m.set(i, j, NEG_INF_MASK);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn causal_block_ignores_future_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let block = EncoderBlock::new(&mut store, "b", 8, 2, &mut rng);
        let x = crate::nn::normal(5, 8, 1.0, &mut rng);
        let mut x2 = x.clone();
        x2.row_mut(4).iter_mut().for_each(|v| *v += 3.0);
        let mask = causal_mask(5);
        let run = |m: &Mat| {
            let mut t = Tape::new();
            let v = t.constant(m.clone());
            let y = block.forward(&mut t, &store, v, Some(&mask));
            t.value(y).clone()
        };
        let (a, b) = (run(&x), run(&x2));
        for r in 0..4 {
            assert_eq!(a.row(r), b.row(r));
        }
        assert_ne!(a.row(4), b.row(4));
    }

    #[test]
    fn segments_match_separate_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let block = EncoderBlock::new(&mut store, "b", 8, 2, &mut rng);
        let (x1, x2) = (crate::nn::normal(3, 8, 1.0, &mut rng), crate::nn::normal(4, 8, 1.0, &mut rng));
        let mut t = Tape::new();
        let a = t.constant(x1);
        let b = t.constant(x2);
        let (ya, yb) = (block.forward(&mut t, &store, a, None), block.forward(&mut t, &store, b, None));
        let both = t.concat_rows(&[a, b]);
        let y = block.forward_segments(&mut t, &store, both, &[(0, 3), (3, 4)]);
        let want = Mat::stack_rows(&[t.value(ya).clone(), t.value(yb).clone()]);
        assert!(t.value(y).max_abs_diff(&want) < 1e-12);
    }
}
