//! Structure-aware retrieval-augmented Verilog generation at desk scale.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`netlist`] parses a Verilog subset, elaborates each module into a
//!    data-path graph and deduplicates the corpus.
//! 2. [`encoder`] embeds graphs with stacked GINE convolutions trained
//!    contrastively on augmented views.
//! 3. [`retriever`] maps hardware descriptions to graph embeddings through a
//!    dual encoder distilled from a cross-attention teacher.
//! 4. [`veriformer`] turns a retrieved graph embedding into soft-prompt rows
//!    for a frozen language model ([`lm`]).
//! 5. [`harness`] samples code, runs checkers and reports pass@k.
//!
//! All models train on [`tensor::Tape`], a small reverse-mode differentiator
//! over dense `f64` matrices.

// `!(x > 0.0)` is the NaN-rejecting form; index loops mirror matrix math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod harness;
pub mod lm;
pub mod netlist;
pub mod nn;
pub mod retriever;
pub mod tensor;
pub mod text;
pub mod toy;
pub mod veriformer;

pub use error::{Error, Result};
pub use exec::Exec;

/// ChaCha8 seeded with `seed`, on an independent `stream`.
pub fn seeded_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
