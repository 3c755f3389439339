//! A tiny decoder-only language model over code, used frozen during soft
//! prompt training and generation.
//!
//! Everything downstream talks to it through [`EmbeddingLm`]: embed token
//! ids, run the decoder on a matrix of input embeddings, and sample. Any model
//! that implements the trait can replace [`TinyLm`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::nn::{causal_mask, cross_entropy, normal, AdamW, AdamWConfig, CosineSchedule, EncoderBlock, LayerNorm, Linear};
use crate::tensor::{Mat, ParamId, ParamStore, Tape, Var};
use crate::text::Vocabulary;
use crate::{seeded_rng, Error, Result};

pub const CHECKPOINT_KIND: &str = "lm";

/// Embedding-level access to a causal language model.
pub trait EmbeddingLm: Sync {
    fn vocab(&self) -> &Vocabulary;
    fn embed_dim(&self) -> usize;
    /// Longest input, in rows, the model accepts.
    fn max_len(&self) -> usize;
    /// Token embeddings, one row per id, without positions.
    fn embed_tokens(&self, tape: &mut Tape, ids: &[usize]) -> Var;
    /// Next-token logits for every row of the input embeddings.
    fn logits(&self, tape: &mut Tape, x: Var) -> Var;
    /// Logits for the last row only. Defaults to [`Self::logits`].
    fn last_logits(&self, tape: &mut Tape, x: Var) -> Var {
        let l = self.logits(tape, x);
        let n = tape.shape(l).0;
        tape.slice_rows(l, n - 1, 1)
    }
}

/// `BOS description SEP`, the conditioning prefix for generation.
pub fn prompt_ids(vocab: &Vocabulary, description: &str) -> Vec<usize> {
    let mut ids = vec![Vocabulary::BOS];
    ids.extend(vocab.encode(description));
    ids.push(Vocabulary::SEP);
    ids
}

/// `code EOS`, the generation target.
pub fn target_ids(vocab: &Vocabulary, code: &str) -> Vec<usize> {
    let mut ids = vocab.encode(code);
    ids.push(Vocabulary::EOS);
    ids
}

/// Mean next-token cross-entropy over `target` given `prefix` rows (already
/// embedded: soft prompt and/or prompt tokens). The last prefix row predicts
/// the first target token.
pub fn target_loss(lm: &dyn EmbeddingLm, tape: &mut Tape, prefix: Var, target: &[usize]) -> Var {
    assert!(!target.is_empty(), "empty target");
    let p = tape.shape(prefix).0;
    let t_emb = lm.embed_tokens(tape, &target[..target.len() - 1]);
    let x = if target.len() > 1 { tape.concat_rows(&[prefix, t_emb]) } else { prefix };
    let logits = lm.logits(tape, x);
    let scored = tape.slice_rows(logits, p - 1, target.len());
    cross_entropy(tape, scored, target)
}

/// Ids that are never sampled.
const BANNED: [usize; 3] = [Vocabulary::PAD, Vocabulary::BOS, Vocabulary::SEP];

/// Picks the next id from `logits`: argmax at temperature 0 (lowest id on
/// ties), otherwise a draw from `softmax(logits / temperature)`.
pub fn pick_token(logits: &[f64], temperature: f64, rng: &mut impl Rng) -> usize {
    let allowed = |i: &usize| !BANNED.contains(i);
    if temperature <= 0.0 {
        return (0..logits.len())
            .filter(allowed)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if logits[b] >= logits[i] => Some(b),
                _ => Some(i),
            })
            .expect("vocabulary has a sampleable token");
    }
    let mx = (0..logits.len()).filter(allowed).map(|i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> =
        (0..logits.len()).map(|i| if allowed(&i) { ((logits[i] - mx) / temperature).exp() } else { 0.0 }).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if *wi > 0.0 {
            if u < *wi {
                return i;
            }
            u -= wi;
        }
    }
    (0..w.len()).rev().find(|&i| w[i] > 0.0).expect("vocabulary has a sampleable token")
}

/// Autoregressive generation after `soft_prompt` rows (optional) and the
/// embedded `prompt` ids. Stops at EOS, after `max_new` tokens, or when the
/// context is full. Returns the generated ids without EOS.
pub fn sample(
    lm: &dyn EmbeddingLm,
    soft_prompt: Option<&Mat>,
    prompt: &[usize],
    temperature: f64,
    max_new: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let mut out = Vec::new();
    let fixed = soft_prompt.map_or(0, |m| m.rows) + prompt.len();
    while out.len() < max_new && fixed + out.len() < lm.max_len() {
        let mut tape = Tape::new();
        let mut parts = Vec::with_capacity(3);
        if let Some(sp) = soft_prompt {
            parts.push(tape.constant(sp.clone()));
        }
        parts.push(lm.embed_tokens(&mut tape, prompt));
        if !out.is_empty() {
            parts.push(lm.embed_tokens(&mut tape, &out));
        }
        let x = tape.concat_rows(&parts);
        let l = lm.last_logits(&mut tape, x);
        let next = pick_token(tape.value(l).row(0), temperature, rng);
        if next == Vocabulary::EOS {
            break;
        }
        out.push(next);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_hidden: usize,
    pub max_len: usize,
    pub init_seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig { dim: 64, heads: 4, layers: 2, ff_hidden: 128, max_len: 160, init_seed: 0 }
    }
}

/// Pre-norm causal transformer with learned positions.
#[derive(Clone, Debug)]
pub struct TinyLm {
    pub config: LmConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    embed: ParamId,
    pos: ParamId,
    blocks: Vec<EncoderBlock>,
    ln: LayerNorm,
    head: Linear,
}

impl TinyLm {
    pub fn new(config: LmConfig, vocab: Vocabulary) -> Result<Self> {
        if config.dim == 0 || config.heads == 0 || !config.dim.is_multiple_of(config.heads) || config.max_len < 2 || vocab.len() < 6 {
            return Err(Error::Config("invalid language model dimensions or vocabulary".into()));
        }
        let mut rng = seeded_rng(config.init_seed, 0x1a00);
        let mut store = ParamStore::new();
        let d = config.dim;
        let embed = store.add("embed", normal(vocab.len(), d, 0.3, &mut rng));
        let pos = store.add("pos", normal(config.max_len, d, 0.02, &mut rng));
        let blocks = (0..config.layers)
            .map(|l| EncoderBlock::with_hidden(&mut store, &format!("block{l}"), d, config.heads, config.ff_hidden, &mut rng))
            .collect();
        let ln = LayerNorm::new(&mut store, "ln", d);
        let head = Linear::new(&mut store, "head", d, vocab.len(), &mut rng);
        Ok(TinyLm { config, vocab, store, embed, pos, blocks, ln, head })
    }

    fn hidden(&self, tape: &mut Tape, x: Var) -> Var {
        let n = tape.shape(x).0;
        assert!(n <= self.config.max_len, "input of {n} rows exceeds max_len {}", self.config.max_len);
        let p = tape.param(&self.store, self.pos);
        let pos = tape.slice_rows(p, 0, n);
        let mut h = tape.add(x, pos);
        let mask = causal_mask(n);
        for b in &self.blocks {
            h = b.forward(tape, &self.store, h, Some(&mask));
        }
        self.ln.forward(tape, &self.store, h)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, serde_json::to_value(self.config).expect("config serializes"), self.store.entries());
        ck.extra = serde_json::json!({ "vocab": self.vocab });
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut vocab: Vocabulary = serde_json::from_value(ck.extra["vocab"].clone())?;
        vocab.reindex();
        let mut lm = TinyLm::new(ck.config_as()?, vocab)?;
        lm.store.load_entries(&ck.parameters).map_err(Error::Schema)?;
        Ok(lm)
    }
}

impl EmbeddingLm for TinyLm {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn embed_dim(&self) -> usize {
        self.config.dim
    }

    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn embed_tokens(&self, tape: &mut Tape, ids: &[usize]) -> Var {
        let e = tape.param(&self.store, self.embed);
        tape.gather_rows(e, ids)
    }

    fn logits(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.hidden(tape, x);
        self.head.forward(tape, &self.store, h)
    }

    fn last_logits(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.hidden(tape, x);
        let n = tape.shape(h).0;
        let last = tape.slice_rows(h, n - 1, 1);
        self.head.forward(tape, &self.store, last)
    }
}

/// A description and the code it describes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeExample {
    pub description: String,
    pub code: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_ratio: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig { epochs: 20, batch_size: 8, lr: 3e-3, min_lr: 1e-4, warmup_ratio: 0.03, optimizer: AdamWConfig::default(), seed: 0 }
    }
}

/// Fits a vocabulary on the examples and trains the model to continue
/// `BOS description SEP` with `code EOS`. Returns the model and per-epoch
/// mean loss.
pub fn train_lm(examples: &[CodeExample], config: LmConfig, cfg: &LmTrainConfig) -> Result<(TinyLm, Vec<f64>)> {
    if examples.is_empty() || cfg.batch_size == 0 || cfg.epochs == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("language model training needs examples, a positive batch size, epochs and lr".into()));
    }
    let vocab = Vocabulary::fit(examples.iter().flat_map(|e| [e.description.as_str(), e.code.as_str()]), 1);
    let mut lm = TinyLm::new(config, vocab)?;
    let seqs: Vec<(Vec<usize>, Vec<usize>)> = examples
        .iter()
        .map(|e| (prompt_ids(&lm.vocab, &e.description), target_ids(&lm.vocab, &e.code)))
        .filter(|(p, t)| p.len() + t.len() <= config.max_len)
        .collect();
    if seqs.is_empty() {
        return Err(Error::Config(format!("every example exceeds max_len {}", config.max_len)));
    }
    let per_epoch = seqs.len().div_ceil(cfg.batch_size);
    let schedule = CosineSchedule::new(cfg.lr, cfg.min_lr, cfg.warmup_ratio, cfg.epochs * per_epoch);
    let mut opt = AdamW::new(&lm.store, cfg.optimizer);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut seeded_rng(cfg.seed, 0x3000 + epoch as u64));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            tape.train(&lm.store);
            let losses: Vec<Var> = batch
                .iter()
                .map(|&i| {
                    let (p, t) = &seqs[i];
                    let prefix = lm.embed_tokens(&mut tape, p);
                    target_loss(&lm, &mut tape, prefix, t)
                })
                .collect();
            let sum = tape.concat_rows(&losses);
            let loss = tape.mean_all(sum);
            total += tape.value(loss).item() * batch.len() as f64;
            let grads = tape.backward(loss);
            opt.step(&mut lm.store, &grads, schedule.lr(step));
            step += 1;
        }
        let mean = total / seqs.len() as f64;
        log::info!("lm epoch {}/{}: loss {mean:.4}", epoch + 1, cfg.epochs);
        trace.push(mean);
    }
    Ok((lm, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TinyLm {
        let vocab = Vocabulary::fit(["module m ( input a , output y ) ; assign y = a ; endmodule an inverter"], 1);
        TinyLm::new(LmConfig { dim: 8, heads: 2, ff_hidden: 16, max_len: 40, ..Default::default() }, vocab).unwrap()
    }

    #[test]
    fn greedy_is_deterministic_and_skips_banned() {
        let lm = tiny();
        let p = prompt_ids(&lm.vocab, "an inverter");
        let a = sample(&lm, None, &p, 0.0, 12, &mut seeded_rng(0, 0));
        let b = sample(&lm, None, &p, 0.0, 12, &mut seeded_rng(99, 5));
        assert_eq!(a, b);
        assert!(a.iter().all(|i| !BANNED.contains(i) && *i != Vocabulary::EOS));
    }

    #[test]
    fn pick_token_rules() {
        let mut rng = seeded_rng(1, 1);
        assert_eq!(pick_token(&[9.0, 0.0, 9.0, 1.0, 1.0, 0.5], 0.0, &mut rng), 3);
        let counts = (0..2000).fold([0usize; 6], |mut c, _| {
            c[pick_token(&[5.0, 0.0, 5.0, 2.0_f64.ln(), 5.0, 0.0], 1.0, &mut rng)] += 1;
            c
        });
        assert_eq!(counts[0] + counts[2] + counts[4], 0);
        // Allowed ids 1, 3, 5 with weights 1:2:1.
        assert!((counts[3] as f64 / 2000.0 - 0.5).abs() < 0.05, "{counts:?}");
    }

    #[test]
    fn uniform_logits_give_log_vocab_loss() {
        let lm = tiny();
        let mut flat = lm.clone();
        let head_w = flat.store.find("head.weight").unwrap();
        let rows = flat.store.get(head_w).rows;
        *flat.store.get_mut(head_w) = Mat::zeros(rows, flat.vocab.len());
        let mut tape = Tape::new();
        let p = flat.embed_tokens(&mut tape, &[Vocabulary::BOS]);
        let l = target_loss(&flat, &mut tape, p, &[5, 6, Vocabulary::EOS]);
        assert!((tape.value(l).item() - (flat.vocab.len() as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let lm = tiny();
        let back = TinyLm::from_checkpoint(&lm.to_checkpoint()).unwrap();
        assert_eq!(back.store.digest(), lm.store.digest());
        assert_eq!(back.vocab.encode("assign y"), lm.vocab.encode("assign y"));
    }
}
