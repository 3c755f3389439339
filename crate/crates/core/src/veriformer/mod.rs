//! VeriFormer: learnable query tokens that read a graph embedding through
//! cross-attention and share their self-attention weights with a code
//! transformer. Stage 1 aligns graphs with code (contrastive, matching and
//! generation objectives); stage 2 projects the query outputs into the frozen
//! language model's embedding space as a soft prompt.

mod train;

pub use train::{
    matching_accuracy, stage1_train, stage1_train_pairs, stage2_sample_loss, stage2_train, Stage1Config, Stage1Pair, Stage1Trace, Stage2Config, Stage2Sample, Stage2Trace,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::nn::{normal, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{Mat, ParamId, ParamStore, Tape, Var, NEG_INF_MASK};
use crate::text::HashedVocab;
use crate::{seeded_rng, Error, Result};

pub const STAGE1_KIND: &str = "veriformer_stage1";
pub const STAGE2_KIND: &str = "veriformer_stage2";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VeriFormerConfig {
    /// Q, the number of learnable query tokens.
    pub num_queries: usize,
    /// d_v.
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_hidden: usize,
    /// Dimension of incoming graph embeddings.
    pub graph_dim: usize,
    /// T_g, tokens a graph embedding expands into.
    pub graph_tokens: usize,
    pub code_vocab: HashedVocab,
    pub max_code_len: usize,
    /// d_llm, the frozen language model's embedding width.
    pub lm_dim: usize,
    pub init_seed: u64,
}

impl Default for VeriFormerConfig {
    fn default() -> Self {
        VeriFormerConfig {
            num_queries: 8,
            dim: 64,
            heads: 4,
            layers: 2,
            ff_hidden: 128,
            graph_dim: 128,
            graph_tokens: 8,
            code_vocab: HashedVocab::new(512, 1),
            max_code_len: 96,
            lm_dim: 64,
            init_seed: 0,
        }
    }
}

impl VeriFormerConfig {
    fn validate(&self) -> Result<()> {
        let dims = [self.num_queries, self.dim, self.heads, self.ff_hidden, self.graph_dim, self.graph_tokens, self.max_code_len, self.lm_dim];
        if dims.contains(&0) || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config("VeriFormer dimensions must be positive and dim divisible by heads".into()));
        }
        Ok(())
    }
}

/// Who may attend to whom in a joint `[queries; code]` sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttnMode {
    /// Queries see queries, code sees code.
    Unimodal,
    /// Everyone sees everyone.
    Bidirectional,
    /// Queries see queries; code position `t` sees every query and code
    /// positions `0..=t`.
    MultimodalCausal,
}

/// Additive mask over `[queries; code]`. Padding ids (0) are hidden as keys.
pub fn attention_mask(num_queries: usize, code: &[usize], mode: AttnMode) -> Mat {
    let n = num_queries + code.len();
    let mut m = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let (iq, jq) = (i < num_queries, j < num_queries);
            let visible = match mode {
                AttnMode::Unimodal => iq == jq,
                AttnMode::Bidirectional => true,
                AttnMode::MultimodalCausal => {
                    if iq {
                        jq
                    } else {
                        jq || j <= i
                    }
                }
            };
            let pad = !jq && code[j - num_queries] == HashedVocab::PAD;
            if !visible || pad {
                m.set(i, j, NEG_INF_MASK);
            }
        }
    }
    m
}

/// One layer: shared self-attention over the whole sequence, cross-attention
/// from query rows to graph tokens, feed-forward.
#[derive(Clone, Debug)]
pub struct VfBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl VfBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &VeriFormerConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        VfBlock {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, cfg.heads, rng),
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), d),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, cfg.heads, rng),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, cfg.ff_hidden, rng),
        }
    }
}

/// Parameter name prefixes kept by the stage-2 model: the query bank, the
/// graph expansion, the shared core and the projection.
pub fn is_graph_side(name: &str) -> bool {
    ["bank", "graph.", "core.", "proj."].iter().any(|p| name.starts_with(p))
}

#[derive(Clone, Debug)]
pub struct VeriFormer {
    pub config: VeriFormerConfig,
    pub store: ParamStore,
    pub bank: ParamId,
    pub expand: Linear,
    pub blocks: Vec<VfBlock>,
    pub ln_out: LayerNorm,
    pub code_embed: ParamId,
    pub code_pos: ParamId,
    pub match_head: Linear,
    pub gen_head: Linear,
    pub proj: Linear,
}

impl VeriFormer {
    pub fn new(config: VeriFormerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(config.init_seed, 0x0f00);
        let mut store = ParamStore::new();
        let d = config.dim;
        let bank = store.add("bank", normal(config.num_queries, d, 0.5, &mut rng));
        let expand = Linear::new(&mut store, "graph.expand", config.graph_dim, config.graph_tokens * d, &mut rng);
        let blocks = (0..config.layers).map(|l| VfBlock::new(&mut store, &format!("core.block{l}"), &config, &mut rng)).collect();
        let ln_out = LayerNorm::new(&mut store, "core.ln_out", d);
        let code_embed = store.add("code.embed", normal(config.code_vocab.size, d, 0.3, &mut rng));
        let code_pos = store.add("code.pos", normal(config.max_code_len, d, 0.02, &mut rng));
        let match_head = Linear::new(&mut store, "head.match", d, 1, &mut rng);
        let gen_head = Linear::new(&mut store, "head.gen", d, config.code_vocab.size, &mut rng);
        let proj = Linear::new(&mut store, "proj", d, config.lm_dim, &mut rng);
        Ok(VeriFormer { config, store, bank, expand, blocks, ln_out, code_embed, code_pos, match_head, gen_head, proj })
    }

    /// Code token ids from the hashed code vocabulary, truncated to `max_code_len`.
    pub fn tokenize_code(&self, code: &str) -> Vec<usize> {
        self.config.code_vocab.encode(code, self.config.max_code_len)
    }

    pub(crate) fn check_graph(&self, g: &[f64]) -> Result<()> {
        if g.len() != self.config.graph_dim {
            return Err(Error::Shape(format!("graph embedding dim {} != {}", g.len(), self.config.graph_dim)));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::DegenerateInput("non-finite graph embedding".into()));
        }
        Ok(())
    }

    pub(crate) fn check_code(&self, code: &[usize], min_len: usize) -> Result<()> {
        if code.iter().filter(|&&c| c != HashedVocab::PAD).count() < min_len {
            return Err(Error::EmptyCode);
        }
        if code.len() > self.config.max_code_len || code.iter().any(|&c| c >= self.config.code_vocab.size) {
            return Err(Error::Shape(format!("code of {} tokens exceeds max_code_len or vocabulary", code.len())));
        }
        Ok(())
    }

    /// The graph token sequence `T_g × d_v` for a `1 × d_g` embedding.
    pub fn graph_tokens(&self, tape: &mut Tape, g: Var) -> Var {
        let flat = self.expand.forward(tape, &self.store, g);
        tape.reshape(flat, self.config.graph_tokens, self.config.dim)
    }

    /// Runs the core on `[queries; code]` (queries omitted when
    /// `with_queries` is false). Cross-attention updates query rows only, and
    /// only when graph tokens are given.
    pub fn encode(&self, tape: &mut Tape, g_tokens: Option<Var>, code: &[usize], mode: AttnMode, with_queries: bool) -> Var {
        let s = &self.store;
        let q = if with_queries { self.config.num_queries } else { 0 };
        let mut parts = Vec::with_capacity(2);
        if with_queries {
            parts.push(tape.param(s, self.bank));
        }
        if !code.is_empty() {
            let e = tape.param(s, self.code_embed);
            let p = tape.param(s, self.code_pos);
            let tok = tape.gather_rows(e, code);
            let pos = tape.slice_rows(p, 0, code.len());
            parts.push(tape.add(tok, pos));
        }
        let mut x = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) };
        let mask = attention_mask(q, code, mode);
        for b in &self.blocks {
            let h = b.ln_self.forward(tape, s, x);
            let a = b.self_attn.forward(tape, s, h, h, Some(&mask));
            x = tape.add(x, a);
            if let (Some(gt), true) = (g_tokens, q > 0) {
                let xq = tape.slice_rows(x, 0, q);
                let hq = b.ln_cross.forward(tape, s, xq);
                let c = b.cross_attn.forward(tape, s, hq, gt, None);
                let xq = tape.add(xq, c);
                x = if code.is_empty() {
                    xq
                } else {
                    let rest = tape.slice_rows(x, q, code.len());
                    tape.concat_rows(&[xq, rest])
                };
            }
            let h = b.ln_ff.forward(tape, s, x);
            let f = b.ff.forward(tape, s, h);
            x = tape.add(x, f);
        }
        self.ln_out.forward(tape, s, x)
    }

    /// 𝒢: the `Q × d_v` query outputs for one graph embedding (`1 × d_g`).
    pub fn forward_graph(&self, tape: &mut Tape, g: Var) -> Var {
        let gt = self.graph_tokens(tape, g);
        self.encode(tape, Some(gt), &[], AttnMode::Unimodal, true)
    }

    /// 𝒞: mean of the non-padding code outputs under the code-only
    /// bidirectional mask, `1 × d_v`.
    pub fn forward_code(&self, tape: &mut Tape, code: &[usize]) -> Result<Var> {
        self.check_code(code, 1)?;
        let out = self.encode(tape, None, code, AttnMode::Unimodal, false);
        let keep: Vec<usize> = (0..code.len()).filter(|&i| code[i] != HashedVocab::PAD).collect();
        let rows = if keep.len() == code.len() { out } else { tape.gather_rows(out, &keep) };
        Ok(tape.mean_rows(rows))
    }

    /// Per-query matching logits `Q × 1` under the bidirectional mask.
    pub fn match_logits(&self, tape: &mut Tape, g: Var, code: &[usize]) -> Result<Var> {
        self.check_code(code, 1)?;
        let gt = self.graph_tokens(tape, g);
        let out = self.encode(tape, Some(gt), code, AttnMode::Bidirectional, true);
        let qo = tape.slice_rows(out, 0, self.config.num_queries);
        Ok(self.match_head.forward(tape, &self.store, qo))
    }

    /// Matching score: the mean of the per-query logits.
    pub fn match_score(&self, tape: &mut Tape, g: Var, code: &[usize]) -> Result<Var> {
        let l = self.match_logits(tape, g, code)?;
        Ok(tape.mean_rows(l))
    }

    /// Next-token logits at every code position under the multimodal causal
    /// mask; row `t` predicts code token `t + 1`.
    pub fn code_logits(&self, tape: &mut Tape, g: Var, code: &[usize]) -> Result<Var> {
        self.check_code(code, 1)?;
        let gt = self.graph_tokens(tape, g);
        let out = self.encode(tape, Some(gt), code, AttnMode::MultimodalCausal, true);
        let co = tape.slice_rows(out, self.config.num_queries, code.len());
        Ok(self.gen_head.forward(tape, &self.store, co))
    }

    /// Mean next-token cross-entropy over the code given the graph.
    pub fn gcg_loss(&self, tape: &mut Tape, g: Var, code: &[usize]) -> Result<Var> {
        self.check_code(code, 2)?;
        let logits = self.code_logits(tape, g, code)?;
        let n = code.len();
        let scored = tape.slice_rows(logits, 0, n - 1);
        Ok(crate::nn::cross_entropy(tape, scored, &code[1..]))
    }

    pub fn project(&self, tape: &mut Tape, g_out: Var) -> Var {
        self.proj.forward(tape, &self.store, g_out)
    }

    /// 𝒢 for a plain embedding vector.
    pub fn graph_outputs(&self, g_emb: &[f64]) -> Result<Mat> {
        self.check_graph(g_emb)?;
        let mut tape = Tape::new();
        let g = tape.constant(Mat::row_vector(g_emb.to_vec()));
        let o = self.forward_graph(&mut tape, g);
        Ok(tape.value(o).clone())
    }

    /// The `Q × d_llm` soft prompt for a graph embedding.
    pub fn soft_prompt(&self, g_emb: &[f64]) -> Result<Mat> {
        self.check_graph(g_emb)?;
        let mut tape = Tape::new();
        let g = tape.constant(Mat::row_vector(g_emb.to_vec()));
        let o = self.forward_graph(&mut tape, g);
        let p = self.project(&mut tape, o);
        Ok(tape.value(p).clone())
    }

    pub fn to_checkpoint(&self, kind: &str) -> Checkpoint {
        let config = serde_json::to_value(self.config).expect("config serializes");
        match kind {
            STAGE2_KIND => Checkpoint::new(kind, config, self.store.entries_where(is_graph_side)),
            _ => Checkpoint::new(STAGE1_KIND, config, self.store.entries()),
        }
    }

    /// Loads either stage. A stage-2 checkpoint carries only graph-side
    /// parameters; code-side parameters keep their initial values.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != STAGE1_KIND && ck.kind != STAGE2_KIND {
            return Err(Error::Schema(format!("expected a VeriFormer checkpoint, found `{}`", ck.kind)));
        }
        let mut vf = VeriFormer::new(ck.config_as()?)?;
        vf.store.load_entries(&ck.parameters).map_err(Error::Schema)?;
        Ok(vf)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        let ck = Checkpoint::from_json(&text, &ck.kind)?;
        Self::from_checkpoint(&ck)
    }
}

/// Matrix `B × B` of alignment scores: entry `(i, j)` is the largest cosine
/// between any query output of graph `i` and pooled code `j`.
pub fn alignment_scores(tape: &mut Tape, g_outs: &[Var], codes: Var) -> Var {
    let cn = tape.l2_normalize_rows(codes);
    let ct = tape.transpose(cn);
    let rows: Vec<Var> = g_outs
        .iter()
        .map(|&g| {
            let gn = tape.l2_normalize_rows(g);
            let sims = tape.matmul(gn, ct);
            tape.max_rows(sims)
        })
        .collect();
    tape.concat_rows(&rows)
}

/// Symmetric InfoNCE over [`alignment_scores`]: graph→code and code→graph
/// averaged, aligned pairs on the diagonal.
pub fn gcc_loss(tape: &mut Tape, g_outs: &[Var], codes: Var, tau: f64) -> Result<Var> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    if g_outs.len() != tape.shape(codes).0 || g_outs.len() < 2 {
        return Err(Error::Shape(format!("{} graphs for {} codes; need a batch of at least 2", g_outs.len(), tape.shape(codes).0)));
    }
    let s = alignment_scores(tape, g_outs, codes);
    gcc_from_scores(tape, s, tau)
}

/// The contrastive loss on a precomputed `B × B` score matrix.
pub fn gcc_from_scores(tape: &mut Tape, scores: Var, tau: f64) -> Result<Var> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    let s = tape.scale(scores, 1.0 / tau);
    let st = tape.transpose(s);
    let a = crate::encoder::diagonal_nce(tape, s);
    let b = crate::encoder::diagonal_nce(tape, st);
    let sum = tape.add(a, b);
    Ok(tape.scale(sum, 0.5))
}

/// `(graph, code, label)` triples for the matching objective: every aligned
/// pair, plus for each graph the highest-scoring wrong code and one uniformly
/// drawn wrong code.
pub fn select_negatives(scores: &Mat, rng: &mut impl Rng) -> Vec<(usize, usize, f64)> {
    let b = scores.rows;
    let mut out = Vec::with_capacity(3 * b);
    for i in 0..b {
        out.push((i, i, 1.0));
        if b < 2 {
            continue;
        }
        let hard = (0..b)
            .filter(|&j| j != i)
            .fold(None, |best: Option<usize>, j| match best {
                Some(k) if scores.get(i, k) >= scores.get(i, j) => Some(k),
                _ => Some(j),
            })
            .expect("batch has another member");
        out.push((i, hard, 0.0));
        let mut r = rng.random_range(0..b - 1);
        if r >= i {
            r += 1;
        }
        out.push((i, r, 0.0));
    }
    out
}

/// Binary cross-entropy of matching scores over labelled `(graph, code)`
/// pairs. `graphs` are `1 × d_g` embeddings.
pub fn gcm_loss(vf: &VeriFormer, tape: &mut Tape, graphs: &[Var], codes: &[Vec<usize>], pairs: &[(usize, usize, f64)]) -> Result<Var> {
    if pairs.is_empty() || pairs.iter().all(|p| p.2 == pairs[0].2) {
        return Err(Error::DegenerateBatch("matching batch needs both matched and mismatched pairs".into()));
    }
    let scores = pairs.iter().map(|&(g, c, _)| vf.match_score(tape, graphs[g], &codes[c])).collect::<Result<Vec<_>>>()?;
    let s = tape.concat_rows(&scores);
    let labels: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    Ok(tape.bce_with_logits(s, &labels))
}

/// How description rows and prompt rows are paired for the KL term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowPairing {
    /// Compare the row-mean of each side: one distribution per sample.
    RowMean,
    /// Pair row `r` with row `r` for the first `min(N, Q)` rows.
    Truncate,
}

/// `Σ_j P_j (ln P_j − ln R_j)` averaged over compared rows, where `P` and `R`
/// are row-wise softmaxes of `z` and `g` over the feature dimension.
pub fn kl_distribution_loss(tape: &mut Tape, z: Var, g: Var, pairing: RowPairing) -> Var {
    let (zr, gr) = match pairing {
        RowPairing::RowMean => (tape.mean_rows(z), tape.mean_rows(g)),
        RowPairing::Truncate => {
            let r = tape.shape(z).0.min(tape.shape(g).0);
            (tape.slice_rows(z, 0, r), tape.slice_rows(g, 0, r))
        }
    };
    let lp = tape.log_softmax_rows(zr);
    let lq = tape.log_softmax_rows(gr);
    let p = tape.exp(lp);
    let d = tape.sub(lp, lq);
    let prod = tape.mul(p, d);
    let per_row = tape.sum_cols(prod);
    tape.mean_all(per_row)
}

/// [`kl_distribution_loss`] on plain matrices.
pub fn kl_distribution(z: &Mat, g: &Mat, pairing: RowPairing) -> Result<f64> {
    if z.cols != g.cols {
        return Err(Error::Shape(format!("feature dims differ: {} vs {}", z.cols, g.cols)));
    }
    if z.rows == 0 || g.rows == 0 {
        return Err(Error::Shape("empty input".into()));
    }
    let mut t = Tape::new();
    let (a, b) = (t.constant(z.clone()), t.constant(g.clone()));
    let l = kl_distribution_loss(&mut t, a, b, pairing);
    Ok(t.value(l).item())
}

/// Applies the projection to a `Q × d_v` matrix.
pub fn project_soft_prompt(vf: &VeriFormer, g_out: &Mat) -> Result<Mat> {
    if g_out.cols != vf.config.dim {
        return Err(Error::Shape(format!("query outputs have {} columns, projection expects {}", g_out.cols, vf.config.dim)));
    }
    let mut t = Tape::new();
    let x = t.constant(g_out.clone());
    let p = vf.project(&mut t, x);
    Ok(t.value(p).clone())
}
