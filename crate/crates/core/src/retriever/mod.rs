//! Description-to-graph retrieval. A cross-attention teacher scores
//! (description, graph embedding) pairs jointly; a dual-encoder student is
//! distilled from it so graph vectors can be computed once and indexed.

mod index;
mod train;

pub use index::{build_index, retrieve, Backend, Hit, RetrievalIndex, VectorSearch, INDEX_SCHEMA_VERSION};
pub use train::{
    distill_student, mse_to_teacher, recall_at_k, train_teacher, PairSet, RetrieverTrainConfig, StudentTrace, TeacherTrace,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::nn::{normal, segment_mean_matrix, EncoderBlock, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::tensor::{cosine, Mat, ParamId, ParamStore, Tape, Var};
use crate::text::HashedVocab;
use crate::{seeded_rng, Error, Exec, Result};

pub const TEACHER_KIND: &str = "retriever_teacher";
pub const STUDENT_KIND: &str = "retriever_student";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrieverConfig {
    pub vocab: HashedVocab,
    /// Longer descriptions are truncated.
    pub max_len: usize,
    pub text_dim: usize,
    pub heads: usize,
    pub text_layers: usize,
    pub ff_hidden: usize,
    /// Dimension of the incoming graph embeddings.
    pub graph_dim: usize,
    /// Shared output dimension of both towers.
    pub out_dim: usize,
    /// Tokens a graph embedding is expanded into for cross-attention.
    pub graph_tokens: usize,
    pub init_seed: u64,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        RetrieverConfig {
            vocab: HashedVocab::new(1024, 0),
            max_len: 48,
            text_dim: 64,
            heads: 4,
            text_layers: 2,
            ff_hidden: 128,
            graph_dim: 128,
            out_dim: 128,
            graph_tokens: 8,
            init_seed: 0,
        }
    }
}

impl RetrieverConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.max_len, self.text_dim, self.heads, self.ff_hidden, self.graph_dim, self.out_dim, self.graph_tokens];
        if dims.contains(&0) || self.vocab.size < 2 {
            return Err(Error::Config("retriever dimensions must be positive".into()));
        }
        if !self.text_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("text_dim {} not divisible by {} heads", self.text_dim, self.heads)));
        }
        Ok(())
    }

    /// Hashed token ids, truncated to `max_len`.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let ids = self.vocab.encode(text, self.max_len);
        if ids.is_empty() {
            return Err(Error::EmptyQuery);
        }
        Ok(ids)
    }
}

fn segments_of(lens: impl IntoIterator<Item = usize>) -> Vec<(usize, usize)> {
    let mut start = 0;
    lens.into_iter()
        .map(|l| {
            let s = (start, l);
            start += l;
            s
        })
        .collect()
}

/// Hashed-token embedding, a small transformer encoder, mean pooling and a
/// projection to `out_dim`.
#[derive(Clone, Debug)]
pub struct TextEncoderTower {
    pub embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub ln: LayerNorm,
    pub head: Linear,
}

impl TextEncoderTower {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &RetrieverConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.text_dim;
        TextEncoderTower {
            embed: store.add(format!("{name}.embed"), normal(cfg.vocab.size, d, 0.3, rng)),
            pos: store.add(format!("{name}.pos"), normal(cfg.max_len, d, 0.02, rng)),
            blocks: (0..cfg.text_layers)
                .map(|l| EncoderBlock::with_hidden(store, &format!("{name}.block{l}"), d, cfg.heads, cfg.ff_hidden, rng))
                .collect(),
            ln: LayerNorm::new(store, &format!("{name}.ln"), d),
            head: Linear::new(store, &format!("{name}.head"), d, cfg.out_dim, rng),
        }
    }

    /// Contextual token states of every sequence stacked row-wise, with the
    /// `(start, len)` segment of each.
    pub fn contextualize(&self, tape: &mut Tape, store: &ParamStore, seqs: &[Vec<usize>]) -> (Var, Vec<(usize, usize)>) {
        let segments = segments_of(seqs.iter().map(Vec::len));
        let ids = seqs.concat();
        let positions: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
        let e = tape.param(store, self.embed);
        let p = tape.param(store, self.pos);
        let tok = tape.gather_rows(e, &ids);
        let pos = tape.gather_rows(p, &positions);
        let mut x = tape.add(tok, pos);
        for b in &self.blocks {
            x = b.forward_segments(tape, store, x, &segments);
        }
        (self.ln.forward(tape, store, x), segments)
    }

    /// Mean over each segment of `states`, then the output projection.
    pub fn pool(&self, tape: &mut Tape, store: &ParamStore, states: Var, segments: &[(usize, usize)]) -> Var {
        let avg = tape.constant(segment_mean_matrix(segments, tape.shape(states).0));
        let pooled = tape.matmul(avg, states);
        self.head.forward(tape, store, pooled)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, seqs: &[Vec<usize>]) -> Var {
        let (x, segments) = self.contextualize(tape, store, seqs);
        self.pool(tape, store, x, &segments)
    }
}

/// Two-layer perceptron from graph-embedding space to `out_dim`.
#[derive(Clone, Debug)]
pub struct GraphEmbTower {
    pub mlp: Mlp,
}

impl GraphEmbTower {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &RetrieverConfig, rng: &mut impl Rng) -> Self {
        GraphEmbTower { mlp: Mlp::new(store, &format!("{name}.mlp"), cfg.graph_dim, cfg.out_dim, cfg.out_dim, rng) }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, g: Var) -> Var {
        self.mlp.forward(tape, store, g)
    }
}

pub(crate) fn check_embeddings(cfg: &RetrieverConfig, g: &Mat) -> Result<()> {
    if g.cols != cfg.graph_dim {
        return Err(Error::Shape(format!("graph embedding dim {} != {}", g.cols, cfg.graph_dim)));
    }
    if !g.is_finite() {
        return Err(Error::DegenerateInput("non-finite graph embedding".into()));
    }
    Ok(())
}

fn rows_to_vecs(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows).map(|r| m.row(r).to_vec()).collect()
}

/// Teacher. Text states and graph tokens exchange information through one
/// shared cross-attention block before each side is pooled and projected.
#[derive(Clone, Debug)]
pub struct CrossAttentionEncoder {
    pub config: RetrieverConfig,
    pub store: ParamStore,
    pub text: TextEncoderTower,
    pub graph: GraphEmbTower,
    /// Graph embedding to `graph_tokens × text_dim`.
    pub expand: Linear,
    pub ln_text: LayerNorm,
    pub ln_graph: LayerNorm,
    pub cross: MultiHeadAttention,
    /// Pooled graph tokens back to graph-embedding space.
    pub collapse: Linear,
}

impl CrossAttentionEncoder {
    pub fn new(config: RetrieverConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(config.init_seed, 0x7e00);
        let mut store = ParamStore::new();
        let d = config.text_dim;
        let text = TextEncoderTower::new(&mut store, "text", &config, &mut rng);
        let graph = GraphEmbTower::new(&mut store, "graph", &config, &mut rng);
        let expand = Linear::new(&mut store, "expand", config.graph_dim, config.graph_tokens * d, &mut rng);
        let ln_text = LayerNorm::new(&mut store, "cross.ln_text", d);
        let ln_graph = LayerNorm::new(&mut store, "cross.ln_graph", d);
        let cross = MultiHeadAttention::new(&mut store, "cross.attn", d, config.heads, &mut rng);
        let collapse = Linear::new(&mut store, "collapse", d, config.graph_dim, &mut rng);
        Ok(CrossAttentionEncoder { config, store, text, graph, expand, ln_text, ln_graph, cross, collapse })
    }

    /// `(q_vecs, g_vecs)`, one row per `(query, graph)` pair in `pairs`, where
    /// the indices address `seqs` and the rows of `g`.
    pub fn encode_pairs(&self, tape: &mut Tape, seqs: &[Vec<usize>], g: Var, pairs: &[(usize, usize)]) -> (Var, Var) {
        let store = &self.store;
        let (d, t) = (self.config.text_dim, self.config.graph_tokens);
        let num_graphs = tape.shape(g).0;
        let (x, segs) = self.text.contextualize(tape, store, seqs);
        let hx = self.ln_text.forward(tape, store, x);
        let (qx, kx, vx) =
            (self.cross.q.forward(tape, store, hx), self.cross.k.forward(tape, store, hx), self.cross.v.forward(tape, store, hx));
        let flat = self.expand.forward(tape, store, g);
        let gt = tape.reshape(flat, num_graphs * t, d);
        let hg = self.ln_graph.forward(tape, store, gt);
        let (qg, kg, vg) =
            (self.cross.q.forward(tape, store, hg), self.cross.k.forward(tape, store, hg), self.cross.v.forward(tape, store, hg));

        let mut text_side: Vec<Option<[Var; 3]>> = vec![None; seqs.len()];
        let mut graph_side: Vec<Option<[Var; 3]>> = vec![None; num_graphs];
        let (mut text_out, mut graph_out) = (Vec::with_capacity(pairs.len()), Vec::with_capacity(pairs.len()));
        let (mut text_rows, mut graph_rows, mut graph_ids) = (Vec::new(), Vec::new(), Vec::with_capacity(pairs.len()));
        for &(i, j) in pairs {
            let (s, l) = segs[i];
            let [qxi, kxi, vxi] = *text_side[i]
                .get_or_insert_with(|| [tape.slice_rows(qx, s, l), tape.slice_rows(kx, s, l), tape.slice_rows(vx, s, l)]);
            let [qgj, kgj, vgj] = *graph_side[j]
                .get_or_insert_with(|| [tape.slice_rows(qg, j * t, t), tape.slice_rows(kg, j * t, t), tape.slice_rows(vg, j * t, t)]);
            text_out.push(self.cross.attend(tape, qxi, kgj, vgj, None));
            graph_out.push(self.cross.attend(tape, qgj, kxi, vxi, None));
            text_rows.extend(s..s + l);
            graph_rows.extend(j * t..(j + 1) * t);
            graph_ids.push(j);
        }
        let cat = tape.concat_rows(&text_out);
        let ot = self.cross.out.forward(tape, store, cat);
        let base = tape.gather_rows(x, &text_rows);
        let xt = tape.add(base, ot);
        let pair_segs = segments_of(pairs.iter().map(|&(i, _)| segs[i].1));
        let q_vecs = self.text.pool(tape, store, xt, &pair_segs);

        let cat = tape.concat_rows(&graph_out);
        let og = self.cross.out.forward(tape, store, cat);
        let base = tape.gather_rows(gt, &graph_rows);
        let gg = tape.add(base, og);
        let avg = tape.constant(segment_mean_matrix(&segments_of(std::iter::repeat_n(t, pairs.len())), pairs.len() * t));
        let pooled = tape.matmul(avg, gg);
        let back = self.collapse.forward(tape, store, pooled);
        let g_rows = tape.gather_rows(g, &graph_ids);
        let g_in = tape.add(g_rows, back);
        let g_vecs = self.graph.forward(tape, store, g_in);
        (q_vecs, g_vecs)
    }

    /// Joint encoding of one description with one graph embedding.
    pub fn teacher_encode(&self, query: &str, g_emb: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let ids = self.config.tokenize(query)?;
        let g = Mat::row_vector(g_emb.to_vec());
        check_embeddings(&self.config, &g)?;
        let mut tape = Tape::new();
        let gv = tape.constant(g);
        let (q, g) = self.encode_pairs(&mut tape, &[ids], gv, &[(0, 0)]);
        Ok((tape.value(q).row(0).to_vec(), tape.value(g).row(0).to_vec()))
    }

    /// Teacher outputs for aligned pairs `(i, i)`.
    pub fn encode_aligned(&self, pairs: &PairSet, exec: Exec) -> Result<(Mat, Mat)> {
        const CHUNK: usize = 16;
        check_embeddings(&self.config, &pairs.embeddings)?;
        let seqs = pairs.tokenize(&self.config)?;
        let n = seqs.len();
        let chunks = exec.map_range(n.div_ceil(CHUNK), |c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let mut tape = Tape::new();
            let idx: Vec<usize> = (lo..hi).collect();
            let g = Mat::stack_rows(&idx.iter().map(|&i| Mat::row_vector(pairs.embeddings.row(i).to_vec())).collect::<Vec<_>>());
            let g = tape.constant(g);
            let local: Vec<(usize, usize)> = (0..hi - lo).map(|k| (k, k)).collect();
            let (q, gv) = self.encode_pairs(&mut tape, &seqs[lo..hi], g, &local);
            (tape.value(q).clone(), tape.value(gv).clone())
        });
        let (q, g): (Vec<Mat>, Vec<Mat>) = chunks.into_iter().unzip();
        Ok((Mat::stack_rows(&q), Mat::stack_rows(&g)))
    }

    /// Exhaustive teacher scores: entry `(i, j)` is the cosine between the
    /// two outputs of `teacher_encode(queries[i], g_embs[j])`.
    pub fn score_matrix(&self, queries: &[String], g_embs: &Mat, exec: Exec) -> Result<Mat> {
        check_embeddings(&self.config, g_embs)?;
        let seqs: Vec<Vec<usize>> = queries.iter().map(|q| self.config.tokenize(q)).collect::<Result<_>>()?;
        let rows = exec.map(&seqs, |ids| {
            let mut tape = Tape::new();
            let g = tape.constant(g_embs.clone());
            let pairs: Vec<(usize, usize)> = (0..g_embs.rows).map(|j| (0, j)).collect();
            let (q, gv) = self.encode_pairs(&mut tape, std::slice::from_ref(ids), g, &pairs);
            let (q, gv) = (tape.value(q), tape.value(gv));
            Mat::row_vector((0..g_embs.rows).map(|j| cosine(q.row(j), gv.row(j))).collect())
        });
        Ok(Mat::stack_rows(&rows))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(TEACHER_KIND, serde_json::to_value(self.config).expect("config serializes"), self.store.entries())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut t = CrossAttentionEncoder::new(ck.config_as()?)?;
        t.store.load_entries(&ck.parameters).map_err(Error::Schema)?;
        Ok(t)
    }
}

/// Student: independent text and graph towers with no shared parameters.
#[derive(Clone, Debug)]
pub struct DualEncoder {
    pub config: RetrieverConfig,
    pub store: ParamStore,
    pub text: TextEncoderTower,
    pub graph: GraphEmbTower,
}

impl DualEncoder {
    pub fn new(config: RetrieverConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(config.init_seed, 0x5100);
        let mut store = ParamStore::new();
        let text = TextEncoderTower::new(&mut store, "text", &config, &mut rng);
        let graph = GraphEmbTower::new(&mut store, "graph", &config, &mut rng);
        Ok(DualEncoder { config, store, text, graph })
    }

    pub fn encode_queries(&self, queries: &[String]) -> Result<Mat> {
        let seqs: Vec<Vec<usize>> = queries.iter().map(|q| self.config.tokenize(q)).collect::<Result<_>>()?;
        if seqs.is_empty() {
            return Ok(Mat::zeros(0, self.config.out_dim));
        }
        let mut tape = Tape::new();
        let v = self.text.forward(&mut tape, &self.store, &seqs);
        Ok(tape.value(v).clone())
    }

    pub fn encode_query(&self, query: &str) -> Result<Vec<f64>> {
        Ok(self.encode_queries(&[query.to_string()])?.row(0).to_vec())
    }

    /// Graph-side vectors; needs no query, so they can be precomputed.
    pub fn encode_graphs(&self, g_embs: &Mat) -> Result<Mat> {
        check_embeddings(&self.config, g_embs)?;
        if g_embs.rows == 0 {
            return Ok(Mat::zeros(0, self.config.out_dim));
        }
        let mut tape = Tape::new();
        let g = tape.constant(g_embs.clone());
        let v = self.graph.forward(&mut tape, &self.store, g);
        Ok(tape.value(v).clone())
    }

    /// Cosine score matrix between every query and every graph.
    pub fn score_matrix(&self, queries: &[String], g_embs: &Mat) -> Result<Mat> {
        let q = rows_to_vecs(&self.encode_queries(queries)?);
        let g = rows_to_vecs(&self.encode_graphs(g_embs)?);
        let rows: Vec<Mat> = q.iter().map(|qi| Mat::row_vector(g.iter().map(|gj| cosine(qi, gj)).collect())).collect();
        Ok(Mat::stack_rows(&rows))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(STUDENT_KIND, serde_json::to_value(self.config).expect("config serializes"), self.store.entries())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut s = DualEncoder::new(ck.config_as()?)?;
        s.store.load_entries(&ck.parameters).map_err(Error::Schema)?;
        Ok(s)
    }
}
