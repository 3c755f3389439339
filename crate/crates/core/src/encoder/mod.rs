//! Graph encoder: hashed node features, stacked GINE convolutions, mean
//! readout and a linear projection, trained contrastively on augmented views.

mod contrastive;
mod train;

pub use contrastive::{check_info_nce_inputs, cosine_logits, diagonal_nce, info_nce, info_nce_grad, info_nce_loss};
pub use train::{train_encoder, view_recall_at_1, EncoderTrainConfig};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::netlist::{DataPathGraph, GraphNode};
use crate::nn::{Linear, Mlp};
use crate::tensor::{Mat, ParamId, ParamStore, Tape, Var};
use crate::text::stable_hash;
use crate::{seeded_rng, Error, Exec, Result};

pub const CHECKPOINT_KIND: &str = "graph_encoder";

/// Maps a graph node to a fixed-length vector. The hashed featurizer is the
/// default; a contextual text encoder can stand in through this trait.
pub trait NodeFeatures {
    fn dim(&self) -> usize;
    fn featurize(&self, node: &GraphNode) -> Vec<f64>;
}

/// Signed feature hashing over the node's attribute tokens, L2-normalised.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashedFeaturizer {
    pub seed: u64,
    pub dim: usize,
}

impl Default for HashedFeaturizer {
    fn default() -> Self {
        HashedFeaturizer { seed: 0, dim: 64 }
    }
}

impl HashedFeaturizer {
    fn tokens(node: &GraphNode) -> Vec<String> {
        let mut t = vec![format!("kind={}", node.kind.as_str()), format!("op={}", node.op_type)];
        t.push(format!("io={}", node.io_type.as_deref().unwrap_or("none")));
        for p in &node.port_names {
            t.push(format!("port={p}"));
        }
        for (k, v) in &node.params {
            t.push(format!("param={k}"));
            t.push(format!("param={k}={v}"));
        }
        t
    }
}

impl NodeFeatures for HashedFeaturizer {
    fn dim(&self) -> usize {
        self.dim
    }

    fn featurize(&self, node: &GraphNode) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let tokens = Self::tokens(node);
        for tok in &tokens {
            let h = stable_hash(self.seed, tok.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        let n = crate::tensor::l2_norm(&v);
        if n == 0.0 {
            // Signed collisions cancelled every bucket; fall back to the kind token alone.
            let h = stable_hash(self.seed, tokens[0].as_bytes());
            v[(h % self.dim as u64) as usize] = 1.0;
            return v;
        }
        v.iter_mut().for_each(|x| *x /= n);
        v
    }
}

/// Node features plus connectivity, ready for the encoder. Augmented views
/// share this type.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphView {
    pub features: Mat,
    /// `(src, dst)` pairs; messages flow from `src` into `dst`.
    pub edges: Vec<(usize, usize)>,
    /// One scalar per edge, the normalised width.
    pub edge_features: Vec<f64>,
}

impl GraphView {
    pub fn from_graph(g: &DataPathGraph, feat: &impl NodeFeatures) -> Self {
        let rows: Vec<Vec<f64>> = g.nodes.iter().map(|n| feat.featurize(n)).collect();
        let features = Mat::from_vec(rows.len(), feat.dim(), rows.concat());
        GraphView {
            features,
            edges: g.edges.iter().map(|e| (e.src, e.dst)).collect(),
            edge_features: g.edges.iter().map(|e| e.width_norm).collect(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub edge_drop_prob: f64,
    pub feature_noise_sigma: f64,
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy { edge_drop_prob: 0.15, feature_noise_sigma: 0.05, seed: 0 }
    }
}

/// One stochastic view of `base`: each edge survives with probability
/// `1 − edge_drop_prob` (at least one survives when any exist) and every
/// feature receives Gaussian noise. Deterministic in `(policy.seed, draw)`.
pub fn augment(base: &GraphView, policy: &AugmentationPolicy, draw: u64) -> GraphView {
    let mut rng = seeded_rng(policy.seed, draw);
    let mut keep: Vec<usize> = (0..base.edges.len()).filter(|_| rng.random::<f64>() >= policy.edge_drop_prob).collect();
    if keep.is_empty() && !base.edges.is_empty() {
        keep.push(rng.random_range(0..base.edges.len()));
    }
    let mut features = base.features.clone();
    if policy.feature_noise_sigma > 0.0 {
        let noise = Normal::new(0.0, policy.feature_noise_sigma).expect("finite sigma");
        features.data.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
    }
    GraphView {
        features,
        edges: keep.iter().map(|&k| base.edges[k]).collect(),
        edge_features: keep.iter().map(|&k| base.edge_features[k]).collect(),
    }
}

/// Several views packed as one disjoint union, so a batch runs through the
/// encoder in a single pass.
#[derive(Clone, Debug)]
pub struct PackedBatch {
    pub features: Mat,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub edge_features: Mat,
    pub graph_of_node: Vec<usize>,
    pub inv_counts: Mat,
}

impl PackedBatch {
    pub fn pack(views: &[GraphView]) -> Self {
        let feats: Vec<Mat> = views.iter().map(|v| v.features.clone()).collect();
        let features = Mat::stack_rows(&feats);
        let (mut src, mut dst, mut ef, mut graph_of_node) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut inv = Vec::with_capacity(views.len());
        let mut offset = 0;
        for (gi, v) in views.iter().enumerate() {
            for (&(s, d), &w) in v.edges.iter().zip(&v.edge_features) {
                src.push(s + offset);
                dst.push(d + offset);
                ef.push(w);
            }
            graph_of_node.extend(std::iter::repeat_n(gi, v.num_nodes()));
            inv.push(1.0 / v.num_nodes().max(1) as f64);
            offset += v.num_nodes();
        }
        let edge_features = Mat::from_vec(ef.len(), 1, ef);
        PackedBatch { features, src, dst, edge_features, graph_of_node, inv_counts: Mat::from_vec(views.len(), 1, inv) }
    }

    pub fn num_graphs(&self) -> usize {
        self.inv_counts.rows
    }
}

/// `x'_i = h((1 + ε)·x_i + Σ_{j→i} ReLU(x_j + P·e_ji))`.
#[derive(Clone, Debug)]
pub struct GineLayer {
    pub eps: ParamId,
    pub edge_proj: Linear,
    /// `None` makes `h` the identity.
    pub mlp: Option<Mlp>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl GineLayer {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        GineLayer {
            eps: store.add(format!("{name}.eps"), Mat::scalar(0.0)),
            edge_proj: Linear::new(store, &format!("{name}.edge_proj"), 1, in_dim, rng),
            mlp: Some(Mlp::new(store, &format!("{name}.mlp"), in_dim, out_dim, out_dim, rng)),
            in_dim,
            out_dim,
        }
    }

    /// Identity `h`, `ε = 0` and an edge projection of all ones with zero bias.
    pub fn identity(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let eps = store.add(format!("{name}.eps"), Mat::scalar(0.0));
        let weight = store.add(format!("{name}.edge_proj.weight"), Mat::filled(1, dim, 1.0));
        let bias = store.add(format!("{name}.edge_proj.bias"), Mat::zeros(1, dim));
        GineLayer { eps, edge_proj: Linear { weight, bias: Some(bias), in_dim: 1, out_dim: dim }, mlp: None, in_dim: dim, out_dim: dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, src: &[usize], dst: &[usize], e: Var) -> Var {
        let n = tape.shape(x).0;
        let eps = tape.param(store, self.eps);
        let one_plus = tape.add_scalar(eps, 1.0);
        let mut h = tape.scale_by(x, one_plus);
        if !src.is_empty() {
            let ep = self.edge_proj.forward(tape, store, e);
            let xj = tape.gather_rows(x, src);
            let m = tape.add(xj, ep);
            let m = tape.relu(m);
            let agg = tape.scatter_add_rows(m, dst, n);
            h = tape.add(h, agg);
        }
        match &self.mlp {
            Some(mlp) => mlp.forward(tape, store, h),
            None => h,
        }
    }
}

/// Applies one layer to plain matrices, checking shapes.
pub fn gine_conv(layer: &GineLayer, store: &ParamStore, x: &Mat, edges: &[(usize, usize)], e: &Mat) -> Result<Mat> {
    if x.cols != layer.in_dim {
        return Err(Error::Shape(format!("node features have {} columns, layer expects {}", x.cols, layer.in_dim)));
    }
    if e.rows != edges.len() || (e.rows > 0 && e.cols != layer.edge_proj.in_dim) {
        return Err(Error::Shape(format!("edge features {:?} for {} edges", e.shape(), edges.len())));
    }
    if let Some(&(s, d)) = edges.iter().find(|(s, d)| *s >= x.rows || *d >= x.rows) {
        return Err(Error::Shape(format!("edge {s}->{d} outside {} nodes", x.rows)));
    }
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let ev = t.constant(e.clone());
    let (src, dst): (Vec<usize>, Vec<usize>) = edges.iter().copied().unzip();
    let y = layer.forward(&mut t, store, xv, &src, &dst, ev);
    Ok(t.value(y).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub featurizer: HashedFeaturizer,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub out_dim: usize,
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { featurizer: HashedFeaturizer::default(), hidden_dim: 128, num_layers: 3, out_dim: 128, init_seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GraphEncoder {
    pub config: EncoderConfig,
    pub store: ParamStore,
    pub layers: Vec<GineLayer>,
    pub readout: Linear,
}

impl GraphEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        if config.num_layers == 0 || config.hidden_dim == 0 || config.out_dim == 0 || config.featurizer.dim == 0 {
            return Err(Error::Config("encoder dimensions and depth must be positive".into()));
        }
        let mut rng = seeded_rng(config.init_seed, 0x6e6e);
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(config.num_layers);
        let mut d = config.featurizer.dim;
        for i in 0..config.num_layers {
            layers.push(GineLayer::new(&mut store, &format!("gine{i}"), d, config.hidden_dim, &mut rng));
            d = config.hidden_dim;
        }
        let readout = Linear::new(&mut store, "readout", d, config.out_dim, &mut rng);
        Ok(GraphEncoder { config, store, layers, readout })
    }

    /// Encoder whose every stage is the identity: `h` = identity, `ε = 0`,
    /// unit edge projection and an identity readout.
    pub fn identity(featurizer: HashedFeaturizer, num_layers: usize) -> Self {
        let dim = featurizer.dim;
        let mut store = ParamStore::new();
        let layers = (0..num_layers).map(|i| GineLayer::identity(&mut store, &format!("gine{i}"), dim)).collect();
        let weight = store.add("readout.weight", Mat::identity(dim));
        let bias = store.add("readout.bias", Mat::zeros(1, dim));
        let config = EncoderConfig { featurizer, hidden_dim: dim, num_layers, out_dim: dim, init_seed: 0 };
        GraphEncoder { config, store, layers, readout: Linear { weight, bias: Some(bias), in_dim: dim, out_dim: dim } }
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim
    }

    pub fn view(&self, g: &DataPathGraph) -> GraphView {
        GraphView::from_graph(g, &self.config.featurizer)
    }

    /// `num_graphs × out_dim` embeddings of a packed batch.
    pub fn forward_packed(&self, tape: &mut Tape, batch: &PackedBatch) -> Var {
        let mut x = tape.constant(batch.features.clone());
        let e = tape.constant(batch.edge_features.clone());
        for layer in &self.layers {
            x = layer.forward(tape, &self.store, x, &batch.src, &batch.dst, e);
        }
        let sums = tape.scatter_add_rows(x, &batch.graph_of_node, batch.num_graphs());
        let inv = tape.constant(batch.inv_counts.clone());
        let mean = tape.mul_col(sums, inv);
        self.readout.forward(tape, &self.store, mean)
    }

    pub fn encode_view(&self, view: &GraphView) -> Result<Vec<f64>> {
        if view.num_nodes() == 0 {
            return Err(Error::EmptyGraph);
        }
        let mut t = Tape::new();
        let z = self.forward_packed(&mut t, &PackedBatch::pack(std::slice::from_ref(view)));
        Ok(t.value(z).data.clone())
    }

    pub fn encode_graph(&self, g: &DataPathGraph) -> Result<Vec<f64>> {
        if g.nodes.is_empty() {
            return Err(Error::EmptyGraph);
        }
        self.encode_view(&self.view(g))
    }

    /// Encodes each graph independently; the policy decides whether graphs
    /// are spread across threads.
    pub fn encode_all(&self, graphs: &[DataPathGraph], exec: Exec) -> Result<Vec<Vec<f64>>> {
        exec.map(graphs, |g| self.encode_graph(g)).into_iter().collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(CHECKPOINT_KIND, serde_json::to_value(self.config).expect("config serialises"), self.store.entries())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Schema(format!("expected a `{CHECKPOINT_KIND}` checkpoint, found `{}`", ck.kind)));
        }
        let mut enc = GraphEncoder::new(ck.config_as()?)?;
        enc.store.load_entries(&ck.parameters).map_err(Error::Schema)?;
        Ok(enc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netlist::{NodeKind, GraphNode};

    fn node(op: &str) -> GraphNode {
        GraphNode { id: 0, kind: NodeKind::Cell, op_type: op.into(), io_type: None, port_names: vec!["A".into(), "Y".into()], params: vec![] }
    }

    #[test]
    fn featurizer_is_deterministic_and_unit_norm() {
        let f = HashedFeaturizer::default();
        let a = f.featurize(&node("add"));
        assert_eq!(a, f.featurize(&node("add")));
        assert!((crate::tensor::l2_norm(&a) - 1.0).abs() < 1e-12);
        assert_ne!(a, f.featurize(&node("dff")));
    }

    #[test]
    fn identity_layer_hand_cases() {
        let mut store = ParamStore::new();
        let layer = GineLayer::identity(&mut store, "l", 1);
        let iso = gine_conv(&layer, &store, &Mat::from_rows(&[[1.0]]), &[], &Mat::zeros(0, 1)).unwrap();
        assert_eq!(iso.data, vec![1.0]);
        let x = Mat::from_rows(&[[1.0], [2.0]]);
        let blocked = gine_conv(&layer, &store, &x, &[(1, 0)], &Mat::from_rows(&[[-3.0]])).unwrap();
        assert_eq!(blocked.row(0), &[1.0]);
        let passed = gine_conv(&layer, &store, &x, &[(1, 0)], &Mat::from_rows(&[[0.5]])).unwrap();
        assert_eq!(passed.row(0), &[3.5]);
    }

    #[test]
    fn shape_errors() {
        let mut store = ParamStore::new();
        let layer = GineLayer::identity(&mut store, "l", 2);
        let x = Mat::zeros(2, 3);
        assert!(matches!(gine_conv(&layer, &store, &x, &[], &Mat::zeros(0, 1)), Err(Error::Shape(_))));
        let x = Mat::zeros(2, 2);
        assert!(matches!(gine_conv(&layer, &store, &x, &[(0, 1)], &Mat::zeros(2, 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn augmentation_identity_and_determinism() {
        let view = GraphView {
            features: Mat::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]),
            edges: vec![(0, 1), (1, 2), (0, 2)],
            edge_features: vec![1.0, 0.5, 0.25],
        };
        let none = AugmentationPolicy { edge_drop_prob: 0.0, feature_noise_sigma: 0.0, seed: 3 };
        assert_eq!(augment(&view, &none, 9), view);
        let p = AugmentationPolicy { edge_drop_prob: 0.9, feature_noise_sigma: 0.1, seed: 3 };
        assert_eq!(augment(&view, &p, 4), augment(&view, &p, 4));
        for d in 0..50 {
            assert!(!augment(&view, &p, d).edges.is_empty());
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let enc = GraphEncoder::new(EncoderConfig { hidden_dim: 16, out_dim: 8, ..Default::default() }).unwrap();
        let back = GraphEncoder::from_checkpoint(&enc.to_checkpoint()).unwrap();
        assert_eq!(back.store.digest(), enc.store.digest());
    }
}
