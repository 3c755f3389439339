use std::sync::OnceLock;

use proptest::prelude::*;
use verigrag::encoder::{augment, info_nce_grad, info_nce_loss, AugmentationPolicy, EncoderConfig, GraphEncoder, GraphView};
use verigrag::netlist::{DataPathGraph, GraphEdge, GraphNode, NodeKind};
use verigrag::tensor::Mat;

fn encoder() -> &'static GraphEncoder {
    static E: OnceLock<GraphEncoder> = OnceLock::new();
    E.get_or_init(|| GraphEncoder::new(EncoderConfig::default()).unwrap())
}

const OPS: [&str; 6] = ["port", "add", "xor", "mux", "dff", "const"];
const KINDS: [NodeKind; 4] = [NodeKind::PortIn, NodeKind::PortOut, NodeKind::Cell, NodeKind::Const];

fn graph_and_perm() -> impl Strategy<Value = (DataPathGraph, Vec<usize>)> {
    (1usize..=20)
        .prop_flat_map(|n| {
            let nodes = prop::collection::vec((0..KINDS.len(), 0..OPS.len(), 1u32..9), n);
            let edges = prop::collection::vec((0..n, 0..n, 1u32..=8), 0..=2 * n);
            let perm = Just((0..n).collect::<Vec<usize>>()).prop_shuffle();
            (nodes, edges, perm)
        })
        .prop_map(|(nodes, edges, perm)| {
            let nodes = nodes
                .into_iter()
                .enumerate()
                .map(|(id, (k, o, w))| GraphNode {
                    id,
                    kind: KINDS[k],
                    op_type: OPS[o].into(),
                    io_type: None,
                    port_names: vec!["A".into(), "Y".into()],
                    params: vec![("WIDTH".into(), w.to_string())],
                })
                .collect();
            let edges = edges.into_iter().map(|(src, dst, width)| GraphEdge { src, dst, width, width_norm: width as f64 / 8.0 }).collect();
            (DataPathGraph { module_name: "p".into(), source_sha256: String::new(), nodes, edges }, perm)
        })
}

fn batch(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |d| Mat::from_vec(rows, cols, d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn embeddings_ignore_node_numbering((g, perm) in graph_and_perm()) {
        let a = encoder().encode_graph(&g).unwrap();
        let b = encoder().encode_graph(&g.relabel(&perm)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn info_nce_gradient_matches_central_differences(z1 in batch(4, 8), z2 in batch(4, 8), tau in 0.1f64..1.0) {
        let (_, grad) = info_nce_grad(&z1, &z2, tau).unwrap();
        let h = 1e-4;
        for i in 0..z1.len() {
            let (mut p, mut m) = (z1.clone(), z1.clone());
            p.data[i] += h;
            m.data[i] -= h;
            let fd = (info_nce_loss(&p, &z2, tau).unwrap() - info_nce_loss(&m, &z2, tau).unwrap()) / (2.0 * h);
            let an = grad.data[i];
            // Absolute floor for entries whose gradient is near zero.
            prop_assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-2), "{} vs {}", fd, an);
        }
    }
}

#[test]
fn edge_retention_matches_the_drop_probability() {
    let m = 50;
    let base = GraphView {
        features: Mat::zeros(10, 4),
        edges: (0..m).map(|i| (i % 10, (i * 7 + 3) % 10)).collect(),
        edge_features: vec![0.5; m],
    };
    let policy = AugmentationPolicy { edge_drop_prob: 0.15, feature_noise_sigma: 0.0, seed: 9 };
    let draws = 2000;
    let kept: usize = (0..draws).map(|d| augment(&base, &policy, d).edges.len()).sum();
    let trials = (m as u64 * draws) as f64;
    let p = 1.0 - policy.edge_drop_prob;
    let sigma = (trials * p * (1.0 - p)).sqrt();
    assert!((kept as f64 - trials * p).abs() <= 3.0 * sigma, "kept {kept} of {trials}, expected {}", trials * p);
}
