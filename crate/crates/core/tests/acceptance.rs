//! One test per primary acceptance criterion. Each prints a single
//! `[PASS]`/`[FAIL]` line with the measured values, then asserts.

mod common;

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use verigrag::embeddings::EmbeddingTable;
use verigrag::encoder::*;
use verigrag::harness::*;
use verigrag::lm::{train_lm, CodeExample, LmConfig, LmTrainConfig, TinyLm};
use verigrag::netlist::corpus::extract;
use verigrag::netlist::dedup::{dedup_indices, estimate_jaccard, shingle_of, DedupConfig, MinHasher};
use verigrag::netlist::{DataPathGraph, GraphEdge, GraphNode, NodeKind, VerilogSource};
use verigrag::retriever::*;
use verigrag::tensor::{Mat, ParamStore};
use verigrag::veriformer::*;
use verigrag::{seeded_rng, Exec};

fn verdict(name: &str, ok: bool, detail: String) {
    println!("[{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail}");
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

#[test]
fn pass_at_k_is_exact() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for n in 1..=10usize {
        for c in 0..=n {
            for k in 1..=n {
                let subsets: Vec<u32> = (0u32..1 << n).filter(|m| m.count_ones() as usize == k).collect();
                let hit = subsets.iter().filter(|&&m| m & ((1u32 << c) - 1) != 0).count();
                let want = hit as f64 / subsets.len() as f64;
                worst = worst.max((pass_at_k(n, c, k).unwrap() - want).abs());
            }
        }
    }
    let spot = pass_at_k(5, 2, 2).unwrap();
    let t = start.elapsed();
    verdict(
        "pass@k exactness",
        worst <= 1e-9 && (spot - 0.7).abs() <= 1e-9 && within(t, 1),
        format!("max |err| {worst:.2e} over n<=10, (5,2,2) = {spot}, {t:?}"),
    );
}

/// Loop evaluation of one GINE layer straight from the update rule.
fn gine_by_loops(layer: &GineLayer, store: &ParamStore, x: &Mat, edges: &[(usize, usize)], e: &[f64]) -> Mat {
    let eps = store.get(layer.eps).item();
    let pw = store.get(layer.edge_proj.weight);
    let pb = store.get(layer.edge_proj.bias.unwrap());
    let mut agg = Mat::zeros(x.rows, x.cols);
    for v in 0..x.rows {
        for c in 0..x.cols {
            let mut s = (1.0 + eps) * x.get(v, c);
            for (k, &(src, dst)) in edges.iter().enumerate() {
                if dst == v {
                    s += (x.get(src, c) + e[k] * pw.get(0, c) + pb.get(0, c)).max(0.0);
                }
            }
            agg.set(v, c, s);
        }
    }
    let Some(mlp) = &layer.mlp else { return agg };
    let dense = |input: &Mat, lin: &verigrag::nn::Linear, relu: bool| {
        let (w, b) = (store.get(lin.weight), store.get(lin.bias.unwrap()));
        let mut out = Mat::zeros(input.rows, w.cols);
        for r in 0..input.rows {
            for o in 0..w.cols {
                let mut acc = b.get(0, o);
                for i in 0..w.rows {
                    acc += input.get(r, i) * w.get(i, o);
                }
                out.set(r, o, if relu { acc.max(0.0) } else { acc });
            }
        }
        out
    };
    let h = dense(&agg, &mlp.first, true);
    dense(&h, &mlp.second, false)
}

#[test]
fn gine_layer_matches_loop_oracle() {
    let start = Instant::now();
    let mut rng = seeded_rng(1, 0);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let mut store = ParamStore::new();
        let layer = GineLayer::new(&mut store, "g", 4, 5, &mut rng);
        *store.get_mut(layer.eps) = Mat::scalar(rng.random_range(-0.5..0.5));
        let n = rng.random_range(1..=8);
        let x = Mat::from_vec(n, 4, (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect());
        let m = if trial % 10 == 0 { 0 } else { rng.random_range(0..=2 * n) };
        let edges: Vec<(usize, usize)> = (0..m).map(|_| (rng.random_range(0..n), rng.random_range(0..n))).collect();
        let e: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let got = gine_conv(&layer, &store, &x, &edges, &Mat::from_vec(m, 1, e.clone())).unwrap();
        worst = worst.max(got.max_abs_diff(&gine_by_loops(&layer, &store, &x, &edges, &e)));
    }
    let mut store = ParamStore::new();
    let id = GineLayer::identity(&mut store, "id", 1);
    let isolated = gine_conv(&id, &store, &Mat::from_rows(&[[1.0]]), &[], &Mat::zeros(0, 1)).unwrap();
    let blocked = gine_conv(&id, &store, &Mat::from_rows(&[[1.0], [2.0]]), &[(1, 0)], &Mat::from_rows(&[[-3.0]])).unwrap();
    let hand = isolated.get(0, 0) == 1.0 && blocked.get(0, 0) == 1.0;
    let t = start.elapsed();
    verdict(
        "GINE loop oracle",
        worst <= 1e-6 && hand && within(t, 5),
        format!("max |err| {worst:.2e} on 100 graphs, hand cases [{}] and [{}], {t:?}", isolated.get(0, 0), blocked.get(0, 0)),
    );
}

fn random_graph(rng: &mut impl Rng, n: usize) -> DataPathGraph {
    let ops = ["port", "add", "and", "mux", "dff", "xor", "const"];
    let nodes = (0..n)
        .map(|id| {
            let kind = [NodeKind::PortIn, NodeKind::PortOut, NodeKind::Cell, NodeKind::Const][rng.random_range(0..4)];
            GraphNode {
                id,
                kind,
                op_type: ops[rng.random_range(0..ops.len())].to_string(),
                io_type: None,
                port_names: vec!["A".into(), "Y".into()],
                params: vec![("WIDTH".into(), rng.random_range(1..9).to_string())],
            }
        })
        .collect();
    let m = rng.random_range(0..=2 * n);
    let edges = (0..m)
        .map(|_| {
            let width = rng.random_range(1..=8u32);
            GraphEdge { src: rng.random_range(0..n), dst: rng.random_range(0..n), width, width_norm: width as f64 / 8.0 }
        })
        .collect();
    DataPathGraph { module_name: "r".into(), source_sha256: String::new(), nodes, edges }
}

#[test]
fn encoder_is_permutation_invariant() {
    let start = Instant::now();
    let enc = GraphEncoder::new(EncoderConfig::default()).unwrap();
    let mut rng = seeded_rng(2, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(1..=20);
        let g = random_graph(&mut rng, n);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let a = enc.encode_graph(&g).unwrap();
        let b = enc.encode_graph(&g.relabel(&perm)).unwrap();
        worst = worst.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    let t = start.elapsed();
    verdict("permutation invariance", worst <= 1e-6, format!("max |diff| {worst:.2e} on 50 graphs, {t:?}"));
}

#[test]
fn info_nce_values_and_gradients() {
    let start = Instant::now();
    let eye = Mat::identity(2);
    let v = info_nce_loss(&eye, &eye, 1.0).unwrap();
    let want = (1.0 + (-1.0f64).exp()).ln();
    let mut rng = seeded_rng(3, 0);
    let z1 = Mat::from_vec(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
    let z2 = Mat::from_vec(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
    let (_, grad) = info_nce_grad(&z1, &z2, 0.5).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..z1.len() {
        let (mut p, mut m) = (z1.clone(), z1.clone());
        p.data[i] += h;
        m.data[i] -= h;
        let fd = (info_nce_loss(&p, &z2, 0.5).unwrap() - info_nce_loss(&m, &z2, 0.5).unwrap()) / (2.0 * h);
        let an = grad.data[i];
        worst = worst.max((fd - an).abs() / an.abs().max(fd.abs()).max(1e-8));
    }
    let t = start.elapsed();
    verdict(
        "InfoNCE values and gradients",
        (v - want).abs() <= 1e-5 && worst <= 1e-3,
        format!("B=2 orthonormal {v:.6} vs {want:.6}, max rel grad err {worst:.2e}, {t:?}"),
    );
}

#[test]
fn contrastive_training_reaches_recall() {
    let start = Instant::now();
    let (_, ex) = common::toy_extraction(32, 0);
    let cfg = EncoderTrainConfig { tau: 0.1, lr: 3e-3, ..Default::default() };
    let (enc, trace) = train_encoder(&ex.graphs, EncoderConfig::default(), &cfg, Exec::default()).unwrap();
    let recall = view_recall_at_1(&enc, &ex.graphs, &cfg.augment, Exec::default()).unwrap();
    let t = start.elapsed();
    verdict(
        "contrastive training dynamics",
        recall >= 0.9 && cfg.epochs <= 50 && within(t, 600),
        format!("view recall@1 {recall:.3} after {} epochs (loss {:.3} -> {:.3}), {t:?}", cfg.epochs, trace[0], trace[trace.len() - 1]),
    );
}

struct Kd {
    pairs: PairSet,
    teacher: CrossAttentionEncoder,
    built: Duration,
}

fn kd() -> &'static Kd {
    static K: OnceLock<Kd> = OnceLock::new();
    K.get_or_init(|| {
        let start = Instant::now();
        let (_, _, pairs) = common::toy_pairs(64, 0);
        let (teacher, _) = train_teacher(&pairs, RetrieverConfig::default(), &RetrieverTrainConfig::teacher()).unwrap();
        Kd { pairs, teacher, built: start.elapsed() }
    })
}

#[test]
fn distillation_pipeline() {
    let k = kd();
    let start = Instant::now();
    let cfg = RetrieverConfig::default();
    let targets = k.teacher.encode_aligned(&k.pairs, Exec::default()).unwrap();
    let init_mse = mse_to_teacher(&DualEncoder::new(cfg).unwrap(), &k.pairs, &targets).unwrap();
    let (student, trace) = distill_student(&k.pairs, &k.teacher, cfg, &RetrieverTrainConfig::student(), Exec::default()).unwrap();
    let final_mse = mse_to_teacher(&student, &k.pairs, &targets).unwrap();
    let t_rec = recall_at_k(&k.teacher.score_matrix(&k.pairs.descriptions, &k.pairs.embeddings, Exec::default()).unwrap(), 5);
    let s_rec = recall_at_k(&student.score_matrix(&k.pairs.descriptions, &k.pairs.embeddings).unwrap(), 5);

    let zero = RetrieverTrainConfig { mse_weight: 0.0, epochs: 3, ..RetrieverTrainConfig::student() };
    let (a, za) = distill_student(&k.pairs, &k.teacher, cfg, &zero, Exec::default()).unwrap();
    let other = CrossAttentionEncoder::new(RetrieverConfig { init_seed: 7, ..cfg }).unwrap();
    let (b, _) = distill_student(&k.pairs, &other, cfg, &zero, Exec::default()).unwrap();
    let plain = za.loss == za.nce && a.store.digest() == b.store.digest();
    let t = start.elapsed() + k.built;
    verdict(
        "knowledge distillation",
        final_mse <= 0.5 * init_mse && s_rec >= 0.9 * t_rec && plain && within(t, 900),
        format!(
            "MSE to teacher {init_mse:.4} -> {final_mse:.4}, recall@5 student {s_rec:.3} teacher {t_rec:.3}, lambda=0 plain contrastive {plain}, final loss {:.3}, {t:?}",
            trace.loss.last().unwrap()
        ),
    );
}

#[test]
fn distillation_ablation_direction() {
    let k = kd();
    let start = Instant::now();
    let (mut with, mut without) = (0.0, 0.0);
    for seed in 0..3u64 {
        let cfg = RetrieverConfig { init_seed: seed, ..Default::default() };
        for (lambda, acc) in [(1.0, &mut with), (0.0, &mut without)] {
            let tc = RetrieverTrainConfig { mse_weight: lambda, seed, ..RetrieverTrainConfig::student() };
            let (s, _) = distill_student(&k.pairs, &k.teacher, cfg, &tc, Exec::default()).unwrap();
            *acc += recall_at_k(&s.score_matrix(&k.pairs.descriptions, &k.pairs.embeddings).unwrap(), 5) / 3.0;
        }
    }
    let ok = with >= without;
    // Reported, not fatal: the published effect is under a point.
    println!(
        "[{}] distillation ablation (non-fatal): mean recall@5 lambda=1 {with:.4} vs lambda=0 {without:.4} over 3 seeds, {:?}",
        if ok { "PASS" } else { "FLAG" },
        start.elapsed()
    );
}

#[test]
fn veriformer_stage1_alignment() {
    let start = Instant::now();
    let (_, enc, pairs) = common::toy_pairs(32, 0);
    let (mods, ex) = common::toy_extraction(32, 0);
    let before = enc.store.digest();
    let codes: Vec<String> = mods.iter().map(|m| m.code.clone()).collect();
    let (vf, tr) = stage1_train(&enc, &ex.graphs, &codes, VeriFormerConfig::default(), &Stage1Config::default(), Exec::default()).unwrap();
    let after = enc.store.digest();
    let held_in: Vec<Stage1Pair> =
        (0..pairs.len()).map(|i| Stage1Pair { g_emb: pairs.embeddings.row(i).to_vec(), code: codes[i].clone() }).collect();
    let acc = matching_accuracy(&vf, &held_in, 0, Exec::default()).unwrap();
    let drop = |v: &[f64]| 1.0 - v[v.len() - 1] / v[0];
    let drops = [drop(&tr.gcc), drop(&tr.gcm), drop(&tr.gcg)];
    let t = start.elapsed();
    verdict(
        "VeriFormer stage 1",
        drops.iter().all(|&d| d >= 0.3) && acc >= 0.8 && before == after && within(t, 1200),
        format!(
            "loss drops gcc {:.0}% gcm {:.0}% gcg {:.0}%, matching accuracy {acc:.3}, GNN hash unchanged {}, {t:?}",
            100.0 * drops[0],
            100.0 * drops[1],
            100.0 * drops[2],
            before == after
        ),
    );
}

#[test]
fn distribution_alignment_and_frozen_lm() {
    let start = Instant::now();
    let z = Mat::from_rows(&[[0.5f64.ln(), 0.5f64.ln()]]);
    let g = Mat::from_rows(&[[0.9f64.ln(), 0.1f64.ln()]]);
    let hand = kl_distribution(&z, &g, RowPairing::RowMean).unwrap();
    let mut rng = seeded_rng(4, 0);
    let mut min_kl = f64::INFINITY;
    for i in 0..1000 {
        let d = rng.random_range(2..12);
        let (rz, rg) = (rng.random_range(1..6), rng.random_range(1..6));
        let zm = Mat::from_vec(rz, d, (0..rz * d).map(|_| rng.random_range(-4.0..4.0)).collect());
        let gm = Mat::from_vec(rg, d, (0..rg * d).map(|_| rng.random_range(-4.0..4.0)).collect());
        let pairing = if i % 2 == 0 { RowPairing::RowMean } else { RowPairing::Truncate };
        min_kl = min_kl.min(kl_distribution(&zm, &gm, pairing).unwrap());
    }

    let (mods, _) = common::toy_extraction(16, 5);
    let examples: Vec<CodeExample> = mods.iter().map(|m| CodeExample { description: m.description.clone(), code: m.code.clone() }).collect();
    let (lm, _) = train_lm(&examples, LmConfig::default(), &LmTrainConfig { epochs: 4, ..Default::default() }).unwrap();
    let vf = VeriFormer::new(VeriFormerConfig::default()).unwrap();
    let samples: Vec<Stage2Sample> = mods
        .iter()
        .map(|m| Stage2Sample {
            description: m.description.clone(),
            g_emb: (0..128).map(|_| rng.random_range(-1.0..1.0)).collect(),
            code: m.code.clone(),
        })
        .collect();
    let zero = Stage2Config { alpha: 0.0, ..Default::default() };
    let (total, gen, _) = stage2_sample_loss(&vf, &lm, &samples[0], &zero).unwrap();
    let lm_before = lm.store.digest();
    stage2_train(&vf, &lm, &samples, &Stage2Config { epochs: 2, ..Default::default() }).unwrap();
    let frozen = lm.store.digest() == lm_before;
    let t = start.elapsed();
    verdict(
        "distribution alignment",
        (hand - 0.510826).abs() <= 1e-5 && min_kl >= 0.0 && total.to_bits() == gen.to_bits() && frozen,
        format!("KL hand case {hand:.6}, min KL over 1000 random inputs {min_kl:.3e}, alpha=0 total == gen bitwise {}, LM hash unchanged {frozen}, {t:?}", total.to_bits() == gen.to_bits()),
    );
}

const FLIP_FLOP: &str = "module flip_flop(input clk, input d, output reg q);\n  always @(posedge clk) q <= d;\nendmodule\n";
const FLIP_FLOP_DESC: &str = "A D flip-flop that stores input d on every rising edge of clk and drives it on output q.";

#[test]
fn end_to_end_flip_flop() {
    let start = Instant::now();
    let work = tempfile::tempdir().unwrap();
    // The one-bit toy register is structurally identical to the flip-flop.
    let mut mods: Vec<_> = verigrag::toy::toy_corpus(40, 0).into_iter().filter(|m| !m.name.starts_with("register_w1_")).collect();
    mods.truncate(31);
    let mut sources: Vec<VerilogSource> = mods.iter().map(|m| VerilogSource::new(format!("{}.v", m.name), m.code.clone()).unwrap()).collect();
    sources.push(VerilogSource::new("flip_flop.v", FLIP_FLOP).unwrap());
    let mut descriptions: Vec<String> = mods.iter().map(|m| m.description.clone()).collect();
    descriptions.push(FLIP_FLOP_DESC.into());
    let codes: Vec<String> = sources.iter().map(|s| s.text.clone()).collect();
    let ex = extract(&sources, &DedupConfig { threshold: 1.01, ..Default::default() }, Exec::default());
    assert_eq!(ex.graphs.len(), 32, "{:?}", ex.skipped);

    let (enc, _) = train_encoder(&ex.graphs, EncoderConfig::default(), &EncoderTrainConfig { epochs: 20, ..Default::default() }, Exec::default()).unwrap();
    let embs = enc.encode_all(&ex.graphs, Exec::default()).unwrap();
    let ids: Vec<String> = ex.graphs.iter().map(|g| g.module_name.clone()).collect();
    let emb_path = work.path().join("embeddings.f32");
    EmbeddingTable::from_rows(ids, &embs, enc.out_dim()).unwrap().save(&emb_path).unwrap();
    let table = EmbeddingTable::load(&emb_path).unwrap();

    let pairs = PairSet::new(descriptions.clone(), table.to_mat()).unwrap();
    let rcfg = RetrieverConfig::default();
    let (teacher, _) = train_teacher(&pairs, rcfg, &RetrieverTrainConfig::teacher()).unwrap();
    let (student, _) = distill_student(&pairs, &teacher, rcfg, &RetrieverTrainConfig { epochs: 40, ..RetrieverTrainConfig::student() }, Exec::default()).unwrap();
    let index_path = work.path().join("index.json");
    build_index(&table.entries(), &student).unwrap().save(&index_path).unwrap();
    let index = RetrievalIndex::load(&index_path).unwrap();
    let top = retrieve(&index, FLIP_FLOP_DESC, &student, 1).unwrap();
    let ranked_first = top[0].id == "flip_flop";

    let s1: Vec<Stage1Pair> = (0..32).map(|i| Stage1Pair { g_emb: table.row(i), code: codes[i].clone() }).collect();
    let (vf1, _) = stage1_train_pairs(&s1, VeriFormerConfig::default(), &Stage1Config { epochs: 5, ..Default::default() }).unwrap();
    let examples: Vec<CodeExample> = (0..32).map(|i| CodeExample { description: descriptions[i].clone(), code: codes[i].clone() }).collect();
    let (lm, _) = train_lm(&examples, LmConfig::default(), &LmTrainConfig::default()).unwrap();
    let s2: Vec<Stage2Sample> =
        (0..32).map(|i| Stage2Sample { description: descriptions[i].clone(), g_emb: table.row(i), code: codes[i].clone() }).collect();
    let (vf2, _) = stage2_train(&vf1, &lm, &s2, &Stage2Config { epochs: 3, ..Default::default() }).unwrap();
    let ck_path = work.path().join("veriformer.json");
    vf2.to_checkpoint(STAGE2_KIND).save(&ck_path).unwrap();
    let vf2 = VeriFormer::load(&ck_path).unwrap();
    let lm = TinyLm::from_checkpoint(&lm.to_checkpoint()).unwrap();

    let pipeline = Pipeline { student: &student, index: &index, embeddings: &table, veriformer: &vf2, lm: &lm };
    let (soft, _) = pipeline.soft_prompt(FLIP_FLOP_DESC, 1).unwrap().unwrap();
    let shape_ok = soft.shape() == (vf2.config.num_queries, lm.config.dim);

    let bench = work.path().join("bench");
    let task = BenchmarkTask {
        task_id: "flip_flop".into(),
        description: FLIP_FLOP_DESC.into(),
        check_syntax: "grep -q endmodule {code_file}".into(),
        check_function: "grep -q always {code_file}".into(),
        timeout: Duration::from_secs(10),
        dir: Default::default(),
    };
    task.save(&bench).unwrap();
    let cfg = EvalConfig { generation: GenerationConfig { n: 6, ..Default::default() }, k: vec![1, 5] };
    let (report, _) = evaluate(&bench, &pipeline, &cfg, Exec::default()).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    let valid = validate_report(&doc).is_ok();
    let t = start.elapsed();
    verdict(
        "end-to-end smoke",
        ranked_first && shape_ok && valid && within(t, 300),
        format!(
            "top-1 for the flip-flop description `{}` ({:.3}), soft prompt {:?}, report valid {valid}, function pass@1 {:.3}, {t:?}",
            top[0].id,
            top[0].score,
            soft.shape(),
            report.metrics.function["pass@1"]
        ),
    );
}

#[test]
fn dedup_drops_copies_and_keeps_overlaps() {
    let start = Instant::now();
    let text = "module a(input x, output y);\n  assign y = ~x;\nendmodule\n";
    let cfg = DedupConfig::default();
    let kept = dedup_indices(&[text, text], &cfg, Exec::default());
    let h = MinHasher::new(256, cfg.seed);
    let s1: Vec<u64> = ["a", "b", "c"].map(shingle_of).to_vec();
    let s2: Vec<u64> = ["b", "c", "d"].map(shingle_of).to_vec();
    let est = estimate_jaccard(&h.signature(&s1), &h.signature(&s2));
    let t = start.elapsed();
    verdict(
        "dedup",
        kept == [0] && (est - 0.5).abs() <= 0.1 && est < cfg.threshold,
        format!("identical pair keeps {kept:?} at threshold {}, overlap estimate {est:.3} survives, {t:?}", cfg.threshold),
    );
}
