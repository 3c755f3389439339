mod common;

use std::sync::OnceLock;

use proptest::prelude::*;
use verigrag::lm::{train_lm, CodeExample, EmbeddingLm, LmConfig, LmTrainConfig, TinyLm};
use verigrag::tensor::{cosine, Mat, Tape};
use verigrag::text::HashedVocab;
use verigrag::veriformer::*;
use verigrag::{seeded_rng, Error, Exec};

struct Fixture {
    pairs: Vec<Stage1Pair>,
    descriptions: Vec<String>,
    vf: VeriFormer,
    trace: Stage1Trace,
    lm: TinyLm,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let (ex, _, pairs) = common::toy_pairs(24, 3);
        let mods = verigrag::toy::toy_corpus(24, 3);
        let s1: Vec<Stage1Pair> =
            mods.iter().enumerate().map(|(i, m)| Stage1Pair { g_emb: pairs.embeddings.row(i).to_vec(), code: m.code.clone() }).collect();
        assert_eq!(ex.graphs.len(), s1.len());
        let (vf, trace) = stage1_train_pairs(&s1, VeriFormerConfig::default(), &Stage1Config { epochs: 8, ..Default::default() }).unwrap();
        let examples: Vec<CodeExample> = mods.iter().map(|m| CodeExample { description: m.description.clone(), code: m.code.clone() }).collect();
        let (lm, _) = train_lm(&examples, LmConfig::default(), &LmTrainConfig { epochs: 6, ..Default::default() }).unwrap();
        Fixture { pairs: s1, descriptions: pairs.descriptions, vf, trace, lm }
    })
}

fn samples(f: &Fixture) -> Vec<Stage2Sample> {
    f.pairs
        .iter()
        .zip(&f.descriptions)
        .map(|(p, d)| Stage2Sample { description: d.clone(), g_emb: p.g_emb.clone(), code: p.code.clone() })
        .collect()
}

fn small(seed: u64) -> VeriFormer {
    VeriFormer::new(VeriFormerConfig {
        dim: 8,
        heads: 2,
        ff_hidden: 16,
        graph_dim: 6,
        num_queries: 3,
        graph_tokens: 2,
        lm_dim: 8,
        code_vocab: HashedVocab::new(32, 1),
        max_code_len: 12,
        init_seed: seed,
        ..Default::default()
    })
    .unwrap()
}

fn graph(t: &mut Tape, g: &[f64]) -> verigrag::tensor::Var {
    t.constant(Mat::row_vector(g.to_vec()))
}

#[test]
fn stage1_objectives_all_decrease() {
    let f = fixture();
    for (name, tr) in [("gcc", &f.trace.gcc), ("gcm", &f.trace.gcm), ("gcg", &f.trace.gcg)] {
        assert!(tr.last().unwrap() < &tr[0], "{name}: {tr:?}");
    }
}

#[test]
fn graph_encoder_is_untouched_by_stage1() {
    let (_, ex) = common::toy_extraction(8, 1);
    let enc = verigrag::encoder::GraphEncoder::new(verigrag::encoder::EncoderConfig::default()).unwrap();
    let before = enc.store.digest();
    let codes: Vec<String> = verigrag::toy::toy_corpus(8, 1).into_iter().map(|m| m.code).collect();
    let cfg = Stage1Config { epochs: 1, batch_size: 4, ..Default::default() };
    stage1_train(&enc, &ex.graphs, &codes, VeriFormerConfig::default(), &cfg, Exec::default()).unwrap();
    assert_eq!(enc.store.digest(), before);
}

#[test]
fn alignment_scores_take_the_best_query() {
    let vf = small(0);
    let mut rng = seeded_rng(5, 0);
    let gs: Vec<Vec<f64>> = (0..3).map(|_| (0..6).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect()).collect();
    let codes = [vec![3, 4, 5], vec![7, 8], vec![9, 10, 11, 2]];
    let mut t = Tape::new();
    let g_outs: Vec<_> = gs.iter().map(|g| {
        let v = graph(&mut t, g);
        vf.forward_graph(&mut t, v)
    }).collect();
    let c_rows: Vec<_> = codes.iter().map(|c| vf.forward_code(&mut t, c).unwrap()).collect();
    let c = t.concat_rows(&c_rows);
    let s = alignment_scores(&mut t, &g_outs, c);
    let s = t.value(s).clone();
    for (i, g_out) in g_outs.iter().enumerate() {
        let gi = t.value(*g_out).clone();
        for (j, &c_row) in c_rows.iter().enumerate() {
            let cj = t.value(c_row).row(0).to_vec();
            let want = (0..gi.rows).map(|q| cosine(gi.row(q), &cj)).fold(f64::NEG_INFINITY, f64::max);
            assert!((s.get(i, j) - want).abs() < 1e-12);
        }
    }
    assert!(matches!(gcc_loss(&mut t, &g_outs, c, 0.0), Err(Error::Domain(_))));
}

#[test]
fn causal_mask_hides_future_code() {
    let vf = small(1);
    let g = [0.3, -0.2, 0.1, 0.9, -0.5, 0.0];
    let a = [3, 4, 5, 6, 7];
    let mut b = a;
    b[3] = 20;
    let logits = |code: &[usize]| {
        let mut t = Tape::new();
        let gv = graph(&mut t, &g);
        let l = vf.code_logits(&mut t, gv, code).unwrap();
        t.value(l).clone()
    };
    let (la, lb) = (logits(&a), logits(&b));
    for r in 0..3 {
        assert_eq!(la.row(r), lb.row(r), "row {r} saw a later token");
    }
    assert_ne!(la.row(3), lb.row(3));
}

#[test]
fn zero_graph_makes_cross_attention_uninformative() {
    let vf = small(2);
    let zero = [0.0; 6];
    let mut t = Tape::new();
    let gv = graph(&mut t, &zero);
    let tokens = vf.graph_tokens(&mut t, gv);
    let tok = t.value(tokens).clone();
    assert!(tok.row(0).iter().chain(tok.row(1)).all(|&x| x == 0.0));
    let base = vf.graph_outputs(&zero).unwrap();
    let mut other = vf.clone();
    for b in &other.blocks.clone() {
        let k = other.store.get_mut(b.cross_attn.k.weight);
        *k = k.map(|x| 3.0 * x + 0.1);
    }
    assert!(other.graph_outputs(&zero).unwrap().max_abs_diff(&base) < 1e-12);
}

#[test]
fn matching_score_is_mean_of_query_logits() {
    let vf = small(3);
    let g = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
    let mut t = Tape::new();
    let gv = graph(&mut t, &g);
    let per = vf.match_logits(&mut t, gv, &[4, 5, 6]).unwrap();
    let s = vf.match_score(&mut t, gv, &[4, 5, 6]).unwrap();
    let per = t.value(per).clone();
    let mean = (0..per.rows).map(|r| per.get(r, 0)).sum::<f64>() / per.rows as f64;
    assert!((t.value(s).item() - mean).abs() < 1e-12);
    let gs = [gv, gv];
    let codes = [vec![4, 5], vec![6, 7]];
    assert!(matches!(gcm_loss(&vf, &mut t, &gs, &codes, &[(0, 0, 1.0), (1, 1, 1.0)]), Err(Error::DegenerateBatch(_))));
}

#[test]
fn random_model_matching_is_near_chance() {
    let vf = VeriFormer::new(VeriFormerConfig { init_seed: 11, ..Default::default() }).unwrap();
    let mut rng = seeded_rng(11, 1);
    let pairs: Vec<Stage1Pair> = verigrag::toy::toy_corpus(100, 11)
        .into_iter()
        .map(|m| Stage1Pair { g_emb: (0..128).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect(), code: m.code })
        .collect();
    let acc = matching_accuracy(&vf, &pairs, 0, Exec::default()).unwrap();
    assert!((0.35..=0.65).contains(&acc), "accuracy {acc}");
}

#[test]
fn identity_projection_passes_query_outputs_through() {
    let mut vf = small(4);
    let w = vf.proj.weight;
    *vf.store.get_mut(w) = Mat::identity(8);
    if let Some(b) = vf.proj.bias {
        *vf.store.get_mut(b) = Mat::zeros(1, 8);
    }
    let g = [0.5, 0.1, -0.3, 0.2, 0.0, 1.0];
    assert!(vf.soft_prompt(&g).unwrap().max_abs_diff(&vf.graph_outputs(&g).unwrap()) < 1e-12);
    assert_eq!(vf.soft_prompt(&g).unwrap().shape(), (3, 8));
    assert!(matches!(project_soft_prompt(&vf, &Mat::zeros(3, 5)), Err(Error::Shape(_))));
}

#[test]
fn zero_alpha_total_is_generation_loss_exactly() {
    let f = fixture();
    let s = &samples(f)[0];
    let zero = Stage2Config { alpha: 0.0, ..Default::default() };
    let (total, gen, dist) = stage2_sample_loss(&f.vf, &f.lm, s, &zero).unwrap();
    assert_eq!(total.to_bits(), gen.to_bits());
    assert!(dist >= 0.0);
    let (total, gen2, dist2) = stage2_sample_loss(&f.vf, &f.lm, s, &Stage2Config::default()).unwrap();
    assert_eq!(gen2.to_bits(), gen.to_bits());
    assert!((total - (gen + 0.1 * dist2)).abs() < 1e-12);
}

#[test]
fn stage2_keeps_the_language_model_frozen_and_improves_generation() {
    let f = fixture();
    let before = f.lm.store.digest();
    let cfg = Stage2Config { epochs: 4, ..Default::default() };
    let (tuned, trace) = stage2_train(&f.vf, &f.lm, &samples(f), &cfg).unwrap();
    assert_eq!(f.lm.store.digest(), before);
    assert!(trace.gen.last().unwrap() < &trace.gen[0], "{trace:?}");
    assert!(trace.best_epoch < trace.val_loss.len());
    let back = VeriFormer::from_checkpoint(&tuned.to_checkpoint(STAGE2_KIND)).unwrap();
    let g = &f.pairs[0].g_emb;
    assert_eq!(back.soft_prompt(g).unwrap(), tuned.soft_prompt(g).unwrap());
}

#[test]
fn frozen_core_moves_only_bank_and_projection() {
    let f = fixture();
    let cfg = Stage2Config { epochs: 1, freeze_core: true, val_fraction: 0.0, ..Default::default() };
    let (tuned, _) = stage2_train(&f.vf, &f.lm, &samples(f), &cfg).unwrap();
    for id in tuned.store.ids() {
        let name = tuned.store.name(id);
        let moved = tuned.store.get(id) != f.vf.store.get(id);
        assert_eq!(moved, name == "bank" || name.starts_with("proj."), "{name}");
    }
}

#[test]
fn dimension_mismatch_is_rejected() {
    let f = fixture();
    let vf = VeriFormer::new(VeriFormerConfig { lm_dim: f.lm.embed_dim() + 1, ..Default::default() }).unwrap();
    assert!(matches!(stage2_train(&vf, &f.lm, &samples(f), &Stage2Config::default()), Err(Error::Shape(_))));
}

/// Relative error of `f`'s analytic gradient at `x` against central
/// differences, worst entry.
fn grad_error(x: &Mat, f: impl Fn(&mut Tape, verigrag::tensor::Var) -> verigrag::tensor::Var) -> f64 {
    let mut t = Tape::new();
    let v = t.input(x.clone(), true);
    let out = f(&mut t, v);
    let g = t.backward(out).wrt(v).cloned().unwrap();
    let h = 1e-5;
    let eval = |i: usize, d: f64| {
        let mut xm = x.clone();
        xm.data[i] += d;
        let mut t = Tape::new();
        let v = t.input(xm, false);
        let o = f(&mut t, v);
        t.value(o).item()
    };
    (0..x.len())
        .map(|i| {
            let fd = (eval(i, h) - eval(i, -h)) / (2.0 * h);
            (fd - g.data[i]).abs() / fd.abs().max(g.data[i].abs()).max(1e-2)
        })
        .fold(0.0, f64::max)
}

fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut rng = seeded_rng(seed, 7);
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect())
}

#[test]
fn alignment_losses_have_correct_gradients() {
    let (b, q, d) = (3, 4, 5);
    let x = random_mat(b * q + b, d, 1);
    let gcc = grad_error(&x, |t, v| {
        let g_outs: Vec<_> = (0..b).map(|i| t.slice_rows(v, i * q, q)).collect();
        let codes = t.slice_rows(v, b * q, b);
        gcc_loss(t, &g_outs, codes, 0.3).unwrap()
    });
    assert!(gcc <= 1e-3, "gcc {gcc}");

    let vf = small(5);
    let codes = [vec![3, 4, 5], vec![6, 7], vec![8, 9, 10, 11]];
    let pairs = [(0, 0, 1.0), (0, 1, 0.0), (1, 1, 1.0), (1, 2, 0.0), (2, 2, 1.0), (2, 0, 0.0)];
    let gcm = grad_error(&random_mat(3, 6, 2), |t, v| {
        let graphs: Vec<_> = (0..3).map(|i| t.slice_rows(v, i, 1)).collect();
        gcm_loss(&vf, t, &graphs, &codes, &pairs).unwrap()
    });
    assert!(gcm <= 1e-3, "gcm {gcm}");

    for pairing in [RowPairing::RowMean, RowPairing::Truncate] {
        let kl = grad_error(&random_mat(7, 6, 3), |t, v| {
            let z = t.slice_rows(v, 0, 4);
            let g = t.slice_rows(v, 4, 3);
            kl_distribution_loss(t, z, g, pairing)
        });
        assert!(kl <= 1e-3, "kl {pairing:?} {kl}");
    }
}

#[test]
fn graph_and_code_paths_share_self_attention() {
    let vf = small(6);
    let g = [0.2, -0.4, 0.6, 0.1, 0.0, -0.3];
    let code = [3, 4, 5];
    let code_out = |m: &VeriFormer| {
        let mut t = Tape::new();
        let c = m.forward_code(&mut t, &code).unwrap();
        t.value(c).clone()
    };
    let mut other = vf.clone();
    let w = other.blocks[0].self_attn.v.weight;
    let moved = other.store.get(w).map(|x| x * 1.5 + 0.05);
    *other.store.get_mut(w) = moved;
    assert!(other.graph_outputs(&g).unwrap().max_abs_diff(&vf.graph_outputs(&g).unwrap()) > 1e-6);
    assert!(code_out(&other).max_abs_diff(&code_out(&vf)) > 1e-6);
    let self_attn = vf.store.ids().filter(|&id| vf.store.name(id).contains("self_attn")).count();
    let layers = vf.blocks.len();
    assert_eq!(self_attn % layers, 0);
    assert!(vf.blocks.iter().all(|b| vf.store.name(b.self_attn.q.weight).starts_with("core.")));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn kl_is_non_negative_and_zero_on_equal_rows(
        z in prop::collection::vec(-5.0f64..5.0, 12),
        g in prop::collection::vec(-5.0f64..5.0, 8),
    ) {
        let zm = Mat::from_vec(3, 4, z);
        let gm = Mat::from_vec(2, 4, g);
        for pairing in [RowPairing::RowMean, RowPairing::Truncate] {
            prop_assert!(kl_distribution(&zm, &gm, pairing).unwrap() >= -1e-12);
            prop_assert!(kl_distribution(&zm, &zm, pairing).unwrap().abs() < 1e-12);
        }
    }
}
