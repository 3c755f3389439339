use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{alignment_scores, gcc_from_scores, gcm_loss, kl_distribution_loss, select_negatives, RowPairing, VeriFormer, VeriFormerConfig};
use crate::encoder::GraphEncoder;
use crate::lm::{prompt_ids, target_ids, target_loss, EmbeddingLm};
use crate::netlist::DataPathGraph;
use crate::nn::{AdamW, AdamWConfig, CosineSchedule};
use crate::tensor::{Mat, Tape, Var};
use crate::text::Vocabulary;
use crate::{seeded_rng, Error, Exec, Result};

/// A graph embedding and the code it was extracted from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Pair {
    pub g_emb: Vec<f64>,
    pub code: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_ratio: f64,
    pub tau: f64,
    /// Weights of the contrastive, matching and generation terms.
    pub weights: [f64; 3],
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            epochs: 50,
            batch_size: 8,
            lr: 3e-3,
            min_lr: 1e-5,
            warmup_ratio: 0.03,
            tau: 0.1,
            weights: [1.0; 3],
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

/// Per-epoch means of each objective and their weighted sum.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Trace {
    pub total: Vec<f64>,
    pub gcc: Vec<f64>,
    pub gcm: Vec<f64>,
    pub gcg: Vec<f64>,
}

fn shuffled_batches(n: usize, batch_size: usize, seed: u64, stream: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed, stream));
    order.chunks(batch_size).filter(|c| c.len() >= 2).map(<[usize]>::to_vec).collect()
}

fn g_row(g: &[f64]) -> Mat {
    Mat::row_vector(g.to_vec())
}

/// Encodes `graphs` with the frozen graph encoder, then runs
/// [`stage1_train_pairs`].
pub fn stage1_train(
    encoder: &GraphEncoder,
    graphs: &[DataPathGraph],
    codes: &[String],
    config: VeriFormerConfig,
    cfg: &Stage1Config,
    exec: Exec,
) -> Result<(VeriFormer, Stage1Trace)> {
    if graphs.len() != codes.len() {
        return Err(Error::Shape(format!("{} graphs for {} code strings", graphs.len(), codes.len())));
    }
    let embs = encoder.encode_all(graphs, exec)?;
    let pairs: Vec<Stage1Pair> = embs.into_iter().zip(codes).map(|(g_emb, c)| Stage1Pair { g_emb, code: c.clone() }).collect();
    stage1_train_pairs(&pairs, config, cfg)
}

/// Graph-code alignment: weighted sum of the contrastive, matching and
/// generation objectives, all sharing the query bank and the core.
pub fn stage1_train_pairs(pairs: &[Stage1Pair], config: VeriFormerConfig, cfg: &Stage1Config) -> Result<(VeriFormer, Stage1Trace)> {
    if cfg.batch_size < 2 || pairs.len() < cfg.batch_size || cfg.epochs == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("stage 1 needs batch_size >= 2, at least batch_size pairs, epochs and lr; got {} pairs", pairs.len())));
    }
    let mut vf = VeriFormer::new(config)?;
    let codes: Vec<Vec<usize>> = pairs.iter().map(|p| vf.tokenize_code(&p.code)).collect();
    for (p, c) in pairs.iter().zip(&codes) {
        vf.check_graph(&p.g_emb)?;
        vf.check_code(c, 2)?;
    }
    let steps = shuffled_batches(pairs.len(), cfg.batch_size, cfg.seed, 0x4000).len();
    let schedule = CosineSchedule::new(cfg.lr, cfg.min_lr, cfg.warmup_ratio, cfg.epochs * steps);
    let mut opt = AdamW::new(&vf.store, cfg.optimizer);
    let mut trace = Stage1Trace::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let plan = shuffled_batches(pairs.len(), cfg.batch_size, cfg.seed, 0x4000 + epoch as u64);
        let mut neg_rng = seeded_rng(cfg.seed, 0x4100 + epoch as u64);
        let mut sums = [0.0; 4];
        for batch in &plan {
            let mut tape = Tape::new();
            tape.train(&vf.store);
            let gs: Vec<Var> = batch.iter().map(|&i| tape.constant(g_row(&pairs[i].g_emb))).collect();
            let bcodes: Vec<Vec<usize>> = batch.iter().map(|&i| codes[i].clone()).collect();
            let g_outs: Vec<Var> = gs.iter().map(|&g| vf.forward_graph(&mut tape, g)).collect();
            let c_rows = bcodes.iter().map(|c| vf.forward_code(&mut tape, c)).collect::<Result<Vec<_>>>()?;
            let c = tape.concat_rows(&c_rows);
            let scores = alignment_scores(&mut tape, &g_outs, c);
            let picks = select_negatives(tape.value(scores), &mut neg_rng);
            let gcc = gcc_from_scores(&mut tape, scores, cfg.tau)?;
            let gcm = gcm_loss(&vf, &mut tape, &gs, &bcodes, &picks)?;
            let gen = gs.iter().zip(&bcodes).map(|(&g, c)| vf.gcg_loss(&mut tape, g, c)).collect::<Result<Vec<_>>>()?;
            let gen = tape.concat_rows(&gen);
            let gcg = tape.mean_all(gen);
            let terms = [gcc, gcm, gcg];
            let weighted: Vec<Var> = terms.iter().zip(cfg.weights).map(|(&t, w)| tape.scale(t, w)).collect();
            let s = tape.concat_rows(&weighted);
            let loss = tape.sum_all(s);
            for (acc, v) in sums.iter_mut().zip([loss, gcc, gcm, gcg]) {
                *acc += tape.value(v).item();
            }
            let grads = tape.backward(loss);
            opt.step(&mut vf.store, &grads, schedule.lr(step));
            step += 1;
        }
        let n = plan.len() as f64;
        log::info!(
            "stage 1 epoch {}/{}: total {:.4} gcc {:.4} gcm {:.4} gcg {:.4}",
            epoch + 1,
            cfg.epochs,
            sums[0] / n,
            sums[1] / n,
            sums[2] / n,
            sums[3] / n
        );
        trace.total.push(sums[0] / n);
        trace.gcc.push(sums[1] / n);
        trace.gcm.push(sums[2] / n);
        trace.gcg.push(sums[3] / n);
    }
    Ok((vf, trace))
}

/// Fraction of correct matched / mismatched calls (logit > 0 means matched)
/// over every aligned pair and one seeded mismatched code per graph.
pub fn matching_accuracy(vf: &VeriFormer, pairs: &[Stage1Pair], seed: u64, exec: Exec) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::Config("matching accuracy needs at least two pairs".into()));
    }
    let n = pairs.len();
    let mut rng = seeded_rng(seed, 0x4200);
    let mut probes: Vec<(usize, usize, bool)> = (0..n).map(|i| (i, i, true)).collect();
    for i in 0..n {
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        probes.push((i, j, false));
    }
    let codes: Vec<Vec<usize>> = pairs.iter().map(|p| vf.tokenize_code(&p.code)).collect();
    let right = exec.map(&probes, |&(g, c, label)| -> Result<bool> {
        let mut tape = Tape::new();
        let gv = tape.constant(g_row(&pairs[g].g_emb));
        let s = vf.match_score(&mut tape, gv, &codes[c])?;
        Ok((tape.value(s).item() > 0.0) == label)
    });
    let right = right.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(right.iter().filter(|&&r| r).count() as f64 / probes.len() as f64)
}

/// A description, the retrieved graph's embedding and the target code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Sample {
    pub description: String,
    pub g_emb: Vec<f64>,
    pub code: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_ratio: f64,
    /// Weight of the distribution-alignment term; 0 trains on generation alone.
    pub alpha: f64,
    pub pairing: RowPairing,
    /// Train only the query bank and projection; otherwise the graph-side
    /// core is tuned as well.
    pub freeze_core: bool,
    pub val_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
            min_lr: 1e-5,
            warmup_ratio: 0.03,
            alpha: 0.1,
            pairing: RowPairing::RowMean,
            freeze_core: false,
            val_fraction: 0.2,
            patience: 2,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Trace {
    pub train_loss: Vec<f64>,
    pub gen: Vec<f64>,
    pub dist: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Zero-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

struct Prepared {
    g: Mat,
    prompt: Vec<usize>,
    desc: Vec<usize>,
    target: Vec<usize>,
}

/// `(loss, gen, dist)` for one sample; `dist` is `None` when `alpha` is 0.
fn sample_loss(vf: &VeriFormer, lm: &dyn EmbeddingLm, tape: &mut Tape, s: &Prepared, cfg: &Stage2Config) -> (Var, Var, Option<Var>) {
    let g = tape.constant(s.g.clone());
    let out = vf.forward_graph(tape, g);
    let soft = vf.project(tape, out);
    let prompt = lm.embed_tokens(tape, &s.prompt);
    let prefix = tape.concat_rows(&[soft, prompt]);
    let gen = target_loss(lm, tape, prefix, &s.target);
    if cfg.alpha == 0.0 {
        return (gen, gen, None);
    }
    let z = lm.embed_tokens(tape, &s.desc);
    let dist = kl_distribution_loss(tape, z, soft, cfg.pairing);
    let w = tape.scale(dist, cfg.alpha);
    (tape.add(gen, w), gen, Some(dist))
}

fn prepare(vf: &VeriFormer, lm: &dyn EmbeddingLm, s: &Stage2Sample) -> Result<Prepared> {
    vf.check_graph(&s.g_emb)?;
    let prompt = prompt_ids(lm.vocab(), &s.description);
    let target = target_ids(lm.vocab(), &s.code);
    let desc = if prompt.len() > 2 { prompt[1..prompt.len() - 1].to_vec() } else { vec![Vocabulary::UNK] };
    Ok(Prepared { g: g_row(&s.g_emb), prompt, desc, target })
}

/// `(total, generation, distribution)` loss values for one sample; the
/// distribution term is reported even when `alpha` is 0 but then does not
/// enter the total.
pub fn stage2_sample_loss(vf: &VeriFormer, lm: &dyn EmbeddingLm, sample: &Stage2Sample, cfg: &Stage2Config) -> Result<(f64, f64, f64)> {
    if vf.config.lm_dim != lm.embed_dim() {
        return Err(Error::Shape(format!("projection emits {} columns, language model embeds in {}", vf.config.lm_dim, lm.embed_dim())));
    }
    let p = prepare(vf, lm, sample)?;
    let mut tape = Tape::new();
    let (total, gen, dist) = sample_loss(vf, lm, &mut tape, &p, cfg);
    let dist = match dist {
        Some(d) => tape.value(d).item(),
        None => {
            let soft = {
                let g = tape.constant(p.g.clone());
                let out = vf.forward_graph(&mut tape, g);
                vf.project(&mut tape, out)
            };
            let z = lm.embed_tokens(&mut tape, &p.desc);
            let d = kl_distribution_loss(&mut tape, z, soft, cfg.pairing);
            tape.value(d).item()
        }
    };
    Ok((tape.value(total).item(), tape.value(gen).item(), dist))
}

fn eval_loss(vf: &VeriFormer, lm: &dyn EmbeddingLm, set: &[Prepared], cfg: &Stage2Config) -> f64 {
    let total: f64 = set
        .iter()
        .map(|s| {
            let mut tape = Tape::new();
            let (l, _, _) = sample_loss(vf, lm, &mut tape, s, cfg);
            tape.value(l).item()
        })
        .sum();
    total / set.len() as f64
}

/// Soft-prompt training against a frozen language model: next-token loss on
/// the code given `[soft prompt; BOS description SEP]`, plus `alpha` times
/// the KL between the description's token embeddings and the soft prompt.
/// A held-out split drives early stopping; the best epoch's weights are kept.
pub fn stage2_train(vf: &VeriFormer, lm: &dyn EmbeddingLm, samples: &[Stage2Sample], cfg: &Stage2Config) -> Result<(VeriFormer, Stage2Trace)> {
    if cfg.batch_size == 0 || cfg.epochs == 0 || !(cfg.lr > 0.0) || !(cfg.alpha >= 0.0) || !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::Config("stage 2 needs a positive batch size, epochs and lr, alpha >= 0 and val_fraction in [0, 1)".into()));
    }
    if vf.config.lm_dim != lm.embed_dim() {
        return Err(Error::Shape(format!("projection emits {} columns, language model embeds in {}", vf.config.lm_dim, lm.embed_dim())));
    }
    let q = vf.config.num_queries;
    let mut prepared = Vec::with_capacity(samples.len());
    for s in samples {
        let p = prepare(vf, lm, s)?;
        let len = q + p.prompt.len() + p.target.len();
        if len > lm.max_len() {
            log::warn!("skipping a stage 2 sample of {len} tokens; context is {}", lm.max_len());
            continue;
        }
        prepared.push(p);
    }
    if prepared.is_empty() {
        return Err(Error::Config("no stage 2 sample fits the language model context".into()));
    }
    prepared.shuffle(&mut seeded_rng(cfg.seed, 0x5000));
    let n_val = (prepared.len() as f64 * cfg.val_fraction).floor() as usize;
    let n_val = n_val.min(prepared.len() - 1);
    let val = prepared.split_off(prepared.len() - n_val);
    let train = prepared;

    let mut vf = vf.clone();
    let steps = train.len().div_ceil(cfg.batch_size);
    let schedule = CosineSchedule::new(cfg.lr, cfg.min_lr, cfg.warmup_ratio, cfg.epochs * steps);
    let opt = AdamW::new(&vf.store, cfg.optimizer);
    let mut opt = if cfg.freeze_core {
        opt.with_filter(|n| n == "bank" || n.starts_with("proj."))
    } else {
        opt.with_filter(super::is_graph_side)
    };
    let mut trace = Stage2Trace::default();
    let mut best = (f64::INFINITY, vf.store.clone());
    let mut since_best = 0;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seeded_rng(cfg.seed, 0x5100 + epoch as u64));
        let mut sums = [0.0; 3];
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            tape.train(&vf.store);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let (l, g, d) = sample_loss(&vf, lm, &mut tape, &train[i], cfg);
                sums[1] += tape.value(g).item();
                sums[2] += d.map_or(0.0, |d| tape.value(d).item());
                losses.push(l);
            }
            let stacked = tape.concat_rows(&losses);
            let loss = tape.mean_all(stacked);
            sums[0] += tape.value(loss).item() * batch.len() as f64;
            let grads = tape.backward(loss);
            opt.step(&mut vf.store, &grads, schedule.lr(step));
            step += 1;
        }
        let n = train.len() as f64;
        trace.train_loss.push(sums[0] / n);
        trace.gen.push(sums[1] / n);
        trace.dist.push(sums[2] / n);
        let monitored = if val.is_empty() { sums[0] / n } else { eval_loss(&vf, lm, &val, cfg) };
        trace.val_loss.push(monitored);
        log::info!("stage 2 epoch {}/{}: train {:.4} val {monitored:.4}", epoch + 1, cfg.epochs, sums[0] / n);
        if monitored < best.0 {
            best = (monitored, vf.store.clone());
            trace.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience.max(1) {
                trace.stopped_early = epoch + 1 < cfg.epochs;
                break;
            }
        }
    }
    vf.store.copy_values_from(&best.1);
    Ok((vf, trace))
}
