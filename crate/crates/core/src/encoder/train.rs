use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{augment, info_nce, AugmentationPolicy, EncoderConfig, GraphEncoder, GraphView, PackedBatch};
use crate::netlist::DataPathGraph;
use crate::nn::{AdamW, AdamWConfig, CosineSchedule};
use crate::tensor::{cosine, Tape};
use crate::{seeded_rng, Error, Exec, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_ratio: f64,
    pub tau: f64,
    pub optimizer: AdamWConfig,
    pub augment: AugmentationPolicy,
    /// Seeds batch shuffling.
    pub seed: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        EncoderTrainConfig {
            epochs: 50,
            batch_size: 16,
            lr: 1e-3,
            min_lr: 1e-5,
            warmup_ratio: 0.03,
            tau: 0.2,
            optimizer: AdamWConfig::default(),
            augment: AugmentationPolicy::default(),
            seed: 0,
        }
    }
}

impl EncoderTrainConfig {
    fn validate(&self, corpus_len: usize) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if corpus_len < self.batch_size {
            return Err(Error::Config(format!("corpus of {corpus_len} graphs cannot fill a batch of {}", self.batch_size)));
        }
        if self.epochs == 0 || self.lr.is_nan() || self.lr <= 0.0 || self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::Config("epochs, lr and tau must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.augment.edge_drop_prob) || self.augment.feature_noise_sigma < 0.0 {
            return Err(Error::Config("edge_drop_prob must lie in [0, 1) and noise sigma must be non-negative".into()));
        }
        Ok(())
    }
}

fn batches(n: usize, batch_size: usize, epoch: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed, 0x1000 + epoch as u64));
    order.chunks(batch_size).filter(|c| c.len() >= 2).map(<[usize]>::to_vec).collect()
}

/// Contrastive training on pairs of augmented views. Returns the trained
/// encoder and the mean loss of every epoch.
pub fn train_encoder(
    corpus: &[DataPathGraph],
    config: EncoderConfig,
    cfg: &EncoderTrainConfig,
    exec: Exec,
) -> Result<(GraphEncoder, Vec<f64>)> {
    cfg.validate(corpus.len())?;
    let mut enc = GraphEncoder::new(config)?;
    if corpus.iter().any(|g| g.nodes.is_empty()) {
        return Err(Error::EmptyGraph);
    }
    let base: Vec<GraphView> = exec.map(corpus, |g| enc.view(g));
    let n = corpus.len();
    let steps_per_epoch = batches(n, cfg.batch_size, 0, cfg.seed).len();
    let schedule = CosineSchedule::new(cfg.lr, cfg.min_lr, cfg.warmup_ratio, cfg.epochs * steps_per_epoch);
    let mut opt = AdamW::new(&enc.store, cfg.optimizer);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let plan = batches(n, cfg.batch_size, epoch, cfg.seed);
        for batch in &plan {
            let views = exec.map_range(2 * batch.len(), |k| {
                let gi = batch[k / 2];
                let draw = ((epoch * n + gi) * 2 + k % 2) as u64;
                augment(&base[gi], &cfg.augment, draw)
            });
            let (v1, v2): (Vec<GraphView>, Vec<GraphView>) =
                views.chunks(2).map(|p| (p[0].clone(), p[1].clone())).unzip();
            let mut tape = Tape::new();
            tape.train(&enc.store);
            let z1 = enc.forward_packed(&mut tape, &PackedBatch::pack(&v1));
            let z2 = enc.forward_packed(&mut tape, &PackedBatch::pack(&v2));
            let loss = info_nce(&mut tape, z1, z2, cfg.tau);
            total += tape.value(loss).item();
            let grads = tape.backward(loss);
            opt.step(&mut enc.store, &grads, schedule.lr(step));
            step += 1;
        }
        let mean = total / plan.len() as f64;
        log::info!("encoder epoch {}/{}: loss {mean:.4}", epoch + 1, cfg.epochs);
        trace.push(mean);
    }
    Ok((enc, trace))
}

/// Fraction of graphs whose first augmented view has its own second view as
/// the cosine nearest neighbour among all second views.
pub fn view_recall_at_1(enc: &GraphEncoder, graphs: &[DataPathGraph], policy: &AugmentationPolicy, exec: Exec) -> Result<f64> {
    if graphs.is_empty() {
        return Ok(0.0);
    }
    const PROBE_DRAW: u64 = 1 << 40;
    let z = exec.map_range(2 * graphs.len(), |k| {
        let v = augment(&enc.view(&graphs[k / 2]), policy, PROBE_DRAW + k as u64);
        enc.encode_view(&v)
    });
    let z: Vec<Vec<f64>> = z.into_iter().collect::<Result<_>>()?;
    let hits = (0..graphs.len())
        .filter(|&i| {
            let q = &z[2 * i];
            let best = (0..graphs.len())
                .map(|j| (j, cosine(q, &z[2 * j + 1])))
                .fold((usize::MAX, f64::NEG_INFINITY), |acc, (j, s)| if s > acc.1 { (j, s) } else { acc });
            best.0 == i
        })
        .count();
    Ok(hits as f64 / graphs.len() as f64)
}
