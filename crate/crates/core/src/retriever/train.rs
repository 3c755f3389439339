use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{check_embeddings, CrossAttentionEncoder, DualEncoder, RetrieverConfig};
use crate::encoder::{diagonal_nce, info_nce};
use crate::nn::{mse, AdamW, AdamWConfig, CosineSchedule};
use crate::tensor::{Mat, Tape};
use crate::{seeded_rng, Error, Exec, Result};

/// Descriptions aligned row-for-row with graph embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    pub descriptions: Vec<String>,
    pub embeddings: Mat,
}

impl PairSet {
    pub fn new(descriptions: Vec<String>, embeddings: Mat) -> Result<Self> {
        if descriptions.len() != embeddings.rows {
            return Err(Error::Shape(format!("{} descriptions for {} embeddings", descriptions.len(), embeddings.rows)));
        }
        Ok(PairSet { descriptions, embeddings })
    }

    pub fn len(&self) -> usize {
        self.descriptions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptions.is_empty()
    }

    pub(crate) fn tokenize(&self, cfg: &RetrieverConfig) -> Result<Vec<Vec<usize>>> {
        self.descriptions.iter().map(|d| cfg.tokenize(d)).collect()
    }

    fn rows(&self, idx: &[usize]) -> Mat {
        Mat::stack_rows(&idx.iter().map(|&i| Mat::row_vector(self.embeddings.row(i).to_vec())).collect::<Vec<_>>())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrieverTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_ratio: f64,
    pub tau: f64,
    /// λ, the weight of the MSE-to-teacher terms. Unused by the teacher.
    pub mse_weight: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl RetrieverTrainConfig {
    /// 15 epochs at 1e-3. Towers start from random weights, so the rate is
    /// well above what a pretrained text encoder would need.
    pub fn teacher() -> Self {
        RetrieverTrainConfig {
            epochs: 15,
            batch_size: 16,
            lr: 1e-3,
            min_lr: 0.0,
            warmup_ratio: 0.03,
            tau: 0.2,
            mse_weight: 0.0,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }

    /// 100 epochs at 5e-4 with λ = 1.
    pub fn student() -> Self {
        RetrieverTrainConfig { epochs: 100, lr: 5e-4, mse_weight: 1.0, ..Self::teacher() }
    }

    fn validate(&self, num_pairs: usize) -> Result<()> {
        if self.batch_size < 2 || num_pairs < self.batch_size {
            return Err(Error::Config(format!("need batch_size >= 2 and at least batch_size pairs, got {} and {num_pairs}", self.batch_size)));
        }
        if self.epochs == 0 || !(self.lr > 0.0) || !(self.tau > 0.0) {
            return Err(Error::Config("epochs, lr and tau must be positive".into()));
        }
        if !(self.mse_weight >= 0.0) {
            return Err(Error::Config(format!("mse_weight must be non-negative, got {}", self.mse_weight)));
        }
        Ok(())
    }
}

fn batches(n: usize, batch_size: usize, epoch: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed, 0x2000 + epoch as u64));
    order.chunks(batch_size).filter(|c| c.len() >= 2).map(<[usize]>::to_vec).collect()
}

/// Every negative in the batch equals its positive, so the contrastive
/// signal is zero.
fn degenerate(pairs: &PairSet, batch: &[usize]) -> bool {
    let first = batch[0];
    batch[1..]
        .iter()
        .all(|&i| pairs.descriptions[i] == pairs.descriptions[first] && pairs.embeddings.row(i) == pairs.embeddings.row(first))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TeacherTrace {
    pub loss: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Contrastive teacher training. Each batch of `B` aligned pairs is scored
/// jointly as a `B × B` grid (query `i` with graph `j`); InfoNCE takes the
/// aligned pairs on the diagonal as positives.
pub fn train_teacher(pairs: &PairSet, config: RetrieverConfig, cfg: &RetrieverTrainConfig) -> Result<(CrossAttentionEncoder, TeacherTrace)> {
    cfg.validate(pairs.len())?;
    check_embeddings(&config, &pairs.embeddings)?;
    let mut teacher = CrossAttentionEncoder::new(config)?;
    let seqs = pairs.tokenize(&config)?;
    let steps = batches(pairs.len(), cfg.batch_size, 0, cfg.seed).len();
    let schedule = CosineSchedule::new(cfg.lr, cfg.min_lr, cfg.warmup_ratio, cfg.epochs * steps);
    let mut opt = AdamW::new(&teacher.store, cfg.optimizer);
    let mut trace = TeacherTrace::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let plan = batches(pairs.len(), cfg.batch_size, epoch, cfg.seed);
        let mut total = 0.0;
        for batch in &plan {
            if degenerate(pairs, batch) {
                let msg = format!("degenerate input: epoch {} batch of {} identical pairs", epoch + 1, batch.len());
                log::warn!("{msg}");
                trace.warnings.push(msg);
            }
            let b = batch.len();
            let bseqs: Vec<Vec<usize>> = batch.iter().map(|&i| seqs[i].clone()).collect();
            let grid: Vec<(usize, usize)> = (0..b).flat_map(|i| (0..b).map(move |j| (i, j))).collect();
            let mut tape = Tape::new();
            tape.train(&teacher.store);
            let g = tape.constant(pairs.rows(batch));
            let (q, gv) = teacher.encode_pairs(&mut tape, &bseqs, g, &grid);
            let qn = tape.l2_normalize_rows(q);
            let gn = tape.l2_normalize_rows(gv);
            let prod = tape.mul(qn, gn);
            let sims = tape.sum_cols(prod);
            let logits = tape.reshape(sims, b, b);
            let logits = tape.scale(logits, 1.0 / cfg.tau);
            let loss = diagonal_nce(&mut tape, logits);
            total += tape.value(loss).item();
            let grads = tape.backward(loss);
            opt.step(&mut teacher.store, &grads, schedule.lr(step));
            step += 1;
        }
        let mean = total / plan.len() as f64;
        log::info!("teacher epoch {}/{}: loss {mean:.4}", epoch + 1, cfg.epochs);
        trace.loss.push(mean);
    }
    Ok((teacher, trace))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StudentTrace {
    pub loss: Vec<f64>,
    pub nce: Vec<f64>,
    /// Mean of `MSE(q) + MSE(g)` against the teacher over the epoch's batches.
    pub mse: Vec<f64>,
}

/// `MSE(student q, teacher q) + MSE(student g, teacher g)` over all pairs,
/// with teacher outputs `targets` from [`CrossAttentionEncoder::encode_aligned`].
pub fn mse_to_teacher(student: &DualEncoder, pairs: &PairSet, targets: &(Mat, Mat)) -> Result<f64> {
    let q = student.encode_queries(&pairs.descriptions)?;
    let g = student.encode_graphs(&pairs.embeddings)?;
    let m = |a: &Mat, b: &Mat| a.zip_map(b, |x, y| (x - y) * (x - y)).sum() / a.len() as f64;
    Ok(m(&q, &targets.0) + m(&g, &targets.1))
}

/// Dual-encoder training: in-batch InfoNCE plus `λ` times the squared error
/// to the frozen teacher's outputs on the same aligned pairs. With `λ = 0` the
/// teacher term is absent.
pub fn distill_student(
    pairs: &PairSet,
    teacher: &CrossAttentionEncoder,
    config: RetrieverConfig,
    cfg: &RetrieverTrainConfig,
    exec: Exec,
) -> Result<(DualEncoder, StudentTrace)> {
    cfg.validate(pairs.len())?;
    if teacher.config.out_dim != config.out_dim || teacher.config.graph_dim != config.graph_dim {
        return Err(Error::Config("student and teacher dimensions differ".into()));
    }
    check_embeddings(&config, &pairs.embeddings)?;
    let mut student = DualEncoder::new(config)?;
    let seqs = pairs.tokenize(&config)?;
    let (tq, tg) = if cfg.mse_weight > 0.0 {
        teacher.encode_aligned(pairs, exec)?
    } else {
        (Mat::zeros(0, 0), Mat::zeros(0, 0))
    };
    let steps = batches(pairs.len(), cfg.batch_size, 0, cfg.seed).len();
    let schedule = CosineSchedule::new(cfg.lr, cfg.min_lr, cfg.warmup_ratio, cfg.epochs * steps);
    let mut opt = AdamW::new(&student.store, cfg.optimizer);
    let mut trace = StudentTrace::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let plan = batches(pairs.len(), cfg.batch_size, epoch, cfg.seed);
        let (mut total, mut nce_total, mut mse_total) = (0.0, 0.0, 0.0);
        for batch in &plan {
            let bseqs: Vec<Vec<usize>> = batch.iter().map(|&i| seqs[i].clone()).collect();
            let mut tape = Tape::new();
            tape.train(&student.store);
            let q = student.text.forward(&mut tape, &student.store, &bseqs);
            let g = tape.constant(pairs.rows(batch));
            let gv = student.graph.forward(&mut tape, &student.store, g);
            let nce = info_nce(&mut tape, q, gv, cfg.tau);
            nce_total += tape.value(nce).item();
            let loss = if cfg.mse_weight > 0.0 {
                let pick = |m: &Mat| Mat::stack_rows(&batch.iter().map(|&i| Mat::row_vector(m.row(i).to_vec())).collect::<Vec<_>>());
                let tqb = tape.constant(pick(&tq));
                let tgb = tape.constant(pick(&tg));
                let mq = mse(&mut tape, q, tqb);
                let mg = mse(&mut tape, gv, tgb);
                let m = tape.add(mq, mg);
                mse_total += tape.value(m).item();
                let weighted = tape.scale(m, cfg.mse_weight);
                tape.add(nce, weighted)
            } else {
                nce
            };
            total += tape.value(loss).item();
            let grads = tape.backward(loss);
            opt.step(&mut student.store, &grads, schedule.lr(step));
            step += 1;
        }
        let n = plan.len() as f64;
        log::info!("student epoch {}/{}: loss {:.4}", epoch + 1, cfg.epochs, total / n);
        trace.loss.push(total / n);
        trace.nce.push(nce_total / n);
        trace.mse.push(mse_total / n);
    }
    Ok((student, trace))
}

/// Fraction of rows whose diagonal entry ranks within the top `k`. Ties are
/// broken toward the lower column index.
pub fn recall_at_k(scores: &Mat, k: usize) -> f64 {
    if scores.rows == 0 {
        return 0.0;
    }
    let hits = (0..scores.rows)
        .filter(|&i| {
            let row = scores.row(i);
            let gold = row[i];
            let ahead = row.iter().enumerate().filter(|&(j, &s)| s > gold || (s == gold && j < i)).count();
            ahead < k
        })
        .count();
    hits as f64 / scores.rows as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recall_ties_favour_lower_index() {
        let s = Mat::from_rows(&[[0.5, 0.5, 0.1], [0.9, 0.9, 0.0], [0.2, 0.2, 0.2]]);
        assert_eq!(recall_at_k(&s, 1), 1.0 / 3.0);
        assert_eq!(recall_at_k(&s, 2), 2.0 / 3.0);
        assert_eq!(recall_at_k(&s, 3), 1.0);
    }

    #[test]
    fn config_errors() {
        let p = PairSet::new(vec!["a".into(), "b".into()], Mat::zeros(2, 128)).unwrap();
        let cfg = RetrieverTrainConfig { batch_size: 4, ..RetrieverTrainConfig::teacher() };
        assert!(matches!(train_teacher(&p, RetrieverConfig::default(), &cfg), Err(Error::Config(_))));
        let cfg = RetrieverTrainConfig { batch_size: 2, mse_weight: -1.0, ..RetrieverTrainConfig::student() };
        let t = CrossAttentionEncoder::new(RetrieverConfig::default()).unwrap();
        assert!(matches!(distill_student(&p, &t, RetrieverConfig::default(), &cfg, Exec::Sequential), Err(Error::Config(_))));
    }
}
