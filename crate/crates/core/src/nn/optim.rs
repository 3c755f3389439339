use serde::{Deserialize, Serialize};

use crate::tensor::{Grads, Mat, ParamStore};

type NameFilter = Box<dyn Fn(&str) -> bool + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.1 }
    }
}

/// Decoupled-weight-decay Adam over one [`ParamStore`].
///
/// Decay applies only to 2-D weight matrices; biases, gains and scalars are
/// left alone.
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: u64,
    filter: Option<NameFilter>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let m: Vec<Mat> = store.ids().map(|id| { let p = store.get(id); Mat::zeros(p.rows, p.cols) }).collect();
        AdamW { cfg, v: m.clone(), m, step: 0, filter: None }
    }

    /// Restricts updates to parameters whose name passes `keep`.
    pub fn with_filter(mut self, keep: impl Fn(&str) -> bool + Send + Sync + 'static) -> Self {
        self.filter = Some(Box::new(keep));
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if let Some(f) = &self.filter {
                if !f(store.name(id)) {
                    continue;
                }
            }
            let Some(g) = grads.param(store, id) else { continue };
            let decay = {
                let p = store.get(id);
                p.rows > 1 && p.cols > 1
            };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                if decay {
                    p.data[i] -= lr * c.weight_decay * p.data[i];
                }
                p.data[i] -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

/// Linear warm-up followed by cosine decay from `base_lr` to `min_lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, min_lr: f64, warmup_ratio: f64, total_steps: usize) -> Self {
        let warmup_steps = (warmup_ratio * total_steps as f64).ceil() as usize;
        CosineSchedule { base_lr, min_lr, warmup_steps, total_steps: total_steps.max(1) }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = CosineSchedule::new(1.0, 0.0, 0.1, 100);
        assert_eq!(s.warmup_steps, 10);
        assert!((s.lr(0) - 0.1).abs() < 1e-12);
        assert!((s.lr(9) - 1.0).abs() < 1e-12);
        assert!((s.lr(10) - 1.0).abs() < 1e-12);
        assert!(s.lr(55) < 0.6 && s.lr(55) > 0.4);
        assert!(s.lr(100).abs() < 1e-12);
    }

    #[test]
    fn adamw_minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Mat::from_rows(&[[3.0, -2.0]]));
        let mut opt = AdamW::new(&store, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        for _ in 0..500 {
            let mut t = Tape::new();
            t.train(&store);
            let x = t.param(&store, id);
            let sq = t.mul(x, x);
            let l = t.sum_all(sq);
            let g = t.backward(l);
            opt.step(&mut store, &g, 0.05);
        }
        assert!(store.get(id).data.iter().all(|v| v.abs() < 1e-2));
    }
}
