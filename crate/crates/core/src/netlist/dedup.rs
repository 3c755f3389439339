//! Near-duplicate filtering with MinHash over token 3-gram shingles.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::VerilogSource;
use crate::text::{split_tokens, stable_hash};
use crate::{seeded_rng, Exec};

const MERSENNE_61: u64 = (1 << 61) - 1;
const SHINGLE_SEED: u64 = 0x5348_494e_474c_4533;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DedupConfig {
    pub threshold: f64,
    pub num_hashes: usize,
    pub seed: u64,
}

impl Default for DedupConfig {
    fn default() -> Self {
        DedupConfig { threshold: 0.8, num_hashes: 256, seed: 0 }
    }
}

/// Sorted, deduplicated hashes of the token 3-grams of `text`. Comments and
/// whitespace never reach the tokens, so reformatting does not change the
/// set. Texts shorter than three tokens yield a single shingle.
pub fn shingles(text: &str) -> Vec<u64> {
    let toks = split_tokens(text);
    let mut out: Vec<u64> = if toks.len() < 3 {
        if toks.is_empty() {
            Vec::new()
        } else {
            vec![shingle_hash(&toks)]
        }
    } else {
        toks.windows(3).map(shingle_hash).collect()
    };
    out.sort_unstable();
    out.dedup();
    out
}

fn shingle_hash(toks: &[&str]) -> u64 {
    stable_hash(SHINGLE_SEED, toks.join("\u{1f}").as_bytes())
}

/// Hash of an arbitrary shingle label, for building sets by hand.
pub fn shingle_of(label: &str) -> u64 {
    stable_hash(SHINGLE_SEED, label.as_bytes())
}

/// Exact Jaccard similarity of two sorted, deduplicated sets. Two empty sets
/// count as identical.
pub fn exact_jaccard(a: &[u64], b: &[u64]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    inter as f64 / (a.len() + b.len() - inter) as f64
}

/// Family of universal hashes `(a·x + b) mod (2^61 − 1)`.
#[derive(Clone, Debug)]
pub struct MinHasher {
    a: Vec<u64>,
    b: Vec<u64>,
}

impl MinHasher {
    pub fn new(num_hashes: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, 0);
        let a = (0..num_hashes).map(|_| rng.random_range(1..MERSENNE_61)).collect();
        let b = (0..num_hashes).map(|_| rng.random_range(0..MERSENNE_61)).collect();
        MinHasher { a, b }
    }

    pub fn num_hashes(&self) -> usize {
        self.a.len()
    }

    pub fn signature(&self, set: &[u64]) -> Vec<u64> {
        self.a
            .iter()
            .zip(&self.b)
            .map(|(&a, &b)| {
                set.iter()
                    .map(|&x| ((a as u128 * (x % MERSENNE_61) as u128 + b as u128) % MERSENNE_61 as u128) as u64)
                    .min()
                    .unwrap_or(u64::MAX)
            })
            .collect()
    }
}

/// Fraction of positions where two signatures agree.
pub fn estimate_jaccard(a: &[u64], b: &[u64]) -> f64 {
    assert_eq!(a.len(), b.len(), "signature lengths differ");
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

/// Indices of the texts that survive a greedy scan in input order: a text is
/// dropped when its estimated similarity to any already retained text reaches
/// `cfg.threshold`. Signatures are computed in parallel; the scan is sequential.
pub fn dedup_indices(texts: &[&str], cfg: &DedupConfig, exec: Exec) -> Vec<usize> {
    let hasher = MinHasher::new(cfg.num_hashes, cfg.seed);
    let sigs = exec.map(texts, |t| hasher.signature(&shingles(t)));
    let mut kept: Vec<usize> = Vec::new();
    for i in 0..texts.len() {
        if kept.iter().all(|&k| estimate_jaccard(&sigs[i], &sigs[k]) < cfg.threshold) {
            kept.push(i);
        }
    }
    kept
}

pub fn jaccard_minhash_dedup(sources: &[VerilogSource], cfg: &DedupConfig, exec: Exec) -> Vec<VerilogSource> {
    let texts: Vec<&str> = sources.iter().map(|s| s.text.as_str()).collect();
    dedup_indices(&texts, cfg, exec).into_iter().map(|i| sources[i].clone()).collect()
}
