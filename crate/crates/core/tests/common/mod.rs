#![allow(dead_code)]

use verigrag::netlist::corpus::{extract, Extraction};
use verigrag::netlist::dedup::DedupConfig;
use verigrag::netlist::VerilogSource;
use verigrag::toy::{toy_corpus, ToyModule};
use verigrag::Exec;

/// Extracts graphs and pairs from `n` toy modules.
pub fn toy_extraction(n: usize, seed: u64) -> (Vec<ToyModule>, Extraction) {
    let mods = toy_corpus(n, seed);
    let sources: Vec<VerilogSource> =
        mods.iter().map(|m| VerilogSource::new(format!("{}.v", m.name), m.code.clone()).unwrap()).collect();
    // Toy modules are short and share boilerplate; only exact copies should go.
    let dedup = DedupConfig { threshold: 1.01, ..Default::default() };
    let ex = extract(&sources, &dedup, Exec::default());
    assert_eq!(ex.graphs.len(), n, "{:?}", ex.skipped);
    (mods, ex)
}

/// Toy descriptions paired with embeddings from a graph encoder trained on
/// their graphs.
pub fn toy_pairs(n: usize, seed: u64) -> (Extraction, verigrag::encoder::GraphEncoder, verigrag::retriever::PairSet) {
    use verigrag::encoder::{train_encoder, EncoderConfig, EncoderTrainConfig};
    use verigrag::tensor::Mat;
    let (mods, ex) = toy_extraction(n, seed);
    let (enc, _) = train_encoder(&ex.graphs, EncoderConfig::default(), &EncoderTrainConfig::default(), Exec::default()).unwrap();
    let embs = enc.encode_all(&ex.graphs, Exec::default()).unwrap();
    let rows: Vec<Mat> = embs.into_iter().map(Mat::row_vector).collect();
    let pairs =
        verigrag::retriever::PairSet::new(mods.iter().map(|m| m.description.clone()).collect(), Mat::stack_rows(&rows)).unwrap();
    (ex, enc, pairs)
}
