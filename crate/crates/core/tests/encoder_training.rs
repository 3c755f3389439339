mod common;

use std::time::Instant;

use verigrag::encoder::{train_encoder, view_recall_at_1, EncoderConfig, EncoderTrainConfig};
use verigrag::Exec;

#[test]
fn contrastive_training_separates_views() {
    let (_, ex) = common::toy_extraction(32, 0);
    let cfg = EncoderTrainConfig::default();
    let start = Instant::now();
    let (enc, trace) = train_encoder(&ex.graphs, EncoderConfig::default(), &cfg, Exec::default()).unwrap();
    let recall = view_recall_at_1(&enc, &ex.graphs, &cfg.augment, Exec::default()).unwrap();
    eprintln!("trace first {:.4} last {:.4} recall {recall} in {:?}", trace[0], trace[trace.len() - 1], start.elapsed());
    assert!(trace[trace.len() - 1] < 0.7 * trace[0]);
    assert!(recall >= 0.9);
}
