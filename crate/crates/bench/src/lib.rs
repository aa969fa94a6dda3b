//! Shared fixtures for the criterion benches.

use kplug_core::corpus::{build_vocab, generate_synthetic, GenProfile, ProductDocument, Vocab};
use kplug_core::model::{ModelConfig, TransformerModel};
use kplug_core::tensor::Precision;

pub fn bench_corpus() -> (Vec<ProductDocument>, Vocab) {
    let docs = generate_synthetic(42, 16, 40, &GenProfile::desk()).expect("corpus");
    let vocab = build_vocab(&docs, 1).expect("vocab");
    (docs, vocab)
}

pub fn desk_model(vocab_size: usize) -> TransformerModel {
    TransformerModel::seeded(ModelConfig::desk(vocab_size), Precision::F32, 42).expect("model")
}
