//! Shared fixtures for the criterion benches.

use deftri_core::corpus::{generate_synthetic_corpus, SyntheticCorpusSpec};
use deftri_core::model::{EncoderConfig, HeadConfig, HeadKind, Model, ModelDims};
use deftri_core::tokenizer::{build_vocab, EncodedDataset, InputVariant};
use deftri_core::Dataset;

/// Synthetic training split of `size` defects.
pub fn corpus(size: usize, seed: u64) -> Dataset {
    generate_synthetic_corpus(&SyntheticCorpusSpec::new(size, seed)).expect("default spec is valid")
}

/// A desk-size model (H=64, 2 layers) and one encoded batch for it.
pub fn model_and_batch(head: HeadKind, batch: usize) -> (Model<f32>, EncodedDataset) {
    let ds = corpus(batch, 1);
    let vocab = build_vocab(&ds, 1, 30_000).expect("vocab");
    let encoded = EncodedDataset::new(&ds, &vocab, InputVariant::FuseSep, 64).expect("encode");
    let enc = EncoderConfig::with_dims(vocab.len(), 64, ModelDims::default());
    let model = Model::init(enc, HeadConfig::new(head, &enc, ds.registry.len()), 3).expect("init");
    (model, encoded)
}
