use criterion::{criterion_group, criterion_main, Criterion};

use deftri_bench::corpus;
use deftri_core::augmentation::{augment_dataset, AugmentConfig, EmbeddingTable};
use deftri_core::balancing::mlsmote;
use deftri_core::corpus::SyntheticCorpusSpec;
use deftri_core::tokenizer::{build_vocab, EncodedDataset, InputVariant};
use deftri_core::weak_supervision::{keyword_lfs_for_pools, weak_label_dataset, LabelModelParams};

fn stages(c: &mut Criterion) {
    let ds = corpus(2000, 7);
    let spec = SyntheticCorpusSpec::new(0, 7);
    let lfs = keyword_lfs_for_pools(&spec.registry, &spec.keyword_pool).unwrap();
    let params = LabelModelParams::uniform(lfs.len());
    let table = EmbeddingTable::bundled();
    let cfg = AugmentConfig::default();

    let mut group = c.benchmark_group("pipeline 2000");
    group.sample_size(10);
    group.bench_function("generate", |b| b.iter(|| corpus(2000, 7)));
    group.bench_function("weak_label", |b| b.iter(|| weak_label_dataset(&ds, &lfs, &params).unwrap()));
    group.bench_function("augment", |b| b.iter(|| augment_dataset(&ds, &cfg, &table).unwrap()));
    group.bench_function("mlsmote", |b| b.iter(|| mlsmote(&ds, 5, 1).unwrap()));
    let vocab = build_vocab(&ds, 1, 30_000).unwrap();
    group.bench_function("encode fuse_sep", |b| {
        b.iter(|| EncodedDataset::new(&ds, &vocab, InputVariant::FuseSep, 64).unwrap())
    });
    group.finish();
}

criterion_group!(benches, stages);
criterion_main!(benches);
