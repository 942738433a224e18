use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use deftri_bench::model_and_batch;
use deftri_core::model::HeadKind;
use deftri_core::numerics::graph::bce_value;
use deftri_core::numerics::{adam_step, AdamConfig, Graph, OptimizerState, Tensor};
use deftri_core::seed;
use deftri_core::tokenizer::EncodedInput;

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for n in [64, 256] {
        let a: Vec<f32> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = Tensor::new([n, n], a).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &a, |b, a| b.iter(|| a.matmul(a, true).unwrap()));
    }
    group.finish();
}

fn loss(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (b, t) = (16, 15);
    let x: Vec<f64> = (0..b * t).map(|_| rng.random_range(-20.0..20.0)).collect();
    let y: Vec<u8> = (0..b * t).map(|_| u8::from(rng.random_bool(0.3))).collect();
    c.bench_function("bce_with_logits 16x15", |bench| bench.iter(|| bce_value(&x, &y, &[1.0; 15], &[1.0; 16], t)));
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for head in HeadKind::ALL {
        let (mut model, batch) = model_and_batch(head, 16);
        let inputs: Vec<&EncodedInput> = batch.inputs.iter().collect();
        let targets: Vec<u8> = batch.targets.concat();
        let mut opt = OptimizerState::new(AdamConfig { lr: 1e-3, ..AdamConfig::default() }, model.params());
        group.bench_function(head.to_string(), |b| {
            b.iter(|| {
                let mut g = Graph::train(seed::stream(0, "bench"));
                let vars = model.bind(&mut g, true).unwrap();
                let logits = model.forward(&mut g, &vars, &inputs).unwrap();
                let loss = g.bce_with_logits(logits, &targets, &[1.0; 15], None).unwrap();
                let grads = g.backward(loss).unwrap().into_param_grads(vars.len());
                adam_step(model.params_mut(), &grads, &mut opt).unwrap();
            })
        });
    }
    group.finish();
}

fn inference(c: &mut Criterion) {
    let (model, batch) = model_and_batch(HeadKind::Linear, 64);
    c.bench_function("logits 64 defects", |b| b.iter(|| model.logits(&batch.inputs, 64).unwrap()));
}

criterion_group!(benches, matmul, loss, train_step, inference);
criterion_main!(benches);
