use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use tirg_core::dataset::{DatasetConfig, Split, SplitData};
use tirg_core::retrieval::evaluate_model;
use tirg_core::tensor::{Graph, Tensor};
use tirg_core::{train, EvalConfig, Kernel, Model, RunConfig, TrainConfig};

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Tensor::uniform(&[64, 256], 1.0, &mut rng);
    let b = Tensor::uniform(&[256, 128], 1.0, &mut rng);
    c.bench_function("matmul 64x256x128 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (x, y) = (g.input(a.clone()), g.input(b.clone()));
            let z = g.matmul(x, y).unwrap();
            let s = g.sum(z);
            g.backward(s).unwrap();
            black_box(g.grad(y).unwrap().data()[0])
        })
    });
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::uniform(&[16, 48, 48, 3], 1.0, &mut rng);
    let k = Tensor::uniform(&[3, 3, 3, 16], 0.3, &mut rng);
    c.bench_function("conv2d 16x48x48x3 -> 16 stride 2 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (a, w) = (g.constant(x.clone()), g.input(k.clone()));
            let y = g.conv2d(a, w, 2).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            black_box(g.grad(w).unwrap().data()[0])
        })
    });
}

fn small_data() -> SplitData {
    let cfg = DatasetConfig {
        n_base: 20,
        n_queries: 200,
        ..Default::default()
    };
    SplitData::generate(&cfg, Split::Train).unwrap()
}

fn train_step(c: &mut Criterion) {
    let data = small_data();
    let cfg = TrainConfig {
        iterations: 1,
        eval_every: 1000,
        identity_queries: 0,
        ..Default::default()
    };
    let mut model = Model::new(RunConfig::default().model, 0).unwrap();
    c.bench_function("tirg fc training step, batch 16", |bench| {
        bench.iter(|| black_box(train(&mut model, &cfg, &data, None, |_| Ok(())).unwrap().len()))
    });
}

fn evaluation(c: &mut Criterion) {
    let data = small_data();
    let model = Model::new(RunConfig::default().model, 0).unwrap();
    let cfg = EvalConfig::default();
    let mut group = c.benchmark_group("eval");
    group.sample_size(10);
    group.bench_function("embed 220 images + rank 200 queries", |bench| {
        bench.iter(|| black_box(evaluate_model(&model, &data, Kernel::Dot, &cfg, String::new()).unwrap().queries))
    });
    group.finish();
}

criterion_group!(benches, matmul, conv, train_step, evaluation);
criterion_main!(benches);
