use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use upl_bench::coat_sized_train;
use upl_core::losses::{LossSpec, Method};
use upl_core::trainer::{Optimizer, PointwiseSampling, Sampler};
use upl_core::FactorModel;

fn epochs(c: &mut Criterion) {
    let (train, props) = coat_sized_train(3);
    let gamma = |_: usize, _: usize| 0.3;
    let mut group = c.benchmark_group("epoch_d100");
    group.sample_size(10);
    for method in [Method::Bpr, Method::Ubpr, Method::Upl, Method::RelMf] {
        let relevance = (method == Method::Upl).then_some(&gamma as &dyn upl_core::trainer::RelevanceSource);
        let sampling = PointwiseSampling::NegativeRatio(4);
        let sampler = Sampler::new(&train, &props, method, sampling, relevance).unwrap();
        let spec = match method {
            Method::Ubpr => LossSpec::new(method, Some(0.0), None).unwrap(),
            m => LossSpec::default_for(m),
        };
        group.bench_function(method.name(), |b| {
            b.iter_batched(
                || {
                    let model = FactorModel::init(train.num_users(), train.num_items(), 100, 1, 0.01).unwrap();
                    (Optimizer::new(&model, 1e-3), model, ChaCha8Rng::seed_from_u64(5))
                },
                |(mut opt, mut model, mut rng)| {
                    for batch in sampler.epoch(256, &mut rng).unwrap() {
                        opt.step(&mut model, &spec, 1e-5, &batch).unwrap();
                    }
                    black_box(model)
                },
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, epochs);
criterion_main!(benches);
