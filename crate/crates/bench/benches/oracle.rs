use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use upl_bench::world;
use upl_core::oracle::{click_mask_distribution, exact_moments, mc_draws, Estimator};

fn enumeration(c: &mut Criterion) {
    let mut group = c.benchmark_group("click_mask_distribution");
    group.sample_size(10);
    for (users, items) in [(2, 3), (2, 4), (2, 5)] {
        let w = world(users, items, 7);
        group.bench_function(format!("{}_cells", users * items), |b| {
            b.iter(|| click_mask_distribution(black_box(&w)).unwrap())
        });
    }
    group.finish();

    let w = world(2, 5, 7);
    c.bench_function("exact_moments_upl_10_cells", |b| {
        b.iter(|| exact_moments(black_box(&w), &Estimator::Upl).unwrap())
    });
}

fn monte_carlo(c: &mut Criterion) {
    let w = world(3, 4, 9);
    let ests = [Estimator::Upl, Estimator::Ubpr];
    let mut group = c.benchmark_group("mc_draws");
    group.sample_size(10);
    group.bench_function("12_cells_1e4", |b| {
        b.iter(|| mc_draws(black_box(&w), &ests, 10_000, 1).unwrap())
    });
    group.finish();
}

criterion_group!(benches, enumeration, monte_carlo);
criterion_main!(benches);
