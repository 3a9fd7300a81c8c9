//! Shared fixtures for the benchmarks.

use upl_core::dataset::{generate_semi_synthetic, simulate_ratings, SimulationConfig};
use upl_core::oracle::SyntheticWorld;
use upl_core::{ImplicitDataset, PropensityConfig, PropensityTable, Split};

/// A simulated training split of roughly Coat size plus its propensities.
pub fn coat_sized_train(seed: u64) -> (ImplicitDataset, PropensityTable) {
    let cfg = SimulationConfig {
        num_users: 290,
        num_items: 300,
        train_per_user: 24,
        test_per_user: 16,
        seed,
        ..SimulationConfig::default()
    };
    let (train, _) = simulate_ratings(&cfg).expect("valid simulation config");
    let ds = generate_semi_synthetic(&train, 0.1, seed, Split::Train).expect("valid ratings");
    let props = PropensityTable::from_dataset(&ds, PropensityConfig::default()).expect("clicks present");
    (ds, props)
}

/// A random world with exactly `users * items` cells.
pub fn world(users: usize, items: usize, seed: u64) -> SyntheticWorld {
    SyntheticWorld::random("bench", users, items, (0.1, 0.9), (0.1, 0.9), seed).expect("admissible world")
}
