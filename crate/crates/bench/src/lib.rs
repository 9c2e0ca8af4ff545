//! Shared fixtures for the criterion benchmarks.

use awfair::experiments::{random_system, system_rng, RandomStudyConfig, RandomSystem};

/// Admissible random system `index` with exactly `n` agents.
pub fn system_of_size(n: usize, index: u64) -> RandomSystem {
    let cfg = RandomStudyConfig {
        n_range: (n, n),
        ..RandomStudyConfig::default()
    };
    random_system(&mut system_rng(1, index), &cfg)
        .expect("admissible system")
        .0
}
