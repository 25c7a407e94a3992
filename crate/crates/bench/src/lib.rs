//! Shared fixtures for the benchmarks.

use lmmgof::rng::stream_rng;
use lmmgof::{fit_lmm, simulate_dataset, ClusteredDataset, FitOptions, FittedLmm, Method, SimulationScenario};

/// Correctly specified random-slope data with `n` clusters of size `n_i`.
pub fn example_data(n: usize, n_i: usize, seed: u64) -> ClusteredDataset {
    simulate_dataset(&SimulationScenario::example_i(n, n_i), &mut stream_rng(seed, 0)).expect("valid scenario")
}

/// Dataset together with its REML fit.
pub fn fitted(n: usize, n_i: usize, seed: u64) -> (ClusteredDataset, FittedLmm) {
    let ds = example_data(n, n_i, seed);
    let fit = fit_lmm(&ds, Method::Reml, &FitOptions::default()).expect("fit succeeds");
    (ds, fit)
}
