//! Deterministic inputs shared by the benchmarks.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textloop_core::association::ConsistencyGraph;
use textloop_core::simulator::{default_rig, run_scenario, Scenario, SimOutput, SimParams};

/// Consistency graph over `n` associations: `inliers` mutually consistent
/// ones plus clutter with sparse random affinities and exclusions.
pub fn consistency_graph(n: usize, inliers: usize, seed: u64) -> ConsistencyGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut affinity = DMatrix::identity(n, n);
    let mut exclusion = DMatrix::from_element(n, n, false);
    for i in 0..n {
        for j in (i + 1)..n {
            let (score, excluded) = if i < inliers && j < inliers {
                (rng.random_range(0.7..1.0), false)
            } else if rng.random_bool(0.15) {
                (0.0, true)
            } else if rng.random_bool(0.3) {
                (rng.random_range(0.0..1.0), false)
            } else {
                (0.0, false)
            };
            affinity[(i, j)] = score;
            affinity[(j, i)] = score;
            exclusion[(i, j)] = excluded;
            exclusion[(j, i)] = excluded;
        }
    }
    ConsistencyGraph::from_parts(affinity, exclusion)
}

/// One simulated session of the given scenario with default noise.
pub fn simulated_session(scenario: Scenario, seed: u64) -> SimOutput {
    let params = SimParams { scenario, seed, ..Default::default() };
    run_scenario(&params, &default_rig()).expect("default simulation parameters are valid").1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inlier_block_is_consistent() {
        let g = consistency_graph(20, 6, 3);
        assert!(g.is_consistent_set(&(0..6).collect::<Vec<_>>()));
        assert_eq!(g, consistency_graph(20, 6, 3));
    }
}
