//! Endpoint distributions of every sampler against the exact standard-normal target.

use std::sync::OnceLock;

use contrastive_core::analysis::{energy_distance, quantile_sorted};
use contrastive_core::sampler::{derive_seed, rng_from_seed, sample_endpoints, standard_normal, Sampler};
use contrastive_core::schedule::{NoiseSchedule, TimeGrid};
use contrastive_core::score::FnScore;
use contrastive_core::Vector;

const N: usize = 10_000;

fn normal_set(seed: u64) -> Vec<Vector> {
    let mut rng = rng_from_seed(seed);
    (0..N).map(|_| standard_normal(2, &mut rng)).collect()
}

/// The reference set and the 95th percentile of its energy distance to 19
/// independent N(0, I) sets of size `N`, shared by both tests.
fn calibrated() -> &'static (Vec<Vector>, f64) {
    static CELL: OnceLock<(Vec<Vector>, f64)> = OnceLock::new();
    CELL.get_or_init(|| {
        let reference = normal_set(1);
        let mut null: Vec<f64> = (0..19)
            .map(|i| energy_distance(&reference, &normal_set(derive_seed(77, i))).unwrap())
            .collect();
        null.sort_by(f64::total_cmp);
        let threshold = quantile_sorted(&null, 0.95);
        (reference, threshold)
    })
}

#[test]
fn all_samplers_match_the_standard_normal() {
    let sched = NoiseSchedule::default();
    let score = FnScore::new(2, |x: &Vector, _| -x);
    let grid = TimeGrid::generation(200).unwrap();
    let (reference, threshold) = calibrated();
    for sampler in [Sampler::EmSde, Sampler::PfOde, Sampler::Ddim { eta: 0.1 }] {
        let ends = sample_endpoints(&score, &grid, &sched, sampler, N, 5).unwrap();
        let d = energy_distance(&ends, reference).unwrap();
        assert!(d <= *threshold, "{}: {d:.2e} > null {threshold:.2e}", sampler.name());
    }
}

#[test]
fn a_shifted_sampler_fails_the_same_test() {
    let sched = NoiseSchedule::default();
    let shifted = FnScore::new(2, |x: &Vector, _| -x + Vector::from_vec(vec![0.1, 0.0]));
    let grid = TimeGrid::generation(200).unwrap();
    let (reference, threshold) = calibrated();
    let ends = sample_endpoints(&shifted, &grid, &sched, Sampler::EmSde, N, 5).unwrap();
    assert!(energy_distance(&ends, reference).unwrap() > *threshold);
}
