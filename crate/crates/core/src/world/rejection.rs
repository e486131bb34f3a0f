use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::classifier_from_log_densities;
use crate::sampler::{derive_seed, rng_from_seed};
use crate::Vector;

use super::{PromptId, World};

/// Target `p(x | base) · c(x)` with `c` the generative classifier at `t = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltSpec {
    pub base: PromptId,
    pub positive: PromptId,
    pub negative: PromptId,
    pub gamma: f64,
    pub prior_positive: f64,
    pub prior_negative: f64,
}

#[derive(Debug, Clone)]
pub struct TiltedSamples {
    pub samples: Vec<Vector>,
    pub proposals: usize,
}

impl TiltedSamples {
    pub fn acceptance_rate(&self) -> f64 {
        self.samples.len() as f64 / self.proposals as f64
    }
}

const CHUNK: usize = 4096;
const MIN_RATE: f64 = 1e-4;
const MIN_PROPOSALS_BEFORE_ABORT: usize = 100_000;

/// Exact i.i.d. draws from the tilted target: propose from the base mixture and
/// accept with probability equal to the classifier value.
pub fn rejection_sample_tilted(world: &World, spec: &TiltSpec, n: usize, seed: u64) -> Result<TiltedSamples> {
    let base = world.mixture(&spec.base)?;
    let pos = world.mixture(&spec.positive)?;
    let neg = world.mixture(&spec.negative)?;
    if !(spec.gamma >= 0.0 && spec.prior_positive > 0.0 && spec.prior_negative > 0.0) {
        return Err(Error::Config("tilt needs gamma >= 0 and positive priors".into()));
    }
    let mut samples = Vec::with_capacity(n);
    let mut proposals = 0usize;
    let mut next_chunk = 0u64;
    // Chunks are seeded by index and processed in order, so the result does not
    // depend on the thread count.
    let batch = rayon::current_num_threads().max(1) as u64;
    while samples.len() < n {
        let accepted: Vec<Result<Vec<Vector>>> = (next_chunk..next_chunk + batch)
            .into_par_iter()
            .map(|chunk| {
                let mut rng = rng_from_seed(derive_seed(seed, chunk));
                let mut out = Vec::new();
                for _ in 0..CHUNK {
                    let x = base.sample(&mut rng);
                    let c = classifier_from_log_densities(
                        pos.log_density(&x)?,
                        neg.log_density(&x)?,
                        spec.gamma,
                        spec.prior_positive,
                        spec.prior_negative,
                    )?;
                    let u: f64 = rand::Rng::random(&mut rng);
                    if u < c {
                        out.push(x);
                    }
                }
                Ok(out)
            })
            .collect();
        next_chunk += batch;
        for chunk in accepted {
            proposals += CHUNK;
            samples.extend(chunk?);
            if samples.len() >= n {
                break;
            }
        }
        if proposals >= MIN_PROPOSALS_BEFORE_ABORT {
            let rate = samples.len() as f64 / proposals as f64;
            if rate < MIN_RATE {
                return Err(Error::LowAcceptance { rate, proposals });
            }
        }
    }
    samples.truncate(n);
    Ok(TiltedSamples { samples, proposals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::presets;

    fn spec(gamma: f64) -> TiltSpec {
        TiltSpec {
            base: PromptId::empty(),
            positive: "right".into(),
            negative: "left".into(),
            gamma,
            prior_positive: 0.5,
            prior_negative: 0.5,
        }
    }

    // Oracle: mass right of 0 under ∝ p(x)·c(x) by trapezoidal quadrature.
    fn quadrature_mass_right(gamma: f64) -> f64 {
        let npdf = |x: f64, m: f64| (-0.5 * (x - m) * (x - m)).exp();
        let (mut right, mut total) = (0.0, 0.0);
        let h = 1e-3;
        let mut x = -15.0;
        while x <= 15.0 {
            let p = 0.5 * npdf(x, -2.0) + 0.5 * npdf(x, 2.0);
            let (a, b) = (npdf(x, 2.0).powf(gamma), npdf(x, -2.0).powf(gamma));
            let w = p * a / (a + b);
            total += w;
            if x > 0.0 {
                right += w;
            }
            x += h;
        }
        right / total
    }

    #[test]
    fn tilted_mass_matches_quadrature() {
        let world = presets::symmetric_1d();
        let n = 100_000;
        let s = rejection_sample_tilted(&world, &spec(4.0), n, 5).unwrap();
        assert_eq!(s.samples.len(), n);
        let frac = s.samples.iter().filter(|x| x[0] > 0.0).count() as f64 / n as f64;
        let oracle = quadrature_mass_right(4.0);
        assert!((frac - oracle).abs() / oracle < 0.01, "{frac} vs {oracle}");
    }

    #[test]
    fn zero_gamma_accepts_at_prior_ratio() {
        let world = presets::symmetric_1d();
        let s = rejection_sample_tilted(&world, &spec(0.0), 20_000, 1).unwrap();
        assert!((s.acceptance_rate() - 0.5).abs() < 0.02);
        let frac = s.samples.iter().filter(|x| x[0] > 0.0).count() as f64 / 20_000.0;
        assert!((frac - 0.5).abs() < 0.02);
    }

    #[test]
    fn deterministic_per_seed() {
        let world = presets::symmetric_1d();
        let a = rejection_sample_tilted(&world, &spec(1.0), 500, 9).unwrap();
        let b = rejection_sample_tilted(&world, &spec(1.0), 500, 9).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn hopeless_tilt_aborts() {
        let world = presets::symmetric_1d();
        let mut s = spec(1.0);
        s.base = "left".into();
        s.prior_positive = 1e-12;
        s.prior_negative = 1.0;
        match rejection_sample_tilted(&world, &s, 10, 2) {
            Err(Error::LowAcceptance { rate, .. }) => assert!(rate < 1e-4),
            other => panic!("unexpected {other:?}"),
        }
    }
}
