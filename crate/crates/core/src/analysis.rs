//! Shared-noise displacement, λ sweeps and distributional metrics.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::guidance::{compose, GuidanceSpec};
use crate::sampler::{rng_from_seed, sample_endpoints, Sampler};
use crate::schedule::{NoiseSchedule, TimeGrid, T_EPS, T_MAX};
use crate::score::{ConditionalModel, ScoreField};
use crate::world::PromptId;
use crate::Vector;

/// Serde adapter writing a [`Vector`] as a plain JSON list.
pub mod vector_serde {
    use super::Vector;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
        Ok(Vector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
const MIN_CI_SAMPLES: usize = 30;

/// A named scalar with its sample size, seed and optional 95% bootstrap half-width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
    pub half_width: Option<f64>,
}

impl MetricReport {
    pub fn point(name: impl Into<String>, value: f64, n: usize, seed: u64) -> Self {
        Self {
            name: name.into(),
            value,
            n,
            seed,
            half_width: None,
        }
    }

    /// Mean of `values` with a percentile-bootstrap half-width (`n ≥ 30` only).
    pub fn mean_with_bootstrap(name: impl Into<String>, values: &[f64], seed: u64) -> Self {
        let n = values.len();
        let value = mean(values);
        let half_width = (n >= MIN_CI_SAMPLES).then(|| {
            let mut rng = rng_from_seed(seed);
            let mut means: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
                .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
                .collect();
            means.sort_by(f64::total_cmp);
            (quantile_sorted(&means, 0.975) - quantile_sorted(&means, 0.025)) / 2.0
        });
        Self {
            name: name.into(),
            value,
            n,
            seed,
            half_width,
        }
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Standard error of the mean (unbiased variance).
pub fn standard_error(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn pearson(pairs: &[(f64, f64)]) -> f64 {
    let n = pairs.len() as f64;
    let (mx, my) = (
        pairs.iter().map(|p| p.0).sum::<f64>() / n,
        pairs.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn sample_mean(samples: &[Vector]) -> Vector {
    let d = samples[0].len();
    samples.iter().fold(Vector::zeros(d), |acc, x| acc + x) / samples.len() as f64
}

pub fn sample_covariance(samples: &[Vector]) -> DMatrix<f64> {
    let m = sample_mean(samples);
    let d = m.len();
    samples
        .iter()
        .fold(DMatrix::zeros(d, d), |acc, x| acc + (x - &m) * (x - &m).transpose())
        / (samples.len() - 1) as f64
}

/// Summary of `guided − base` endpoint differences over shared-noise pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementStats {
    pub n: usize,
    pub mean_l2: f64,
    pub p50_l2: f64,
    pub p90_l2: f64,
    /// Signed mean displacement per coordinate.
    pub coord_mean: Vec<f64>,
    /// Mean absolute displacement per coordinate.
    pub coord_abs_mean: Vec<f64>,
    /// Standard error of `coord_mean`.
    pub coord_se: Vec<f64>,
}

impl DisplacementStats {
    pub fn from_pairs(base: &[Vector], guided: &[Vector]) -> Result<Self> {
        if base.len() != guided.len() || base.is_empty() {
            return Err(Error::Shape {
                expected: base.len(),
                got: guided.len(),
            });
        }
        let d = base[0].len();
        let deltas: Vec<Vector> = base.iter().zip(guided).map(|(b, g)| g - b).collect();
        let mut l2: Vec<f64> = deltas.iter().map(|v| v.norm()).collect();
        let mean_l2 = mean(&l2);
        l2.sort_by(f64::total_cmp);
        let coord = |k: usize| deltas.iter().map(|v| v[k]).collect::<Vec<f64>>();
        Ok(Self {
            n: deltas.len(),
            mean_l2,
            p50_l2: quantile_sorted(&l2, 0.5),
            p90_l2: quantile_sorted(&l2, 0.9),
            coord_mean: (0..d).map(|k| mean(&coord(k))).collect(),
            coord_abs_mean: (0..d)
                .map(|k| coord(k).iter().map(|v| v.abs()).sum::<f64>() / deltas.len() as f64)
                .collect(),
            coord_se: (0..d).map(|k| standard_error(&coord(k))).collect(),
        })
    }
}

/// Sample `n` shared-noise pairs from `base` and `guided` and summarize the displacement.
#[allow(clippy::too_many_arguments)]
pub fn paired_displacement<B: ScoreField + ?Sized, G: ScoreField + ?Sized>(
    base: &B,
    guided: &G,
    n: usize,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    sampler: Sampler,
    seed: u64,
) -> Result<DisplacementStats> {
    check_dim(base.dim(), guided.dim())?;
    let a = sample_endpoints(base, grid, sched, sampler, n, seed)?;
    let b = sample_endpoints(guided, grid, sched, sampler, n, seed)?;
    DisplacementStats::from_pairs(&a, &b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub n: usize,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

impl SweepRow {
    /// Per-coordinate mean, standard error and covariance of one λ's endpoints.
    pub fn from_samples(lambda: f64, samples: &[Vector]) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Config("sweep needs n >= 2 per λ".into()));
        }
        let d = samples[0].len();
        let coord = |k: usize| samples.iter().map(|v| v[k]).collect::<Vec<f64>>();
        let cov = sample_covariance(samples);
        Ok(SweepRow {
            lambda,
            n: samples.len(),
            mean: (0..d).map(|k| mean(&coord(k))).collect(),
            se: (0..d).map(|k| standard_error(&coord(k))).collect(),
            covariance: cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
        })
    }
}

/// Sample the template with every contrastive λ replaced by each value in `lambdas`.
///
/// All λ values share the run seed, hence identical start points and noise.
#[allow(clippy::too_many_arguments)]
pub fn rig_sweep(
    template: &GuidanceSpec,
    lambdas: &[f64],
    n: usize,
    model: Arc<dyn ConditionalModel>,
    expert: Option<Arc<dyn ScoreField>>,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    sampler: Sampler,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    Ok(
        rig_sweep_samples(template, lambdas, n, model, expert, grid, sched, sampler, seed)?
            .into_iter()
            .map(|(row, _)| row)
            .collect(),
    )
}

/// [`rig_sweep`] that also returns the endpoints behind each row.
#[allow(clippy::too_many_arguments)]
pub fn rig_sweep_samples(
    template: &GuidanceSpec,
    lambdas: &[f64],
    n: usize,
    model: Arc<dyn ConditionalModel>,
    expert: Option<Arc<dyn ScoreField>>,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    sampler: Sampler,
    seed: u64,
) -> Result<Vec<(SweepRow, Vec<Vector>)>> {
    if lambdas.iter().any(|l| !l.is_finite()) {
        return Err(Error::Config("sweep λ values must be finite".into()));
    }
    if n < 2 {
        return Err(Error::Config("sweep needs n >= 2 per λ".into()));
    }
    lambdas
        .iter()
        .map(|&lambda| {
            let field = compose(
                &template.with_contrastive_lambda(lambda),
                model.clone(),
                expert.clone(),
                *sched,
            )?;
            let ends = sample_endpoints(&field, grid, sched, sampler, n, seed)?;
            Ok((SweepRow::from_samples(lambda, &ends)?, ends))
        })
        .collect()
}

/// Exact reverse-SDE endpoint mean at `t_end` for a unit-covariance Gaussian target
/// `N(μ, I)` started from `x_T ~ N(0, I)`: `m = α_end μ − α_T² μ / α_end`.
pub fn linear_sde_endpoint_mean(mu: &Vector, sched: &NoiseSchedule, t_end: f64) -> Result<Vector> {
    let (a_end, _) = sched.alpha_sigma(t_end)?;
    let (a_t, _) = sched.alpha_sigma(T_MAX)?;
    Ok(mu * (a_end - a_t * a_t / a_end))
}

/// Default end time for [`linear_sde_endpoint_mean`] on generation grids.
pub const GENERATION_END: f64 = T_EPS;

fn flatten(samples: &[Vector]) -> Result<(Vec<f64>, usize)> {
    let d = samples
        .first()
        .map(|v| v.len())
        .ok_or_else(|| Error::Config("empty sample set".into()))?;
    let mut flat = Vec::with_capacity(samples.len() * d);
    for s in samples {
        check_dim(d, s.len())?;
        flat.extend(s.iter());
    }
    Ok((flat, d))
}

/// `Σ_i Σ_j |a_i − b_j|` with a fixed summation order.
fn pair_distance_sum(a: &[f64], b: &[f64], d: usize) -> f64 {
    let rows: Vec<f64> = a
        .par_chunks(d)
        .map(|x| {
            b.chunks(d)
                .map(|y| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
                .sum::<f64>()
        })
        .collect();
    rows.iter().sum()
}

/// `Σ_i Σ_j |x_i − x_j|` over all ordered pairs of 1-D data, via sorting.
fn self_distance_sum_1d(x: &[f64]) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    // Σ_{i<j} (s_j − s_i) = Σ_k s_k (2k − n + 1).
    2.0 * s
        .iter()
        .enumerate()
        .map(|(k, v)| v * (2.0 * k as f64 - n + 1.0))
        .sum::<f64>()
}

/// Energy distance `2E|X−Y| − E|X−X'| − E|Y−Y'|` (V-statistic, so `A = B` gives 0).
pub fn energy_distance(a: &[Vector], b: &[Vector]) -> Result<f64> {
    let (fa, d) = flatten(a)?;
    let (fb, db) = flatten(b)?;
    check_dim(d, db)?;
    if fa == fb {
        return Ok(0.0);
    }
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (sxx, syy, sxy) = if d == 1 {
        let sxx = self_distance_sum_1d(&fa);
        let syy = self_distance_sum_1d(&fb);
        let pooled: Vec<f64> = fa.iter().chain(&fb).copied().collect();
        (sxx, syy, (self_distance_sum_1d(&pooled) - sxx - syy) / 2.0)
    } else {
        (
            pair_distance_sum(&fa, &fa, d),
            pair_distance_sum(&fb, &fb, d),
            pair_distance_sum(&fa, &fb, d),
        )
    };
    Ok(2.0 * sxy / (n * m) - sxx / (n * n) - syy / (m * m))
}

/// The `q`-quantile of energy distances between random relabelings of `a ∪ b`.
pub fn energy_permutation_threshold(a: &[Vector], b: &[Vector], permutations: usize, q: f64, seed: u64) -> Result<f64> {
    let pooled: Vec<Vector> = a.iter().chain(b).cloned().collect();
    let mut rng = rng_from_seed(seed);
    let mut null = Vec::with_capacity(permutations);
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    for _ in 0..permutations {
        idx.shuffle(&mut rng);
        let (ia, ib) = idx.split_at(a.len());
        let pa: Vec<Vector> = ia.iter().map(|&i| pooled[i].clone()).collect();
        let pb: Vec<Vector> = ib.iter().map(|&i| pooled[i].clone()).collect();
        null.push(energy_distance(&pa, &pb)?);
    }
    null.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&null, q))
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// 2-Wasserstein distance between `N(μ₁, Σ₁)` and `N(μ₂, Σ₂)`.
pub fn gaussian_w2(mu1: &Vector, cov1: &DMatrix<f64>, mu2: &Vector, cov2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    check_dim(d, mu2.len())?;
    for (name, c) in [("first covariance", cov1), ("second covariance", cov2)] {
        check_dim(d, c.nrows())?;
        check_dim(d, c.ncols())?;
        if Cholesky::new(c.clone()).is_none() {
            return Err(Error::NotPositiveDefinite(name));
        }
    }
    let root2 = sqrt_psd(cov2);
    let cross = sqrt_psd(&(&root2 * cov1 * &root2));
    let trace = (cov1 + cov2 - cross * 2.0).trace();
    Ok(((mu1 - mu2).norm_squared() + trace).max(0.0).sqrt())
}

/// `log p₀(x | y⁺) − log p₀(x | y⁻)`.
pub fn contrastive_likelihood_score(
    model: &dyn ConditionalModel,
    x: &Vector,
    positive: &PromptId,
    negative: &PromptId,
) -> Result<f64> {
    if positive == negative {
        return Ok(0.0);
    }
    let lp = |p: &PromptId| {
        model
            .cond_log_density(p, x, 0.0)
            .ok_or_else(|| Error::Config("contrastive likelihood needs closed-form densities".into()))?
    };
    Ok(lp(positive)? - lp(negative)?)
}
