//! Variance-preserving forward process and time discretization.
//!
//! The forward SDE is `dx = -½β(t)x dt + √β(t) dw` with a linear rate
//! `β(t) = β_min + t(β_max − β_min)` on `[0, 1]`. Its perturbation kernel is
//! `N(α_t x₀, σ_t² I)` with `α_t = exp(−½∫₀ᵗβ)` and `σ_t² = 1 − α_t²`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::Vector;

/// Final diffusion time.
pub const T_MAX: f64 = 1.0;

/// Time floor used instead of `t = 0` by every sampler grid.
pub const T_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }
}

impl NoiseSchedule {
    pub fn new(beta_min: f64, beta_max: f64) -> Result<Self> {
        if !(beta_min > 0.0 && beta_max > beta_min && beta_max.is_finite()) {
            return Err(Error::Config(format!(
                "noise schedule needs 0 < beta_min < beta_max, got ({beta_min}, {beta_max})"
            )));
        }
        Ok(Self { beta_min, beta_max })
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    /// `∫₀ᵗ β(s) ds`.
    pub fn integrated_beta(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
    }

    pub fn log_alpha(&self, t: f64) -> f64 {
        -0.5 * self.integrated_beta(t)
    }

    /// Perturbation coefficients `(α_t, σ_t)`; fails outside `[0, T]`.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        if !(0.0..=T_MAX).contains(&t) {
            return Err(Error::Domain {
                what: "t",
                value: t,
                lo: 0.0,
                hi: T_MAX,
            });
        }
        Ok(self.coefficients(t))
    }

    /// Unchecked variant for callers that already validated `t`.
    pub(crate) fn coefficients(&self, t: f64) -> (f64, f64) {
        let log_alpha = self.log_alpha(t);
        // σ² = 1 − α² = −expm1(2 log α) keeps precision near t = 0.
        let sigma2 = -(2.0 * log_alpha).exp_m1();
        (log_alpha.exp(), sigma2.max(0.0).sqrt())
    }
}

/// Sample from the perturbation kernel: `α_t x₀ + σ_t · noise`.
pub fn perturb(x0: &Vector, t: f64, sched: &NoiseSchedule, noise: &Vector) -> Result<Vector> {
    check_dim(x0.len(), noise.len())?;
    let (alpha, sigma) = sched.alpha_sigma(t)?;
    Ok(x0 * alpha + noise * sigma)
}

/// Strictly decreasing time grid ending at the sampler floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    /// `n_steps` uniform steps from `t_start` down to `t_end`.
    pub fn uniform(t_start: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Config("time grid needs at least one step".into()));
        }
        if !(t_start <= T_MAX && t_end >= 0.0 && t_start > t_end) {
            return Err(Error::Config(format!(
                "time grid needs T >= t_start > t_end >= 0, got ({t_start}, {t_end})"
            )));
        }
        let h = (t_start - t_end) / n_steps as f64;
        let mut times: Vec<f64> = (0..n_steps).map(|i| t_start - h * i as f64).collect();
        times.push(t_end);
        Ok(Self { times })
    }

    /// Full generation grid `[T, ε]`.
    pub fn generation(n_steps: usize) -> Result<Self> {
        Self::uniform(T_MAX, T_EPS, n_steps)
    }

    /// Build from explicit times; they must be strictly decreasing.
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times[0] > T_MAX || *times.last().unwrap() < 0.0 {
            return Err(Error::Config("time grid must lie in [0, T] with >= 2 points".into()));
        }
        if times.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::Config("time grid must be strictly decreasing".into()));
        }
        Ok(Self { times })
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Consecutive `(t, t_next)` pairs.
    pub fn steps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.windows(2).map(|w| (w[0], w[1]))
    }

    /// The same grid traversed in increasing time.
    pub fn reversed_times(&self) -> Vec<f64> {
        self.times.iter().rev().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent oracle: ∫₀ᵗ β by composite Simpson's rule.
    fn simpson_integral(s: &NoiseSchedule, t: f64) -> f64 {
        let n = 1000;
        let h = t / n as f64;
        let mut acc = s.beta(0.0) + s.beta(t);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * s.beta(i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn alpha_sigma_at_zero() {
        let (a, s) = NoiseSchedule::default().alpha_sigma(0.0).unwrap();
        assert_eq!(a, 1.0);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn alpha_sigma_matches_quadrature() {
        let sched = NoiseSchedule::default();
        // ∫₀¹β = 10.05 → α₁ = exp(−5.025).
        let integral = simpson_integral(&sched, 1.0);
        assert!((integral - 10.05).abs() < 1e-10);
        let (a, s) = sched.alpha_sigma(1.0).unwrap();
        assert!((a - (-0.5 * integral).exp()).abs() < 1e-12);
        // exp(−5.025) = 6.5716e-3, i.e. ≈ 6.562e-3 to the stated precision.
        assert!((a - 6.5716e-3).abs() < 1e-6);
        assert!((a - 6.562e-3).abs() < 2e-5);
        assert!((s - 0.999978).abs() < 1e-6);

        let (a, _) = sched.alpha_sigma(0.5).unwrap();
        let integral = simpson_integral(&sched, 0.5);
        assert!((a - (-0.5 * integral).exp()).abs() < 1e-12);
        assert!((a - (-1.26875f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn alpha_sigma_invariants() {
        let sched = NoiseSchedule::default();
        let mut prev = 1.0 + 1e-12;
        for i in 0..=200 {
            let t = i as f64 / 200.0;
            assert!(sched.beta(t) > 0.0);
            let (a, s) = sched.alpha_sigma(t).unwrap();
            assert!(a < prev);
            prev = a;
            assert!((a * a + s * s - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn alpha_sigma_rejects_out_of_range() {
        let sched = NoiseSchedule::default();
        assert!(matches!(sched.alpha_sigma(-0.1), Err(Error::Domain { .. })));
        assert!(matches!(sched.alpha_sigma(1.5), Err(Error::Domain { .. })));
    }

    #[test]
    fn perturb_examples() {
        let sched = NoiseSchedule::default();
        let x0 = Vector::from_vec(vec![0.3, -2.0]);
        let z = Vector::from_vec(vec![1.0, 0.5]);
        assert_eq!(perturb(&x0, 0.0, &sched, &z).unwrap(), x0);

        let zero = Vector::zeros(2);
        let (a, s) = sched.alpha_sigma(0.7).unwrap();
        assert_eq!(perturb(&zero, 0.7, &sched, &z).unwrap(), &z * s);

        let e1 = Vector::from_vec(vec![1.0, 0.0]);
        let (a_half, _) = sched.alpha_sigma(0.5).unwrap();
        assert_eq!(perturb(&e1, 0.5, &sched, &zero).unwrap(), &e1 * a_half);
        let _ = a;

        let short = Vector::zeros(3);
        assert!(matches!(perturb(&x0, 0.5, &sched, &short), Err(Error::Shape { .. })));
    }

    #[test]
    fn grid_is_strictly_decreasing_to_floor() {
        let g = TimeGrid::generation(100).unwrap();
        assert_eq!(g.n_steps(), 100);
        assert_eq!(g.start(), T_MAX);
        assert_eq!(g.end(), T_EPS);
        assert!(g.steps().all(|(a, b)| b < a));
        assert!(TimeGrid::uniform(0.5, 0.6, 10).is_err());
        assert!(TimeGrid::from_times(vec![1.0, 0.5, 0.5]).is_err());
    }
}
