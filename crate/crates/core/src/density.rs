//! Log-densities from the probability-flow ODE.
//!
//! Along `dx/ds = v(x, s)` with `v = −½β(x + s_θ)`, the log-density obeys
//! `d/ds log p_s(x(s)) = −∇·v`, so
//! `log p_t(x) = log p_T(x_T) + ∫_t^T ∇·v(x(s), s) ds`.
//! The pair `(x, ∫∇·v)` is integrated forward from `t` to `T` with Heun.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::guidance::{lambda_from_log_densities, ClassifierParams};
use crate::sampler::{derive_seed, rng_from_seed};
use crate::schedule::{NoiseSchedule, TimeGrid, T_EPS, T_MAX};
use crate::score::{ConditionalModel, PromptScore, ScoreField};
use crate::world::{GaussianMixture, PromptId};
use crate::Vector;

/// Default number of Heun steps for density estimates.
pub const DEFAULT_DENSITY_STEPS: usize = 512;

const MIN_STEPS: usize = 16;
const ESCAPE_NORM: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DivergenceMode {
    /// Sum of central-difference diagonal Jacobian entries.
    ExactJacobian,
    /// Average of `vᵀ J v` over Rademacher probes `v`.
    Hutchinson { probes: usize, seed: u64 },
}

/// Density assumed for the ODE endpoint at `t = T`.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Terminal {
    /// `N(0, I)`.
    #[default]
    StandardNormal,
    /// The given data mixture pushed forward to `T`.
    Exact(GaussianMixture),
}

impl Terminal {
    fn log_density(&self, x: &Vector, sched: &NoiseSchedule) -> Result<f64> {
        match self {
            Terminal::StandardNormal => {
                let d = x.len() as f64;
                Ok(-0.5 * (d * (2.0 * std::f64::consts::PI).ln() + x.norm_squared()))
            }
            Terminal::Exact(m) => {
                let (a, s) = sched.alpha_sigma(T_MAX)?;
                m.log_density_at(x, a, s)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub log_density: f64,
    pub t: f64,
    pub x: Vector,
    pub n_steps: usize,
    pub divergence_mode: DivergenceMode,
    /// Endpoint of the flow at `T`.
    pub x_terminal: Vector,
    /// `∫_t^T ∇·v ds`.
    pub divergence_integral: f64,
}

/// The probability-flow drift `v(x, t) = −½β(t)(x + s(x, t))` as a field.
pub struct FlowDrift<'a, S: ?Sized> {
    pub score: &'a S,
    pub sched: NoiseSchedule,
}

impl<S: ScoreField + ?Sized> ScoreField for FlowDrift<'_, S> {
    fn dim(&self) -> usize {
        self.score.dim()
    }

    fn score(&self, x: &Vector, t: f64) -> Result<Vector> {
        let s = self.score.score(x, t)?;
        Ok((x + s) * (-0.5 * self.sched.beta(t)))
    }
}

fn finite(field_value: Vector, t: f64, x: &Vector) -> Result<Vector> {
    if field_value.iter().all(|v| v.is_finite()) {
        Ok(field_value)
    } else {
        Err(Error::non_finite("divergence probe", t, x))
    }
}

/// `∇·f(x, t)` by the chosen estimator.
pub fn divergence<F: ScoreField + ?Sized>(field: &F, x: &Vector, t: f64, mode: DivergenceMode) -> Result<f64> {
    check_dim(field.dim(), x.len())?;
    match mode {
        DivergenceMode::ExactJacobian => {
            let mut total = 0.0;
            let mut probe = x.clone();
            for i in 0..x.len() {
                let h = 1e-4 * (1.0 + x[i].abs());
                probe[i] = x[i] + h;
                let plus = finite(field.score(&probe, t)?, t, &probe)?[i];
                probe[i] = x[i] - h;
                let minus = finite(field.score(&probe, t)?, t, &probe)?[i];
                probe[i] = x[i];
                total += (plus - minus) / (2.0 * h);
            }
            Ok(total)
        }
        DivergenceMode::Hutchinson { probes, seed } => {
            if probes == 0 {
                return Err(Error::Config("hutchinson needs at least one probe".into()));
            }
            let mut rng = rng_from_seed(derive_seed(seed, t.to_bits()));
            let h = 1e-4 * (1.0 + x.amax());
            let mut total = 0.0;
            for _ in 0..probes {
                let v = Vector::from_iterator(
                    x.len(),
                    (0..x.len()).map(|_| if rand::Rng::random::<bool>(&mut rng) { 1.0 } else { -1.0 }),
                );
                let plus = finite(field.score(&(x + &v * h), t)?, t, x)?;
                let minus = finite(field.score(&(x - &v * h), t)?, t, x)?;
                total += v.dot(&(plus - minus)) / (2.0 * h);
            }
            Ok(total / probes as f64)
        }
    }
}

/// Estimate `log p_t(x)` of the distribution whose score is `score`.
pub fn log_density_ode<S: ScoreField + ?Sized>(
    score: &S,
    x: &Vector,
    t: f64,
    sched: &NoiseSchedule,
    n_steps: usize,
    terminal: &Terminal,
    mode: DivergenceMode,
) -> Result<DensityEstimate> {
    check_dim(score.dim(), x.len())?;
    if !(T_EPS..=T_MAX).contains(&t) {
        return Err(Error::Domain {
            what: "t",
            value: t,
            lo: T_EPS,
            hi: T_MAX,
        });
    }
    if n_steps < MIN_STEPS {
        return Err(Error::Config(format!("density ODE needs >= {MIN_STEPS} steps")));
    }
    let drift = FlowDrift { score, sched: *sched };
    let mut state = x.clone();
    let mut integral = 0.0;
    if t < T_MAX {
        // Reuse the decreasing grid machinery, walking it backwards.
        let times = TimeGrid::uniform(T_MAX, t, n_steps)?.reversed_times();
        for (step, w) in times.windows(2).enumerate() {
            let (s0, s1) = (w[0], w[1]);
            let h = s1 - s0;
            let k1 = finite(drift.score(&state, s0)?, s0, &state)?;
            let d1 = divergence(&drift, &state, s0, mode)?;
            let predicted = &state + &k1 * h;
            let k2 = finite(drift.score(&predicted, s1)?, s1, &predicted)?;
            let d2 = divergence(&drift, &predicted, s1, mode)?;
            state += (k1 + k2) * (0.5 * h);
            integral += 0.5 * h * (d1 + d2);
            if !(state.norm() <= ESCAPE_NORM) {
                return Err(Error::Trajectory {
                    step,
                    t: s1,
                    reason: format!("density flow escaped (|x| = {:e})", state.norm()),
                });
            }
        }
    }
    let log_density = terminal.log_density(&state, sched)? + integral;
    Ok(DensityEstimate {
        log_density,
        t,
        x: x.clone(),
        n_steps,
        divergence_mode: mode,
        x_terminal: state,
        divergence_integral: integral,
    })
}

/// `λ_t(x) = γ(1 − c(x))` with both conditional densities from the density ODE.
///
/// Each call integrates two flows of `n_steps`, so using it inside an `N`-step
/// sampler costs `O(N · n_steps)` score evaluations per trajectory.
#[allow(clippy::too_many_arguments)]
pub fn lambda_via_ode<M: ConditionalModel + ?Sized>(
    model: &M,
    positive: &PromptId,
    negative: &PromptId,
    params: ClassifierParams,
    x: &Vector,
    t: f64,
    sched: &NoiseSchedule,
    n_steps: usize,
    terminal: &Terminal,
) -> Result<f64> {
    lambda_via_ode_with_terminals(
        model,
        positive,
        negative,
        params,
        x,
        t,
        sched,
        n_steps,
        (terminal, terminal),
    )
}

/// As [`lambda_via_ode`] with a separate terminal density per prompt.
#[allow(clippy::too_many_arguments)]
pub fn lambda_via_ode_with_terminals<M: ConditionalModel + ?Sized>(
    model: &M,
    positive: &PromptId,
    negative: &PromptId,
    params: ClassifierParams,
    x: &Vector,
    t: f64,
    sched: &NoiseSchedule,
    n_steps: usize,
    terminals: (&Terminal, &Terminal),
) -> Result<f64> {
    if params.gamma == 0.0 {
        return Ok(0.0);
    }
    let estimate = |prompt: &PromptId, terminal: &Terminal| -> Result<f64> {
        let field = PromptScore::new(model, prompt.clone())?;
        Ok(log_density_ode(&field, x, t, sched, n_steps, terminal, DivergenceMode::ExactJacobian)?.log_density)
    };
    let lp = estimate(positive, terminals.0)?;
    let ln = estimate(negative, terminals.1)?;
    lambda_from_log_densities(lp, ln, params.gamma, params.prior_positive, params.prior_negative)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::FnScore;
    use crate::world::{presets, AnalyticModel};
    use nalgebra::DMatrix;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_vec(xs.to_vec())
    }

    fn std_normal_log_density(x: &Vector) -> f64 {
        -0.5 * (x.len() as f64 * (2.0 * std::f64::consts::PI).ln() + x.norm_squared())
    }

    #[test]
    fn divergence_of_zero_and_linear_fields() {
        let sched = NoiseSchedule::default();
        let score = FnScore::new(3, |x: &Vector, _| -x);
        let drift = FlowDrift { score: &score, sched };
        let x = v(&[0.3, -2.0, 1.0]);
        assert_eq!(divergence(&drift, &x, 0.5, DivergenceMode::ExactJacobian).unwrap(), 0.0);
        let linear = FnScore::new(3, |x: &Vector, _| x * -2.5);
        let d = divergence(&linear, &x, 0.5, DivergenceMode::ExactJacobian).unwrap();
        assert!((d + 7.5).abs() < 1e-10);
    }

    #[test]
    fn divergence_of_quadratic_form_field() {
        // f(x) = A x + (xᵀ B x) c: ∇·f = tr A + 2 cᵀ B_sym x.
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, -0.5, 0.3, -1.2, 0.7, 2.0, 0.1, 0.4]);
        let b = DMatrix::from_row_slice(3, 3, &[0.5, -0.2, 0.1, 0.3, 0.8, -0.6, 0.0, 0.2, -0.4]);
        let c = v(&[0.7, -1.1, 0.4]);
        let (a2, b2, c2) = (a.clone(), b.clone(), c.clone());
        let field = FnScore::new(3, move |x: &Vector, _| {
            &a2 * x + &c2 * (x.transpose() * &b2 * x)[(0, 0)]
        });
        let bsym = (&b + b.transpose()) * 0.5;
        for x in [v(&[0.1, 0.2, 0.3]), v(&[-2.0, 1.5, 3.0]), v(&[10.0, -7.0, 0.5])] {
            let exact = a.trace() + 2.0 * c.dot(&(&bsym * &x));
            let d = divergence(&field, &x, 0.0, DivergenceMode::ExactJacobian).unwrap();
            assert!((d - exact).abs() < 1e-6, "{d} vs {exact}");
        }
    }

    #[test]
    fn hutchinson_converges_with_inverse_probe_variance() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, -0.5, 0.3, -1.2, 0.7, 2.0, 0.1, 0.4]);
        let trace = a.trace();
        let field = FnScore::new(3, move |x: &Vector, _| &a * x);
        let x = v(&[0.5, -0.5, 1.0]);
        let variance = |k: usize| {
            let draws: Vec<f64> = (0..400)
                .map(|seed| divergence(&field, &x, 0.3, DivergenceMode::Hutchinson { probes: k, seed }).unwrap())
                .collect();
            let mean = draws.iter().sum::<f64>() / draws.len() as f64;
            assert!((mean - trace).abs() < 4.0 * (1.0 / k as f64).sqrt());
            draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64
        };
        let (v1, v16) = (variance(1), variance(16));
        let slope = (v1 / v16).log2() / 4.0;
        assert!((slope - 1.0).abs() < 0.25, "variance slope {slope}");
    }

    #[test]
    fn standard_normal_world_is_stationary() {
        let sched = NoiseSchedule::default();
        let score = FnScore::new(2, |x: &Vector, _| -x);
        for (x, t) in [(v(&[0.0, 0.0]), 0.01), (v(&[1.5, -0.7]), 0.5), (v(&[-3.0, 2.0]), 0.9)] {
            let est = log_density_ode(
                &score,
                &x,
                t,
                &sched,
                512,
                &Terminal::StandardNormal,
                DivergenceMode::ExactJacobian,
            )
            .unwrap();
            assert!((est.log_density - std_normal_log_density(&x)).abs() < 1e-3);
        }
    }

    #[test]
    fn d1_normalization() {
        let sched = NoiseSchedule::default();
        let score = FnScore::new(1, |x: &Vector, _| -x);
        let h = 0.05;
        let mut total = 0.0;
        let mut x = -8.0;
        while x <= 8.0 {
            let est = log_density_ode(
                &score,
                &v(&[x]),
                0.3,
                &sched,
                512,
                &Terminal::StandardNormal,
                DivergenceMode::ExactJacobian,
            )
            .unwrap();
            total += est.log_density.exp() * h;
            x += h;
        }
        assert!((0.99..=1.01).contains(&total), "mass {total}");
    }

    #[test]
    fn matches_closed_form_with_exact_terminal() {
        let sched = NoiseSchedule::default();
        let world = presets::two_factor();
        let m = AnalyticModel::new(world.clone(), sched);
        let prompt: PromptId = "cat+eyeglasses".into();
        let field = PromptScore::new(&m, prompt.clone()).unwrap();
        let terminal = Terminal::Exact(world.mixture(&prompt).unwrap().clone());
        for (x, t) in [(v(&[0.4, -3.2]), 0.05), (v(&[2.0, 1.0]), 0.5)] {
            let est = log_density_ode(&field, &x, t, &sched, 512, &terminal, DivergenceMode::ExactJacobian).unwrap();
            let exact = world.log_density(&prompt, &x, t, &sched).unwrap();
            assert!((est.log_density - exact).abs() < 1e-3);
        }
    }

    #[test]
    fn lambda_reductions() {
        let sched = NoiseSchedule::default();
        let m = AnalyticModel::new(presets::symmetric_1d(), sched);
        let (p, n) = (PromptId::from("right"), PromptId::from("left"));
        let zero = lambda_via_ode(
            &m,
            &p,
            &n,
            ClassifierParams::new(0.0, 0.5, 0.5),
            &v(&[0.7]),
            0.3,
            &sched,
            16,
            &Terminal::StandardNormal,
        )
        .unwrap();
        assert_eq!(zero, 0.0);
        let axis = lambda_via_ode(
            &m,
            &p,
            &n,
            ClassifierParams::new(2.0, 0.5, 0.5),
            &v(&[0.0]),
            0.3,
            &sched,
            128,
            &Terminal::StandardNormal,
        )
        .unwrap();
        assert!((axis - 1.0).abs() < 2e-3);
    }

    #[test]
    fn rejects_bad_inputs() {
        let sched = NoiseSchedule::default();
        let score = FnScore::new(1, |x: &Vector, _| -x);
        let x = v(&[0.0]);
        let term = Terminal::StandardNormal;
        assert!(log_density_ode(&score, &x, 0.0, &sched, 64, &term, DivergenceMode::ExactJacobian).is_err());
        assert!(log_density_ode(&score, &x, 0.5, &sched, 8, &term, DivergenceMode::ExactJacobian).is_err());
        let explode = FnScore::new(1, |x: &Vector, _| x * 1e9);
        assert!(matches!(
            log_density_ode(
                &explode,
                &v(&[1.0]),
                0.5,
                &sched,
                64,
                &term,
                DivergenceMode::ExactJacobian
            ),
            Err(Error::Trajectory { .. })
        ));
    }
}
