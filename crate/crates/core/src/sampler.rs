//! Reverse-time samplers driven by an arbitrary [`ScoreField`].
//!
//! Every stochastic sampler consumes one standard-normal vector per grid step.
//! Those draws are materialized up front as a [`NoiseRecord`], so two runs fed
//! the same record (and the same start point) differ only through their score
//! fields. `sample` with a given seed is exactly "draw start + record, then run".

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::schedule::{NoiseSchedule, TimeGrid};
use crate::score::ScoreField;
use crate::Vector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampler {
    /// Euler–Maruyama on the reverse SDE.
    EmSde,
    /// Heun on the probability-flow ODE.
    PfOde,
    /// Stochastic DDIM; `eta = 0` is deterministic.
    Ddim { eta: f64 },
}

impl Sampler {
    pub fn is_stochastic(&self) -> bool {
        !matches!(self, Sampler::PfOde)
    }

    pub fn name(&self) -> String {
        match self {
            Sampler::EmSde => "em".into(),
            Sampler::PfOde => "ode".into(),
            Sampler::Ddim { eta } => format!("ddim(eta={eta})"),
        }
    }
}

/// Per-step noise draws, indexed like the steps of a [`TimeGrid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub steps: Vec<Vector>,
}

impl NoiseRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn draw(dim: usize, n_steps: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            steps: (0..n_steps).map(|_| standard_normal(dim, rng)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<(f64, Vector)>,
    pub noise: Option<NoiseRecord>,
}

impl Trajectory {
    pub fn endpoint(&self) -> &Vector {
        &self.states.last().expect("trajectory has at least one state").1
    }
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-derived seed for the `index`-th trajectory of a run.
pub fn derive_seed(run_seed: u64, index: u64) -> u64 {
    splitmix64(run_seed ^ splitmix64(index.wrapping_add(0xD1B5_4A32_D192_ED03)))
}

pub fn standard_normal(dim: usize, rng: &mut ChaCha8Rng) -> Vector {
    Vector::from_iterator(dim, (0..dim).map(|_| StandardNormal.sample(rng)))
}

fn eval_score<S: ScoreField + ?Sized>(score: &S, x: &Vector, t: f64) -> Result<Vector> {
    let s = score.score(x, t)?;
    check_dim(x.len(), s.len())?;
    if !s.iter().all(|v| v.is_finite()) {
        return Err(Error::non_finite("score", t, x));
    }
    Ok(s)
}

fn require_backward(dt: f64) -> Result<()> {
    if !(dt < 0.0) {
        return Err(Error::Config(format!("reverse-time step needs dt < 0, got {dt}")));
    }
    Ok(())
}

/// One Euler–Maruyama step of `dx = [−½βx − β·s(x,t)]dt + √β dw̄` with `dt < 0`.
pub fn reverse_sde_step<S: ScoreField + ?Sized>(
    x: &Vector,
    t: f64,
    dt: f64,
    score: &S,
    sched: &NoiseSchedule,
    noise: &Vector,
) -> Result<Vector> {
    require_backward(dt)?;
    check_dim(x.len(), noise.len())?;
    let beta = sched.beta(t);
    let s = eval_score(score, x, t)?;
    let drift = x * (-0.5 * beta) - s * beta;
    Ok(x + drift * dt + noise * (beta * -dt).sqrt())
}

fn pf_drift<S: ScoreField + ?Sized>(x: &Vector, t: f64, score: &S, sched: &NoiseSchedule) -> Result<Vector> {
    let beta = sched.beta(t);
    let s = eval_score(score, x, t)?;
    Ok((x + s) * (-0.5 * beta))
}

/// One Heun step of the probability-flow ODE `dx = [−½βx − ½β·s(x,t)]dt`.
///
/// Works in either time direction; the samplers call it with `dt < 0`.
pub fn pf_ode_step<S: ScoreField + ?Sized>(
    x: &Vector,
    t: f64,
    dt: f64,
    score: &S,
    sched: &NoiseSchedule,
) -> Result<Vector> {
    let k1 = pf_drift(x, t, score, sched)?;
    let predicted = x + &k1 * dt;
    let k2 = pf_drift(&predicted, t + dt, score, sched)?;
    Ok(x + (k1 + k2) * (0.5 * dt))
}

/// Coefficients of the stochastic DDIM update from `t` to `t_next < t`:
/// `x' = α' x̂₀ + direction · ε̂ + noise_scale · z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdimCoefficients {
    pub alpha: f64,
    pub sigma: f64,
    pub alpha_next: f64,
    pub sigma_next: f64,
    pub direction: f64,
    pub noise_scale: f64,
}

impl DdimCoefficients {
    pub fn new(sched: &NoiseSchedule, t: f64, t_next: f64, eta: f64) -> Result<Self> {
        if !(t_next < t) {
            return Err(Error::Config(format!(
                "DDIM step needs t_next < t, got {t} -> {t_next}"
            )));
        }
        if !(eta >= 0.0) {
            return Err(Error::Config(format!("DDIM eta must be >= 0, got {eta}")));
        }
        let (alpha, sigma) = sched.alpha_sigma(t)?;
        let (alpha_next, sigma_next) = sched.alpha_sigma(t_next)?;
        // 1 − α_t²/α_{t'}² = −expm1(−∫_{t'}^{t} β).
        let decay = -(-(sched.integrated_beta(t) - sched.integrated_beta(t_next))).exp_m1();
        let tilde2 = if sigma > 0.0 {
            sigma_next * sigma_next / (sigma * sigma) * decay
        } else {
            0.0
        };
        let noise_scale = eta * tilde2.sqrt();
        let direction = (sigma_next * sigma_next - noise_scale * noise_scale).max(0.0).sqrt();
        Ok(Self {
            alpha,
            sigma,
            alpha_next,
            sigma_next,
            direction,
            noise_scale,
        })
    }

    /// Deterministic part `α' x̂₀ + direction · ε̂` given the score at `(x, t)`.
    pub fn mean(&self, x: &Vector, score: &Vector) -> Vector {
        let eps = score * (-self.sigma);
        let x0_hat = (x - &eps * self.sigma) / self.alpha;
        x0_hat * self.alpha_next + eps * self.direction
    }
}

/// One stochastic DDIM step with `ε̂ = −σ_t · s(x, t)`.
pub fn ddim_step<S: ScoreField + ?Sized>(
    x: &Vector,
    t: f64,
    t_next: f64,
    score: &S,
    sched: &NoiseSchedule,
    eta: f64,
    noise: &Vector,
) -> Result<Vector> {
    check_dim(x.len(), noise.len())?;
    let c = DdimCoefficients::new(sched, t, t_next, eta)?;
    let s = eval_score(score, x, t)?;
    let mut out = c.mean(x, &s);
    if c.noise_scale > 0.0 {
        out += noise * c.noise_scale;
    }
    Ok(out)
}

fn step_once<S: ScoreField + ?Sized>(
    score: &S,
    sched: &NoiseSchedule,
    sampler: Sampler,
    x: &Vector,
    t: f64,
    t_next: f64,
    z: Option<&Vector>,
) -> Result<Vector> {
    match sampler {
        Sampler::EmSde => reverse_sde_step(x, t, t_next - t, score, sched, z.expect("noise")),
        Sampler::PfOde => pf_ode_step(x, t, t_next - t, score, sched),
        Sampler::Ddim { eta } => ddim_step(x, t, t_next, score, sched, eta, z.expect("noise")),
    }
}

fn run<S, F>(
    score: &S,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    sampler: Sampler,
    start: Vector,
    noise: Option<&NoiseRecord>,
    mut visit: F,
) -> Result<Vector>
where
    S: ScoreField + ?Sized,
    F: FnMut(f64, &Vector),
{
    check_dim(score.dim(), start.len())?;
    if sampler.is_stochastic() {
        match noise {
            None => return Err(Error::Config("stochastic sampler needs a noise record".into())),
            Some(r) if r.len() != grid.n_steps() => {
                return Err(Error::Shape {
                    expected: grid.n_steps(),
                    got: r.len(),
                })
            }
            Some(_) => {}
        }
    }
    let mut x = start;
    visit(grid.start(), &x);
    for (i, (t, t_next)) in grid.steps().enumerate() {
        let z = noise.map(|r| &r.steps[i]);
        x = step_once(score, sched, sampler, &x, t, t_next, z).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Trajectory {
                step: i,
                t,
                reason: e.to_string(),
            },
            other => other,
        })?;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Trajectory {
                step: i,
                t: t_next,
                reason: "state became non-finite".into(),
            });
        }
        visit(t_next, &x);
    }
    Ok(x)
}

/// Run a sampler from `start` over `grid`, replaying `noise` for stochastic samplers.
pub fn integrate<S: ScoreField + ?Sized>(
    score: &S,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    sampler: Sampler,
    start: Vector,
    noise: Option<&NoiseRecord>,
) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(grid.n_steps() + 1);
    run(score, grid, sched, sampler, start, noise, |t, x| {
        states.push((t, x.clone()))
    })?;
    Ok(Trajectory {
        states,
        noise: noise.cloned(),
    })
}

/// Like [`integrate`] but keeps only the final state.
pub fn integrate_endpoint<S: ScoreField + ?Sized>(
    score: &S,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    sampler: Sampler,
    start: Vector,
    noise: Option<&NoiseRecord>,
) -> Result<Vector> {
    run(score, grid, sched, sampler, start, noise, |_, _| {})
}

/// Start point and noise record consumed by `sample(seed)`.
pub fn draw_shared_noise(dim: usize, grid: &TimeGrid, sampler: Sampler, seed: u64) -> (Vector, Option<NoiseRecord>) {
    let mut rng = rng_from_seed(seed);
    let start = standard_normal(dim, &mut rng);
    let record = sampler
        .is_stochastic()
        .then(|| NoiseRecord::draw(dim, grid.n_steps(), &mut rng));
    (start, record)
}

/// Generate one trajectory from `x_T ~ N(0, I)`.
pub fn sample<S: ScoreField + ?Sized>(
    score: &S,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    sampler: Sampler,
    seed: u64,
    record_noise: bool,
) -> Result<Trajectory> {
    let (start, record) = draw_shared_noise(score.dim(), grid, sampler, seed);
    let mut traj = integrate(score, grid, sched, sampler, start, record.as_ref())?;
    if !record_noise {
        traj.noise = None;
    }
    Ok(traj)
}

/// Endpoints of `n` trajectories with per-trajectory seeds `derive_seed(run_seed, i)`.
///
/// Two calls with the same `run_seed` consume identical start points and noise.
pub fn sample_endpoints<S: ScoreField + ?Sized>(
    score: &S,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    sampler: Sampler,
    n: usize,
    run_seed: u64,
) -> Result<Vec<Vector>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let (start, record) = draw_shared_noise(score.dim(), grid, sampler, derive_seed(run_seed, i as u64));
            integrate_endpoint(score, grid, sched, sampler, start, record.as_ref())
        })
        .collect()
}
