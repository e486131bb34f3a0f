//! Run configurations, one schema per subcommand.
//!
//! A run starts from the defaults (or a `--config` JSON file), applies flag
//! overrides, resolves defaults that depend on other fields, and writes the result
//! back as `config.json`. Feeding that echo to `--config` replays the run.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use clap::ValueEnum;
use contrastive_core::editing::{EditMethod, SearchGrid};
use contrastive_core::pipeline::ExpertConfig;
use contrastive_core::sampler::Sampler;
use contrastive_core::verify::CRITERIA;
use contrastive_core::world::{presets, PromptId, World};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Read a config file, reporting the failing field path on schema violations.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse(&text).map_err(|e| anyhow!("config {}: {e}", path.display()))
}

/// Parse a config document; the error names the offending field path.
pub fn parse<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| anyhow!("field `{}`: {}", e.path(), e.inner()))
}

/// A preset name or a path to a world JSON file.
pub fn load_world(name: &str) -> Result<World> {
    if presets::PRESET_NAMES.contains(&name) {
        return Ok(presets::by_name(name)?);
    }
    let path = Path::new(name);
    if path.exists() {
        return World::load(path).with_context(|| format!("loading world file {name}"));
    }
    bail!(
        "world `{name}` is neither a preset ({}) nor an existing file",
        presets::PRESET_NAMES.join(", ")
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Euler–Maruyama on the reverse SDE.
    Em,
    /// Heun on the probability-flow ODE.
    Ode,
    /// DDIM with stochasticity `--eta`.
    Ddim,
}

impl SamplerKind {
    pub fn with_eta(self, eta: f64) -> Sampler {
        match self {
            SamplerKind::Em => Sampler::EmSde,
            SamplerKind::Ode => Sampler::PfOde,
            SamplerKind::Ddim => Sampler::Ddim { eta },
        }
    }

    pub fn from_sampler(s: Sampler) -> (Self, Option<f64>) {
        match s {
            Sampler::EmSde => (SamplerKind::Em, None),
            Sampler::PfOde => (SamplerKind::Ode, None),
            Sampler::Ddim { eta } => (SamplerKind::Ddim, Some(eta)),
        }
    }
}

fn check_positive(what: &str, v: usize) -> Result<()> {
    if v == 0 {
        bail!("`{what}` must be positive");
    }
    Ok(())
}

fn check_finite(what: &str, v: f64) -> Result<()> {
    if !v.is_finite() {
        bail!("`{what}` must be finite, got {v}");
    }
    Ok(())
}

fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        bail!("`eta` must lie in [0, 1], got {eta}");
    }
    Ok(())
}

/// Either a constant contrastive weight or the exact classifier weight with
/// temperature `gamma`; exactly one is set after resolution.
fn resolve_lambda(lambda: &mut Option<f64>, gamma: Option<f64>, default: f64) -> Result<()> {
    match (*lambda, gamma) {
        (Some(_), Some(_)) => bail!("set either `lambda` or `gamma`, not both"),
        (None, None) => *lambda = Some(default),
        (Some(l), None) => check_finite("lambda", l)?,
        (None, Some(g)) => {
            if !(g >= 0.0 && g.is_finite()) {
                bail!("`gamma` must be finite and >= 0, got {g}");
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub seed: u64,
    pub world: String,
    pub prompt: PromptId,
    /// CFG strength on the base prompt; 1 means plain conditional sampling.
    pub tau: f64,
    pub positive: Option<PromptId>,
    pub negative: Option<PromptId>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub n: usize,
    pub steps: usize,
    pub sampler: SamplerKind,
    pub eta: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: "two-prompt".into(),
            prompt: "photo".into(),
            tau: 1.0,
            positive: Some("photo+winter".into()),
            negative: Some("photo".into()),
            lambda: None,
            gamma: None,
            n: 1000,
            steps: 500,
            sampler: SamplerKind::Em,
            eta: 0.1,
        }
    }
}

pub const DEFAULT_SAMPLE_LAMBDA: f64 = 4.0;

impl SampleConfig {
    pub fn resolve(&mut self) -> Result<()> {
        if self.positive.is_some() != self.negative.is_some() {
            bail!("`positive` and `negative` must be set together");
        }
        if self.positive.is_some() {
            resolve_lambda(&mut self.lambda, self.gamma, DEFAULT_SAMPLE_LAMBDA)?;
        } else if self.lambda.is_some() || self.gamma.is_some() {
            bail!("`lambda` and `gamma` need `positive` and `negative`");
        }
        check_positive("n", self.n)?;
        check_positive("steps", self.steps)?;
        check_finite("tau", self.tau)?;
        check_eta(self.eta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub seed: u64,
    pub world: String,
    pub prompt: PromptId,
    pub tau: f64,
    pub positive: PromptId,
    pub negative: PromptId,
    pub lambdas: Vec<f64>,
    pub n: usize,
    pub steps: usize,
    pub sampler: SamplerKind,
    pub eta: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: "two-prompt".into(),
            prompt: "photo".into(),
            tau: 1.0,
            positive: "photo+winter".into(),
            negative: "photo".into(),
            lambdas: contrastive_core::verify::SWEEP_LAMBDAS.to_vec(),
            n: 2000,
            steps: 1000,
            sampler: SamplerKind::Em,
            eta: 0.1,
        }
    }
}

impl SweepConfig {
    pub fn resolve(&mut self) -> Result<()> {
        if self.lambdas.is_empty() {
            bail!("`lambdas` must not be empty");
        }
        for l in &self.lambdas {
            check_finite("lambdas", *l)?;
        }
        if self.n < 2 {
            bail!("`n` must be at least 2");
        }
        check_positive("steps", self.steps)?;
        check_finite("tau", self.tau)?;
        check_eta(self.eta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SearchKind {
    /// Edit once at the configured `tau` and `t_e`.
    None,
    /// 6 × 6 grid over `tau` and `t_e`.
    Full,
    /// 4 × 3 grid over `tau` and `t_e`.
    Reduced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Sdedit,
    Cycle,
}

impl From<MethodKind> for EditMethod {
    fn from(m: MethodKind) -> Self {
        match m {
            MethodKind::Sdedit => EditMethod::Sdedit,
            MethodKind::Cycle => EditMethod::Cycle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    pub seed: u64,
    pub world: String,
    pub source: PromptId,
    pub target: PromptId,
    pub method: MethodKind,
    /// Defaults to the method's own default (6 for cycle, 10 for sdedit).
    pub lambda: Option<f64>,
    pub tau: f64,
    pub t_e: f64,
    pub eta: f64,
    /// Number of edit tasks.
    pub n: usize,
    /// Fixed source point; drawn from the source prompt per task when absent.
    pub x0: Option<Vec<f64>>,
    pub search: SearchKind,
    pub trials: usize,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: "two-prompt".into(),
            source: "photo".into(),
            target: "photo+winter".into(),
            method: MethodKind::Sdedit,
            lambda: None,
            tau: 1.0,
            t_e: 0.3,
            eta: contrastive_core::editing::DEFAULT_EDIT_ETA,
            n: 100,
            x0: None,
            search: SearchKind::None,
            trials: 3,
        }
    }
}

impl EditConfig {
    pub fn resolve(&mut self) -> Result<()> {
        let method: EditMethod = self.method.into();
        let lambda = *self.lambda.get_or_insert(method.default_lambda());
        check_finite("lambda", lambda)?;
        check_finite("tau", self.tau)?;
        check_positive("n", self.n)?;
        check_positive("trials", self.trials)?;
        check_eta(self.eta)?;
        if !(self.t_e > 0.0 && self.t_e <= 1.0) {
            bail!("`t_e` must lie in (0, 1], got {}", self.t_e);
        }
        Ok(())
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
            .unwrap_or_else(|| EditMethod::from(self.method).default_lambda())
    }

    pub fn grid(&self) -> SearchGrid {
        match self.search {
            SearchKind::None => SearchGrid::single(self.tau, self.t_e),
            SearchKind::Full => SearchGrid::full(),
            SearchKind::Reduced => SearchGrid::reduced(),
        }
    }

    pub fn trials(&self) -> usize {
        if self.search == SearchKind::None {
            1
        } else {
            self.trials
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalKind {
    /// The prompt's data distribution pushed forward to `T`.
    Exact,
    /// `N(0, I)`.
    StandardNormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceKind {
    /// Finite-difference Jacobian diagonal.
    Exact,
    /// Rademacher-probe trace estimate.
    Hutchinson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityConfig {
    pub seed: u64,
    pub world: String,
    pub prompt: PromptId,
    /// Number of evaluation points.
    pub n: usize,
    pub steps: usize,
    /// Evaluation time; drawn uniformly per point when absent.
    pub t: Option<f64>,
    pub terminal: TerminalKind,
    pub divergence: DivergenceKind,
    pub probes: usize,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: "two-prompt".into(),
            prompt: "photo".into(),
            n: 100,
            steps: contrastive_core::density::DEFAULT_DENSITY_STEPS,
            t: None,
            terminal: TerminalKind::Exact,
            divergence: DivergenceKind::Exact,
            probes: 16,
        }
    }
}

impl DensityConfig {
    pub fn resolve(&mut self) -> Result<()> {
        check_positive("n", self.n)?;
        check_positive("steps", self.steps)?;
        check_positive("probes", self.probes)?;
        if let Some(t) = self.t {
            if !(contrastive_core::schedule::T_EPS..=1.0).contains(&t) {
                bail!("`t` must lie in [1e-5, 1], got {t}");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertRunConfig {
    pub world: String,
    /// Use exact scores instead of trained networks.
    pub analytic: bool,
    pub pipeline: ExpertConfig,
}

impl Default for ExpertRunConfig {
    fn default() -> Self {
        Self {
            world: "two-factor".into(),
            analytic: false,
            pipeline: ExpertConfig::default(),
        }
    }
}

impl ExpertRunConfig {
    pub fn resolve(&mut self) -> Result<()> {
        let p = &self.pipeline;
        check_finite("pipeline.lambda", p.lambda)?;
        check_finite("pipeline.tau", p.tau)?;
        check_positive("pipeline.steps", p.steps)?;
        if p.n < 2 {
            bail!("`pipeline.n` must be at least 2");
        }
        if let Sampler::Ddim { eta } = p.sampler {
            check_eta(eta)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyRunConfig {
    pub seed: u64,
    pub criteria: Vec<u32>,
}

impl Default for VerifyRunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            criteria: CRITERIA.iter().map(|c| c.0).collect(),
        }
    }
}

impl VerifyRunConfig {
    pub fn resolve(&mut self) -> Result<()> {
        for id in &self.criteria {
            if !CRITERIA.iter().any(|c| c.0 == *id) {
                bail!("`criteria` contains unknown id {id} (known: 1–{})", CRITERIA.len());
            }
        }
        Ok(())
    }
}
