//! Analytic prompt-conditioned worlds: each prompt maps to a Gaussian mixture.

mod mixture;
pub mod presets;
mod prompt;
mod rejection;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use mixture::{Component, ComponentSpec, Covariance, GaussianMixture, MixtureEval, VarianceSpec};
pub use prompt::PromptId;
pub use rejection::{rejection_sample_tilted, TiltSpec, TiltedSamples};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::score::ConditionalModel;
use crate::Vector;

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEntry {
    pub mixture: GaussianMixture,
    pub prior: f64,
}

/// Registry of prompt-conditioned mixtures plus the derived unconditional mixture.
///
/// ∅ is never registered directly; it is the prior-weighted union of every prompt
/// with positive prior, so the unconditional model agrees with the conditionals.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    dim: usize,
    prompts: BTreeMap<PromptId, PromptEntry>,
    unconditional: GaussianMixture,
}

#[derive(Debug)]
pub struct WorldBuilder {
    dim: usize,
    prompts: BTreeMap<PromptId, PromptEntry>,
    error: Option<Error>,
}

impl WorldBuilder {
    pub fn prompt(mut self, prompt: impl Into<PromptId>, prior: f64, mixture: GaussianMixture) -> Self {
        let prompt = prompt.into();
        if self.error.is_some() {
            return self;
        }
        if prompt.is_empty() {
            self.error = Some(Error::Config("∅ is derived and cannot be registered".into()));
        } else if mixture.dim() != self.dim {
            self.error = Some(Error::Shape {
                expected: self.dim,
                got: mixture.dim(),
            });
        } else if !(prior >= 0.0 && prior.is_finite()) {
            self.error = Some(Error::Config(format!("prior of `{prompt}` must be >= 0")));
        } else if self
            .prompts
            .insert(prompt.clone(), PromptEntry { mixture, prior })
            .is_some()
        {
            self.error = Some(Error::Config(format!("prompt `{prompt}` registered twice")));
        }
        self
    }

    pub fn build(self) -> Result<World> {
        if let Some(e) = self.error {
            return Err(e);
        }
        let parts: Vec<(f64, &GaussianMixture)> = self.prompts.values().map(|e| (e.prior, &e.mixture)).collect();
        let unconditional = GaussianMixture::combine(&parts)?;
        Ok(World {
            dim: self.dim,
            prompts: self.prompts,
            unconditional,
        })
    }
}

impl World {
    pub fn builder(dim: usize) -> WorldBuilder {
        WorldBuilder {
            dim,
            prompts: BTreeMap::new(),
            error: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Registered prompts (∅ excluded), in canonical order.
    pub fn prompts(&self) -> impl Iterator<Item = (&PromptId, &PromptEntry)> {
        self.prompts.iter()
    }

    pub fn contains(&self, prompt: &PromptId) -> bool {
        prompt.is_empty() || self.prompts.contains_key(prompt)
    }

    pub fn mixture(&self, prompt: &PromptId) -> Result<&GaussianMixture> {
        if prompt.is_empty() {
            return Ok(&self.unconditional);
        }
        self.prompts
            .get(prompt)
            .map(|e| &e.mixture)
            .ok_or_else(|| Error::UnknownPrompt(prompt.to_string()))
    }

    /// Prior `p(y)`; ∅ has prior one by convention.
    pub fn prior(&self, prompt: &PromptId) -> Result<f64> {
        if prompt.is_empty() {
            return Ok(1.0);
        }
        self.prompts
            .get(prompt)
            .map(|e| e.prior)
            .ok_or_else(|| Error::UnknownPrompt(prompt.to_string()))
    }

    /// The exact perturbed mixture of `prompt` at time `t`.
    pub fn marginal_params(&self, prompt: &PromptId, t: f64, sched: &NoiseSchedule) -> Result<GaussianMixture> {
        let (a, s) = sched.alpha_sigma(t)?;
        Ok(self.mixture(prompt)?.perturbed(a, s))
    }

    pub fn evaluate(&self, prompt: &PromptId, x: &Vector, t: f64, sched: &NoiseSchedule) -> Result<MixtureEval> {
        let (a, s) = sched.alpha_sigma(t)?;
        self.mixture(prompt)?.evaluate(x, a, s).map_err(|e| match e {
            Error::NonFinite { what, x, .. } => Error::NonFinite { what, t, x },
            other => other,
        })
    }

    /// `∇ₓ log p_t(x | prompt)`.
    pub fn score(&self, prompt: &PromptId, x: &Vector, t: f64, sched: &NoiseSchedule) -> Result<Vector> {
        Ok(self.evaluate(prompt, x, t, sched)?.score)
    }

    /// `log p_t(x | prompt)`.
    pub fn log_density(&self, prompt: &PromptId, x: &Vector, t: f64, sched: &NoiseSchedule) -> Result<f64> {
        Ok(self.evaluate(prompt, x, t, sched)?.log_density)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldFile {
    dimension: usize,
    prompts: Vec<PromptFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptFile {
    tokens: PromptId,
    #[serde(default = "default_prior")]
    prior: f64,
    components: GaussianMixture,
}

fn default_prior() -> f64 {
    1.0
}

impl Serialize for World {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        WorldFile {
            dimension: self.dim,
            prompts: self
                .prompts
                .iter()
                .map(|(p, e)| PromptFile {
                    tokens: p.clone(),
                    prior: e.prior,
                    components: e.mixture.clone(),
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for World {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = WorldFile::deserialize(d)?;
        file.prompts
            .into_iter()
            .fold(World::builder(file.dimension), |b, p| {
                b.prompt(p.tokens, p.prior, p.components)
            })
            .build()
            .map_err(serde::de::Error::custom)
    }
}

/// A [`World`] exposed as a conditional score model with exact densities.
#[derive(Debug, Clone)]
pub struct AnalyticModel {
    pub world: Arc<World>,
    pub sched: NoiseSchedule,
}

impl AnalyticModel {
    pub fn new(world: World, sched: NoiseSchedule) -> Self {
        Self {
            world: Arc::new(world),
            sched,
        }
    }
}

impl ConditionalModel for AnalyticModel {
    fn dim(&self) -> usize {
        self.world.dim()
    }

    fn has_prompt(&self, prompt: &PromptId) -> bool {
        self.world.contains(prompt)
    }

    fn cond_score(&self, prompt: &PromptId, x: &Vector, t: f64) -> Result<Vector> {
        self.world.score(prompt, x, t, &self.sched)
    }

    fn cond_log_density(&self, prompt: &PromptId, x: &Vector, t: f64) -> Option<Result<f64>> {
        Some(self.world.log_density(prompt, x, t, &self.sched))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_vec(xs.to_vec())
    }

    fn three_prompt_world() -> World {
        World::builder(2)
            .prompt("a", 0.2, GaussianMixture::unit(v(&[-2.0, 0.0])))
            .prompt(
                "b",
                0.5,
                GaussianMixture::isotropic(&[(0.5, v(&[1.0, 1.0])), (0.5, v(&[1.0, -2.0]))], 0.7).unwrap(),
            )
            .prompt("a+c", 0.3, GaussianMixture::unit(v(&[0.0, 3.0])))
            .build()
            .unwrap()
    }

    #[test]
    fn unconditional_is_posterior_weighted_combination() {
        let world = three_prompt_world();
        let sched = NoiseSchedule::default();
        for &(x0, x1, t) in &[(0.3, -0.2, 0.1), (2.0, 1.0, 0.5), (-1.0, 4.0, 0.9)] {
            let x = v(&[x0, x1]);
            // Bayes: s(∅) = Σ_y p(y|x) s(y) with p(y|x) ∝ p(y) p_t(x|y).
            let mut logs = Vec::new();
            let mut scores = Vec::new();
            for (p, e) in world.prompts() {
                logs.push(e.prior.ln() + world.log_density(p, &x, t, &sched).unwrap());
                scores.push(world.score(p, &x, t, &sched).unwrap());
            }
            let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logs.iter().map(|l| (l - max).exp()).sum();
            let mut expected = Vector::zeros(2);
            for (l, s) in logs.iter().zip(&scores) {
                expected += s * ((l - max).exp() / z);
            }
            let got = world.score(&PromptId::empty(), &x, t, &sched).unwrap();
            assert!((got - expected).norm() < 1e-10);
        }
    }

    #[test]
    fn unknown_prompt_is_reported() {
        let world = three_prompt_world();
        let sched = NoiseSchedule::default();
        let r = world.score(&"zebra".into(), &Vector::zeros(2), 0.5, &sched);
        assert!(matches!(r, Err(Error::UnknownPrompt(p)) if p == "zebra"));
    }

    #[test]
    fn marginal_params_examples() {
        let sched = NoiseSchedule::default();
        let world = World::builder(2)
            .prompt("z", 1.0, GaussianMixture::unit(Vector::zeros(2)))
            .prompt("m", 0.0, GaussianMixture::unit(v(&[1.0, -2.0])))
            .build()
            .unwrap();
        for &t in &[0.0, 0.3, 1.0] {
            let p = world.marginal_params(&"z".into(), t, &sched).unwrap();
            let c = &p.components()[0];
            assert!(c.mean.norm() < 1e-15);
            assert!(
                (c.covariance.to_matrix() - nalgebra::DMatrix::identity(2, 2))
                    .abs()
                    .max()
                    < 1e-14
            );
            let (a, _) = sched.alpha_sigma(t).unwrap();
            let q = world.marginal_params(&"m".into(), t, &sched).unwrap();
            assert!((&q.components()[0].mean - v(&[a, -2.0 * a])).norm() < 1e-15);
        }
        assert!(world.marginal_params(&"q".into(), 0.5, &sched).is_err());
    }

    #[test]
    fn json_schema_round_trip() {
        let json = r#"{
            "dimension": 2,
            "prompts": [
                {"tokens": ["cat"], "prior": 0.5, "components": [{"weight": 1, "mean": [0, -3]}]},
                {"tokens": ["eyeglasses", "cat"], "prior": 0.5,
                 "components": [{"weight": 1, "mean": [1, -3], "variance": [1, 2]}]}
            ]
        }"#;
        let world = World::from_json_str(json).unwrap();
        assert!(world.contains(&"cat+eyeglasses".into()));
        assert_eq!(World::from_json_str(&world.to_json().unwrap()).unwrap(), world);

        let bad = r#"{"dimension": 3, "prompts": [{"tokens": ["a"], "components": [{"weight": 1, "mean": [0]}]}]}"#;
        assert!(World::from_json_str(bad).is_err());
        let empty = r#"{"dimension": 1, "prompts": [{"tokens": [], "components": [{"weight": 1, "mean": [0]}]}]}"#;
        assert!(World::from_json_str(empty).is_err());
    }
}
