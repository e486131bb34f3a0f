//! Score-field algebra: classifier-free, negative and contrastive guidance.
//!
//! The contrastive term `λ_t (s(x,t,y⁺) − s(x,t,y⁻))` is the gradient of the log of
//! a two-prompt generative classifier raised to temperature `γ`, up to the
//! x-dependent weight `λ_t(x) = γ (1 − c(x))`. Constant-λ mode drops that weight.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::density::{lambda_via_ode, Terminal};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::score::{ConditionalModel, ScoreField};
use crate::world::PromptId;
use crate::Vector;

/// Piecewise-constant function of time.
///
/// `Piecewise { knots: [k₁ … kₙ], values: [v₀ … vₙ] }` is `v₀` on `t < k₁`,
/// `vᵢ` on `kᵢ ≤ t < kᵢ₊₁` and `vₙ` on `t ≥ kₙ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimeSchedule {
    Constant(f64),
    Piecewise { knots: Vec<f64>, values: Vec<f64> },
}

impl From<f64> for TimeSchedule {
    fn from(v: f64) -> Self {
        TimeSchedule::Constant(v)
    }
}

impl TimeSchedule {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            TimeSchedule::Constant(v) => *v,
            TimeSchedule::Piecewise { knots, values } => values[knots.iter().take_while(|&&k| t >= k).count()],
        }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        match self {
            TimeSchedule::Constant(v) if v.is_finite() => Ok(()),
            TimeSchedule::Constant(v) => Err(Error::Config(format!("{what} = {v} is not finite"))),
            TimeSchedule::Piecewise { knots, values } => {
                if values.len() != knots.len() + 1 {
                    return Err(Error::Config(format!(
                        "{what}: piecewise schedule needs one more value than knots"
                    )));
                }
                if knots.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::Config(format!("{what}: knots must increase")));
                }
                if values.iter().chain(knots).any(|v| !v.is_finite()) {
                    return Err(Error::Config(format!("{what}: schedule must be finite")));
                }
                Ok(())
            }
        }
    }

    fn is_zero_everywhere(&self) -> bool {
        match self {
            TimeSchedule::Constant(v) => *v == 0.0,
            TimeSchedule::Piecewise { values, .. } => values.iter().all(|v| *v == 0.0),
        }
    }
}

/// How the contrastive weight `λ_t` is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaMode {
    /// `λ_t(x) = γ_t (1 − c(x))` from exact or ODE-estimated densities.
    Exact {
        gamma: TimeSchedule,
        #[serde(default = "half")]
        prior_positive: f64,
        #[serde(default = "half")]
        prior_negative: f64,
        /// Density-ODE steps used when the model has no closed-form density.
        #[serde(default = "default_ode_steps")]
        ode_steps: usize,
    },
    Constant(TimeSchedule),
}

fn half() -> f64 {
    0.5
}

fn default_ode_steps() -> usize {
    64
}

impl From<f64> for LambdaMode {
    fn from(v: f64) -> Self {
        LambdaMode::Constant(TimeSchedule::Constant(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Base {
    /// `s(x, t, y)`.
    Conditional { prompt: PromptId },
    /// `τ s(y) − (τ − 1) s(∅)`.
    Cfg { prompt: PromptId, tau: TimeSchedule },
    /// A separately supplied unconditional expert field.
    Expert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Term {
    /// `+ τ (s(y) − s(∅))`.
    Cfg { prompt: PromptId, tau: TimeSchedule },
    /// `+ λ (s(y⁺) − s(y⁻))`.
    Contrastive {
        positive: PromptId,
        negative: PromptId,
        lambda: LambdaMode,
    },
    /// `+ τ (s(∅) − s(y⁻))`.
    Negative { prompt: PromptId, tau: TimeSchedule },
}

/// A guided base field plus additive guidance terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    pub base: Base,
    #[serde(default)]
    pub terms: Vec<Term>,
}

impl GuidanceSpec {
    pub fn conditional(prompt: impl Into<PromptId>) -> Self {
        Self {
            base: Base::Conditional { prompt: prompt.into() },
            terms: Vec::new(),
        }
    }

    pub fn cfg(prompt: impl Into<PromptId>, tau: f64) -> Self {
        Self {
            base: Base::Cfg {
                prompt: prompt.into(),
                tau: tau.into(),
            },
            terms: Vec::new(),
        }
    }

    pub fn expert() -> Self {
        Self {
            base: Base::Expert,
            terms: Vec::new(),
        }
    }

    pub fn with_term(mut self, term: Term) -> Self {
        self.terms.push(term);
        self
    }

    pub fn with_contrastive(
        self,
        positive: impl Into<PromptId>,
        negative: impl Into<PromptId>,
        lambda: impl Into<LambdaMode>,
    ) -> Self {
        self.with_term(Term::Contrastive {
            positive: positive.into(),
            negative: negative.into(),
            lambda: lambda.into(),
        })
    }

    /// Copy with every contrastive term set to constant `λ`.
    pub fn with_contrastive_lambda(&self, lambda: f64) -> Self {
        let mut out = self.clone();
        for term in &mut out.terms {
            if let Term::Contrastive { lambda: l, .. } = term {
                *l = lambda.into();
            }
        }
        out
    }

    fn prompts(&self) -> Vec<&PromptId> {
        let mut out = Vec::new();
        match &self.base {
            Base::Conditional { prompt } | Base::Cfg { prompt, .. } => out.push(prompt),
            Base::Expert => {}
        }
        for term in &self.terms {
            match term {
                Term::Cfg { prompt, .. } | Term::Negative { prompt, .. } => out.push(prompt),
                Term::Contrastive { positive, negative, .. } => {
                    out.push(positive);
                    out.push(negative);
                }
            }
        }
        out
    }

    fn needs_unconditional(&self) -> bool {
        matches!(self.base, Base::Cfg { .. })
            || self
                .terms
                .iter()
                .any(|t| matches!(t, Term::Cfg { .. } | Term::Negative { .. }))
    }

    pub fn validate(&self, model: &dyn ConditionalModel, has_expert: bool) -> Result<()> {
        for p in self.prompts() {
            if !model.has_prompt(p) {
                return Err(Error::UnknownPrompt(p.to_string()));
            }
        }
        if self.needs_unconditional() && !model.has_prompt(&PromptId::empty()) {
            return Err(Error::Config("guidance needs the unconditional prompt ∅".into()));
        }
        match (&self.base, has_expert) {
            (Base::Expert, false) => return Err(Error::Config("expert base requested but no expert given".into())),
            (Base::Cfg { tau, .. }, _) => tau.validate("base tau")?,
            _ => {}
        }
        for term in &self.terms {
            match term {
                Term::Cfg { tau, .. } | Term::Negative { tau, .. } => tau.validate("tau")?,
                Term::Contrastive { lambda, .. } => match lambda {
                    LambdaMode::Constant(l) => l.validate("lambda")?,
                    LambdaMode::Exact {
                        gamma,
                        prior_positive,
                        prior_negative,
                        ode_steps,
                    } => {
                        gamma.validate("gamma")?;
                        if !(*prior_positive > 0.0 && *prior_negative > 0.0) {
                            return Err(Error::Config("classifier priors must be positive".into()));
                        }
                        if *ode_steps < 16 {
                            return Err(Error::Config("ode_steps must be >= 16".into()));
                        }
                    }
                },
            }
        }
        Ok(())
    }
}

fn require_unconditional(model: &dyn ConditionalModel) -> Result<()> {
    if model.has_prompt(&PromptId::empty()) {
        Ok(())
    } else {
        Err(Error::Config("model has no unconditional prompt ∅".into()))
    }
}

/// Classifier-free guidance `τ s(y) − (τ − 1) s(∅)`, evaluated as
/// `s(y) + (τ − 1)(s(y) − s(∅))`.
pub fn cfg_score(model: &dyn ConditionalModel, prompt: &PromptId, tau: f64, x: &Vector, t: f64) -> Result<Vector> {
    require_unconditional(model)?;
    let cond = model.cond_score(prompt, x, t)?;
    if tau == 1.0 || prompt.is_empty() {
        return Ok(cond);
    }
    let uncond = model.cond_score(&PromptId::empty(), x, t)?;
    let diff = &cond - uncond;
    Ok(cond + diff * (tau - 1.0))
}

/// `s(y⁺) − s(y⁻)`, exactly zero when the prompts coincide.
pub fn contrastive_difference(
    model: &dyn ConditionalModel,
    positive: &PromptId,
    negative: &PromptId,
    x: &Vector,
    t: f64,
) -> Result<Vector> {
    if positive == negative {
        return Ok(Vector::zeros(x.len()));
    }
    Ok(model.cond_score(positive, x, t)? - model.cond_score(negative, x, t)?)
}

/// `guided + λ (s(y⁺) − s(y⁻))`.
#[allow(clippy::too_many_arguments)]
pub fn contrastive_score(
    guided: &dyn ScoreField,
    model: &dyn ConditionalModel,
    positive: &PromptId,
    negative: &PromptId,
    lambda: &LambdaMode,
    x: &Vector,
    t: f64,
    sched: &NoiseSchedule,
) -> Result<Vector> {
    let mut out = guided.score(x, t)?;
    if let Some(term) = contrastive_term(model, positive, negative, lambda, x, t, sched)? {
        out += term;
    }
    Ok(out)
}

/// `guided + τ (s(∅) − s(y⁻))`.
pub fn negative_score(
    guided: &dyn ScoreField,
    model: &dyn ConditionalModel,
    negative: &PromptId,
    tau: f64,
    x: &Vector,
    t: f64,
) -> Result<Vector> {
    require_unconditional(model)?;
    let mut out = guided.score(x, t)?;
    if tau != 0.0 && !negative.is_empty() {
        let d = model.cond_score(&PromptId::empty(), x, t)? - model.cond_score(negative, x, t)?;
        out += d * tau;
    }
    Ok(out)
}

fn log_sigmoid_gap(a: f64, b: f64) -> Result<f64> {
    // σ(a − b) with both logs possibly very negative.
    if a == f64::NEG_INFINITY && b == f64::NEG_INFINITY || a.is_nan() || b.is_nan() {
        return Err(Error::NonFinite {
            what: "classifier log-densities",
            t: f64::NAN,
            x: vec![a, b],
        });
    }
    let d = a - b;
    Ok(if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    })
}

/// `p⁺ e^{γ ℓ⁺} / (p⁺ e^{γ ℓ⁺} + p⁻ e^{γ ℓ⁻})` for log-densities `ℓ±`, in log space.
pub fn classifier_from_log_densities(
    log_positive: f64,
    log_negative: f64,
    gamma: f64,
    prior_positive: f64,
    prior_negative: f64,
) -> Result<f64> {
    let (a, b) = if gamma == 0.0 {
        (prior_positive.ln(), prior_negative.ln())
    } else {
        (
            prior_positive.ln() + gamma * log_positive,
            prior_negative.ln() + gamma * log_negative,
        )
    };
    log_sigmoid_gap(a, b)
}

/// `γ (1 − c)` computed as `γ σ(b − a)` so it stays accurate when `c → 1`.
pub fn lambda_from_log_densities(
    log_positive: f64,
    log_negative: f64,
    gamma: f64,
    prior_positive: f64,
    prior_negative: f64,
) -> Result<f64> {
    if gamma == 0.0 {
        return Ok(0.0);
    }
    let a = prior_positive.ln() + gamma * log_positive;
    let b = prior_negative.ln() + gamma * log_negative;
    Ok(gamma * log_sigmoid_gap(b, a)?)
}

/// Classifier and contrastive-weight parameters shared by the exact-λ routines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub gamma: f64,
    pub prior_positive: f64,
    pub prior_negative: f64,
}

impl ClassifierParams {
    pub fn new(gamma: f64, prior_positive: f64, prior_negative: f64) -> Self {
        Self {
            gamma,
            prior_positive,
            prior_negative,
        }
    }
}

fn exact_log_densities(
    model: &dyn ConditionalModel,
    positive: &PromptId,
    negative: &PromptId,
    x: &Vector,
    t: f64,
) -> Result<(f64, f64)> {
    let missing = || Error::Config("model has no closed-form density; use the density ODE".into());
    let lp = model.cond_log_density(positive, x, t).ok_or_else(missing)??;
    let ln = model.cond_log_density(negative, x, t).ok_or_else(missing)??;
    Ok((lp, ln))
}

/// Generative classifier `c(x)` at time `t` from exact model densities.
pub fn classifier_prob(
    model: &dyn ConditionalModel,
    positive: &PromptId,
    negative: &PromptId,
    params: ClassifierParams,
    x: &Vector,
    t: f64,
) -> Result<f64> {
    let (lp, ln) = exact_log_densities(model, positive, negative, x, t)?;
    classifier_from_log_densities(lp, ln, params.gamma, params.prior_positive, params.prior_negative)
}

/// `λ_t(x) = γ (1 − c(x))` from exact model densities.
pub fn lambda_exact(
    model: &dyn ConditionalModel,
    positive: &PromptId,
    negative: &PromptId,
    params: ClassifierParams,
    x: &Vector,
    t: f64,
) -> Result<f64> {
    if params.gamma == 0.0 {
        return Ok(0.0);
    }
    let (lp, ln) = exact_log_densities(model, positive, negative, x, t)?;
    lambda_from_log_densities(lp, ln, params.gamma, params.prior_positive, params.prior_negative)
}

/// The weighted contrastive term, or `None` when it vanishes identically.
fn contrastive_term(
    model: &dyn ConditionalModel,
    positive: &PromptId,
    negative: &PromptId,
    lambda: &LambdaMode,
    x: &Vector,
    t: f64,
    sched: &NoiseSchedule,
) -> Result<Option<Vector>> {
    if positive == negative {
        return Ok(None);
    }
    let weight = match lambda {
        LambdaMode::Constant(l) => l.at(t),
        LambdaMode::Exact {
            gamma,
            prior_positive,
            prior_negative,
            ode_steps,
        } => {
            let params = ClassifierParams::new(gamma.at(t), *prior_positive, *prior_negative);
            if params.gamma == 0.0 {
                0.0
            } else if model.cond_log_density(positive, x, t).is_some() {
                lambda_exact(model, positive, negative, params, x, t)?
            } else {
                lambda_via_ode(
                    model,
                    positive,
                    negative,
                    params,
                    x,
                    t,
                    sched,
                    *ode_steps,
                    &Terminal::StandardNormal,
                )?
            }
        }
    };
    if weight == 0.0 {
        return Ok(None);
    }
    Ok(Some(contrastive_difference(model, positive, negative, x, t)? * weight))
}

/// A composed score field `base + Σ terms`, built by [`compose`].
#[derive(Clone)]
pub struct ComposedField {
    spec: GuidanceSpec,
    model: Arc<dyn ConditionalModel>,
    expert: Option<Arc<dyn ScoreField>>,
    sched: NoiseSchedule,
}

impl std::fmt::Debug for ComposedField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ComposedField").field("spec", &self.spec).finish()
    }
}

/// Validate `spec` against the model family and return the composed field.
pub fn compose(
    spec: &GuidanceSpec,
    model: Arc<dyn ConditionalModel>,
    expert: Option<Arc<dyn ScoreField>>,
    sched: NoiseSchedule,
) -> Result<ComposedField> {
    spec.validate(model.as_ref(), expert.is_some())?;
    if let Some(e) = &expert {
        if e.dim() != model.dim() {
            return Err(Error::Shape {
                expected: model.dim(),
                got: e.dim(),
            });
        }
    }
    Ok(ComposedField {
        spec: spec.clone(),
        model,
        expert,
        sched,
    })
}

impl ComposedField {
    pub fn spec(&self) -> &GuidanceSpec {
        &self.spec
    }

    pub fn base_score(&self, x: &Vector, t: f64) -> Result<Vector> {
        let model = self.model.as_ref();
        match &self.spec.base {
            Base::Conditional { prompt } => model.cond_score(prompt, x, t),
            Base::Cfg { prompt, tau } => cfg_score(model, prompt, tau.at(t), x, t),
            Base::Expert => self.expert.as_ref().expect("validated").score(x, t),
        }
    }

    fn term(&self, term: &Term, x: &Vector, t: f64) -> Result<Option<Vector>> {
        let model = self.model.as_ref();
        let empty = PromptId::empty();
        match term {
            Term::Cfg { prompt, tau } => {
                if tau.is_zero_everywhere() || prompt.is_empty() {
                    return Ok(None);
                }
                let tau = tau.at(t);
                Ok((tau != 0.0)
                    .then(|| contrastive_difference(model, prompt, &empty, x, t).map(|d| d * tau))
                    .transpose()?)
            }
            Term::Negative { prompt, tau } => {
                if tau.is_zero_everywhere() || prompt.is_empty() {
                    return Ok(None);
                }
                let tau = tau.at(t);
                Ok((tau != 0.0)
                    .then(|| contrastive_difference(model, &empty, prompt, x, t).map(|d| d * tau))
                    .transpose()?)
            }
            Term::Contrastive {
                positive,
                negative,
                lambda,
            } => contrastive_term(model, positive, negative, lambda, x, t, &self.sched),
        }
    }
}

impl ScoreField for ComposedField {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn score(&self, x: &Vector, t: f64) -> Result<Vector> {
        let mut out = self.base_score(x, t)?;
        for term in &self.spec.terms {
            if let Some(v) = self.term(term, x, t)? {
                out += v;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{presets, AnalyticModel, GaussianMixture, World};
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_vec(xs.to_vec())
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    fn two_prompt() -> Arc<AnalyticModel> {
        Arc::new(AnalyticModel::new(presets::two_prompt(), sched()))
    }

    // y ~ N(μ, I) alone, so ∅ = N(μ, I) too; plus a zero-mean prompt for the ∅ = N(0, I) case.
    fn single_gaussian(mu: &[f64]) -> Arc<AnalyticModel> {
        let world = World::builder(mu.len())
            .prompt("y", 1.0, GaussianMixture::unit(v(mu)))
            .build()
            .unwrap();
        Arc::new(AnalyticModel::new(world, sched()))
    }

    fn positive_and_origin() -> Arc<AnalyticModel> {
        // ∅ must be N(0, I): register the origin prompt with all the prior mass.
        let world = World::builder(2)
            .prompt("plus", 0.0, GaussianMixture::unit(v(&[1.0, 0.0])))
            .prompt("origin", 1.0, GaussianMixture::unit(v(&[0.0, 0.0])))
            .build()
            .unwrap();
        Arc::new(AnalyticModel::new(world, sched()))
    }

    #[test]
    fn piecewise_schedule_lookup() {
        let s = TimeSchedule::Piecewise {
            knots: vec![0.3, 0.7],
            values: vec![1.0, 2.0, 3.0],
        };
        assert_eq!(s.at(0.1), 1.0);
        assert_eq!(s.at(0.3), 2.0);
        assert_eq!(s.at(0.9), 3.0);
        assert!(s.validate("s").is_ok());
        let bad = TimeSchedule::Piecewise {
            knots: vec![0.3],
            values: vec![1.0],
        };
        assert!(bad.validate("s").is_err());
        let parsed: TimeSchedule = serde_json::from_str("2.5").unwrap();
        assert_eq!(parsed, TimeSchedule::Constant(2.5));
    }

    #[test]
    fn cfg_reductions() {
        let m = two_prompt();
        let x = v(&[0.3, -0.4]);
        let y: PromptId = "photo".into();
        assert_eq!(
            cfg_score(m.as_ref(), &y, 1.0, &x, 0.4).unwrap(),
            m.cond_score(&y, &x, 0.4).unwrap()
        );
        let e = PromptId::empty();
        assert_eq!(
            cfg_score(m.as_ref(), &e, 5.0, &x, 0.4).unwrap(),
            m.cond_score(&e, &x, 0.4).unwrap()
        );
    }

    #[test]
    fn cfg_matches_hand_algebra() {
        // y ~ N(μ, I), ∅ ~ N(0, I): cfg = −τ(x − αμ) + (τ − 1)x = −x + ταμ.
        let m = positive_and_origin();
        let (a, _) = sched().alpha_sigma(0.5).unwrap();
        let x = v(&[0.7, -1.1]);
        let got = cfg_score(m.as_ref(), &"plus".into(), 3.0, &x, 0.5).unwrap();
        let expected = -&x + v(&[3.0 * a, 0.0]);
        assert!((got - expected).norm() < 1e-14);
    }

    #[test]
    fn contrastive_reductions_and_closed_form() {
        let m = positive_and_origin();
        let base = crate::score::PromptScore::new(m.clone(), "origin".into()).unwrap();
        let x = v(&[0.2, 1.5]);
        let (p, n) = (PromptId::from("plus"), PromptId::from("origin"));
        let b = base.score(&x, 0.5).unwrap();
        let zero = contrastive_score(&base, m.as_ref(), &p, &n, &0.0.into(), &x, 0.5, &sched()).unwrap();
        assert_eq!(zero, b);
        let same = contrastive_score(&base, m.as_ref(), &p, &p, &4.0.into(), &x, 0.5, &sched()).unwrap();
        assert_eq!(same, b);
        let (a, _) = sched().alpha_sigma(0.5).unwrap();
        let got = contrastive_score(&base, m.as_ref(), &p, &n, &3.0.into(), &x, 0.5, &sched()).unwrap();
        let term = got - b;
        assert!((term[0] - 3.0 * a).abs() < 1e-14);
        assert_eq!(term[1], 0.0);
    }

    #[test]
    fn negative_guidance_examples() {
        let m = two_prompt();
        let y: PromptId = "photo".into();
        let base = crate::score::PromptScore::new(m.clone(), y.clone()).unwrap();
        let x = v(&[1.0, 1.0]);
        let b = base.score(&x, 0.5).unwrap();
        assert_eq!(
            negative_score(&base, m.as_ref(), &"photo+winter".into(), 0.0, &x, 0.5).unwrap(),
            b
        );
        assert_eq!(
            negative_score(&base, m.as_ref(), &PromptId::empty(), 2.0, &x, 0.5).unwrap(),
            b
        );

        // Single-Gaussian world: ∅ = y, so the negative term vanishes algebraically.
        let single = single_gaussian(&[1.0, -1.0]);
        let base = crate::score::PromptScore::new(single.clone(), "y".into()).unwrap();
        let got = negative_score(&base, single.as_ref(), &"y".into(), 2.0, &x, 0.5).unwrap();
        let (a, _) = sched().alpha_sigma(0.5).unwrap();
        let expected = -(&x - v(&[a, -a]));
        assert!((got - expected).norm() < 1e-14);

        // Two-prompt world by hand: s(∅) − s(photo) with the ∅ posterior over ±1.
        let (a, _) = sched().alpha_sigma(0.5).unwrap();
        let r_plus = 1.0 / (1.0 + (-2.0 * a * x[0]).exp());
        let s_empty = -&x + v(&[a * (2.0 * r_plus - 1.0), 0.0]);
        let s_photo = -(&x - v(&[-a, 0.0]));
        let base = crate::score::PromptScore::new(m.clone(), y).unwrap();
        let got = negative_score(&base, m.as_ref(), &"photo".into(), 2.0, &x, 0.5).unwrap();
        let expected = &s_photo + (s_empty - &s_photo) * 2.0;
        assert!((got - expected).norm() < 1e-12);
    }

    #[test]
    fn classifier_examples() {
        let world = presets::symmetric_1d();
        let m = AnalyticModel::new(world, sched());
        let (p, n) = (PromptId::from("right"), PromptId::from("left"));
        let c0 = classifier_prob(&m, &p, &n, ClassifierParams::new(0.0, 0.3, 0.7), &v(&[1.3]), 0.2).unwrap();
        assert!((c0 - 0.3).abs() < 1e-15);
        let c_axis = classifier_prob(&m, &p, &n, ClassifierParams::new(2.0, 0.5, 0.5), &v(&[0.0]), 0.6).unwrap();
        assert_eq!(c_axis, 0.5);
        let c = classifier_prob(&m, &p, &n, ClassifierParams::new(1.0, 0.5, 0.5), &v(&[2.0]), 0.0).unwrap();
        assert!((c - 1.0 / (1.0 + (-8.0f64).exp())).abs() < 1e-15);

        let l0 = lambda_exact(&m, &p, &n, ClassifierParams::new(0.0, 0.5, 0.5), &v(&[0.4]), 0.3).unwrap();
        assert_eq!(l0, 0.0);
        let l_half = lambda_exact(&m, &p, &n, ClassifierParams::new(3.0, 0.5, 0.5), &v(&[0.0]), 0.3).unwrap();
        assert_eq!(l_half, 1.5);
        assert!(classifier_from_log_densities(f64::NEG_INFINITY, f64::NEG_INFINITY, 1.0, 0.5, 0.5).is_err());
    }

    #[test]
    fn composition_identities() {
        let m: Arc<dyn ConditionalModel> = two_prompt();
        let y: PromptId = "photo+winter".into();
        let x = v(&[-0.3, 0.8]);
        let t = 0.35;
        let plain = compose(&GuidanceSpec::conditional(y.clone()), m.clone(), None, sched()).unwrap();
        assert_eq!(plain.score(&x, t).unwrap(), m.cond_score(&y, &x, t).unwrap());

        for lambda in [0.5, 2.0, 6.5] {
            let contrastive =
                GuidanceSpec::conditional(y.clone()).with_contrastive(y.clone(), PromptId::empty(), lambda);
            let lhs = compose(&contrastive, m.clone(), None, sched())
                .unwrap()
                .score(&x, t)
                .unwrap();
            let rhs = cfg_score(m.as_ref(), &y, 1.0 + lambda, &x, t).unwrap();
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn expert_plus_contrastive_matches_hand_sum() {
        let world = presets::two_factor();
        let m: Arc<dyn ConditionalModel> = Arc::new(AnalyticModel::new(world, sched()));
        let expert: Arc<dyn ScoreField> =
            Arc::new(crate::score::PromptScore::new(m.clone(), "cat+portrait".into()).unwrap());
        let spec = GuidanceSpec::expert().with_contrastive("cat+eyeglasses", "cat", 2.0);
        let f = compose(&spec, m.clone(), Some(expert.clone()), sched()).unwrap();
        let x = v(&[-1.0, 0.5]);
        let t = 0.6;
        let hand = expert.score(&x, t).unwrap()
            + (m.cond_score(&"cat+eyeglasses".into(), &x, t).unwrap() - m.cond_score(&"cat".into(), &x, t).unwrap())
                * 2.0;
        assert!((f.score(&x, t).unwrap() - hand).norm() < 1e-14);
        assert!(compose(&spec, m.clone(), None, sched()).is_err());
        let bad = GuidanceSpec::conditional("zebra");
        assert!(matches!(compose(&bad, m, None, sched()), Err(Error::UnknownPrompt(_))));
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = GuidanceSpec::cfg("photo", 7.5)
            .with_contrastive("photo+winter", "photo", 3.0)
            .with_term(Term::Contrastive {
                positive: "photo+winter".into(),
                negative: "photo".into(),
                lambda: LambdaMode::Exact {
                    gamma: 1.0.into(),
                    prior_positive: 0.5,
                    prior_negative: 0.5,
                    ode_steps: 64,
                },
            })
            .with_term(Term::Negative {
                prompt: "photo".into(),
                tau: TimeSchedule::Piecewise {
                    knots: vec![0.5],
                    values: vec![0.0, 1.0],
                },
            });
        let json = serde_json::to_string(&spec).unwrap();
        let back: GuidanceSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }

    fn term_strategy() -> impl Strategy<Value = Term> {
        let prompts = prop::sample::select(vec!["photo", "photo+winter", ""]);
        prop_oneof![
            (prompts.clone(), -3.0f64..3.0).prop_map(|(p, tau)| Term::Cfg {
                prompt: p.into(),
                tau: tau.into()
            }),
            (prompts.clone(), prompts.clone(), -5.0f64..5.0).prop_map(|(a, b, l)| Term::Contrastive {
                positive: a.into(),
                negative: b.into(),
                lambda: l.into()
            }),
            (prompts, -3.0f64..3.0).prop_map(|(p, tau)| Term::Negative {
                prompt: p.into(),
                tau: tau.into()
            }),
        ]
    }

    proptest! {
        #[test]
        fn composition_is_linear_in_terms(
            a in prop::collection::vec(term_strategy(), 0..3),
            b in prop::collection::vec(term_strategy(), 0..3),
            x in prop::collection::vec(-3.0f64..3.0, 2),
            t in 0.01f64..1.0,
        ) {
            let m: Arc<dyn ConditionalModel> = two_prompt();
            let x = Vector::from_vec(x);
            let base = GuidanceSpec::cfg("photo", 2.0);
            let mk = |terms: Vec<Term>| {
                let spec = GuidanceSpec { base: base.base.clone(), terms };
                compose(&spec, m.clone(), None, sched()).unwrap().score(&x, t).unwrap()
            };
            let joined = mk(a.iter().chain(&b).cloned().collect());
            let split = mk(a.clone()) + mk(b.clone()) - mk(vec![]);
            prop_assert!((joined - split).amax() < 1e-12);
        }

        #[test]
        fn swapping_prompts_negates_contrastive_term(
            x in prop::collection::vec(-3.0f64..3.0, 2),
            t in 0.01f64..1.0,
            lambda in -8.0f64..8.0,
        ) {
            let m = two_prompt();
            let x = Vector::from_vec(x);
            let (p, n) = (PromptId::from("photo+winter"), PromptId::from("photo"));
            let fwd = contrastive_term(m.as_ref(), &p, &n, &lambda.into(), &x, t, &sched()).unwrap();
            let rev = contrastive_term(m.as_ref(), &n, &p, &lambda.into(), &x, t, &sched()).unwrap();
            match (fwd, rev) {
                (Some(f), Some(r)) => prop_assert_eq!(f, -r),
                (None, None) => prop_assert_eq!(lambda, 0.0),
                _ => prop_assert!(false),
            }
        }

        #[test]
        fn shared_factor_coordinates_are_untouched(
            x in prop::collection::vec(-5.0f64..5.0, 2),
            t in 0.0f64..1.0,
            lambda in -8.0f64..8.0,
        ) {
            let m = AnalyticModel::new(presets::two_factor(), sched());
            let x = Vector::from_vec(x);
            for (p, n) in [("cat+eyeglasses", "cat"), ("dog+eyeglasses", "dog")] {
                let term = contrastive_term(&m, &p.into(), &n.into(), &lambda.into(), &x, t, &sched())
                    .unwrap()
                    .unwrap_or_else(|| Vector::zeros(2));
                prop_assert_eq!(term[1], 0.0);
            }
        }

        #[test]
        fn shared_factor_nullity_on_product_mixtures(
            x in prop::collection::vec(-4.0f64..4.0, 2),
            t in 0.0f64..1.0,
        ) {
            // Concept factor differs, style factor is a shared bimodal mixture.
            let style = GaussianMixture::isotropic(&[(0.3, v(&[-2.0])), (0.7, v(&[1.5]))], 0.6).unwrap();
            let world = World::builder(2)
                .prompt("a", 0.5, GaussianMixture::product(&GaussianMixture::unit(v(&[-1.0])), &style))
                .prompt(
                    "a+b",
                    0.5,
                    GaussianMixture::product(
                        &GaussianMixture::isotropic(&[(0.5, v(&[1.0])), (0.5, v(&[2.5]))], 0.4).unwrap(),
                        &style,
                    ),
                )
                .build()
                .unwrap();
            let m = AnalyticModel::new(world, sched());
            let d = contrastive_difference(&m, &"a+b".into(), &"a".into(), &Vector::from_vec(x), t).unwrap();
            prop_assert!(d[1].abs() < 1e-12);
        }
    }
}
