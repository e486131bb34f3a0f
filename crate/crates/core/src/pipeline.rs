//! Guiding a domain expert with a generalist: four arms on shared noise.
//!
//! The arms are expert-only, expert + CFG on `y⁺`, expert + negative guidance on
//! `y⁻`, and expert + contrastive guidance `λ (s(y⁺) − s(y⁻))`. Each arm is scored
//! by domain fit (energy distance to domain samples) and by concept score
//! (mean `log p₀(x | y⁺) − log p₀(x | y⁻)` under the analytic world).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::analysis::{contrastive_likelihood_score, energy_distance, quantile_sorted, MetricReport};
use crate::error::{Error, Result};
use crate::guidance::{compose, GuidanceSpec, Term};
use crate::learned::{finetune_expert, score_rms, train_dsm, LearnedScoreModel};
use crate::sampler::{derive_seed, rng_from_seed, sample_endpoints, Sampler};
use crate::schedule::{NoiseSchedule, TimeGrid};
use crate::score::{ConditionalModel, PromptScore, ScoreField};
use crate::world::{AnalyticModel, PromptId, World};
use crate::Vector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    ExpertOnly,
    CfgPositive,
    Negative,
    Contrastive,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::ExpertOnly, Arm::CfgPositive, Arm::Negative, Arm::Contrastive];

    pub fn name(self) -> &'static str {
        match self {
            Arm::ExpertOnly => "expert_only",
            Arm::CfgPositive => "expert_cfg_positive",
            Arm::Negative => "expert_negative",
            Arm::Contrastive => "expert_contrastive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    pub domain: PromptId,
    pub positive: PromptId,
    pub negative: PromptId,
    pub lambda: f64,
    /// Strength of the CFG-positive and negative baselines.
    pub tau: f64,
    pub n: usize,
    pub steps: usize,
    pub sampler: Sampler,
    pub seed: u64,
    /// Generalist and expert training budgets (Adam steps) for the learned variant.
    pub generalist_budget: usize,
    pub expert_budget: usize,
    /// Independent domain-vs-domain draws used to calibrate the energy-distance null.
    pub null_draws: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            domain: "cat+portrait".into(),
            positive: "cat+eyeglasses".into(),
            negative: "cat".into(),
            lambda: 2.0,
            tau: 2.0,
            n: 2000,
            steps: 200,
            sampler: Sampler::EmSde,
            seed: 0,
            generalist_budget: 4000,
            expert_budget: 2000,
            null_draws: 19,
        }
    }
}

impl ExpertConfig {
    pub fn spec(&self, arm: Arm) -> GuidanceSpec {
        let spec = GuidanceSpec::expert();
        match arm {
            Arm::ExpertOnly => spec,
            Arm::CfgPositive => spec.with_term(Term::Cfg {
                prompt: self.positive.clone(),
                tau: self.tau.into(),
            }),
            Arm::Negative => spec.with_term(Term::Negative {
                prompt: self.negative.clone(),
                tau: self.tau.into(),
            }),
            Arm::Contrastive => spec.with_contrastive(self.positive.clone(), self.negative.clone(), self.lambda),
        }
    }

    fn validate(&self, world: &World) -> Result<()> {
        for p in [&self.domain, &self.positive, &self.negative] {
            if !world.contains(p) {
                return Err(Error::UnknownPrompt(p.to_string()));
            }
        }
        if self.n < 2 || self.steps == 0 || !self.lambda.is_finite() || !self.tau.is_finite() {
            return Err(Error::Config(
                "expert run needs n >= 2, steps > 0 and finite λ, τ".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: Arm,
    /// Energy distance to domain samples on the off-concept coordinates.
    pub domain_fit: f64,
    /// Energy distance to domain samples on all coordinates.
    pub domain_fit_full: f64,
    pub concept_score: MetricReport,
    pub mean: Vec<f64>,
    #[serde(skip)]
    pub samples: Vec<Vector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub generalist_rms: Vec<(String, f64)>,
    pub expert_rms: f64,
    /// Expert error on a non-domain prompt's score (specialization, recorded only).
    pub expert_off_domain_rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertReport {
    pub config: ExpertConfig,
    pub learned: bool,
    pub off_concept: Vec<usize>,
    /// 95th percentile of domain-vs-domain energy distances at the same `n`.
    pub null_threshold: f64,
    pub arms: Vec<ArmReport>,
    pub training: Option<TrainingReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Orderings {
    pub concept_best: bool,
    pub domain_best_guided: bool,
    pub domain_matches_expert: bool,
}

impl Orderings {
    pub fn all(&self) -> bool {
        self.concept_best && self.domain_best_guided && self.domain_matches_expert
    }
}

impl ExpertReport {
    pub fn arm(&self, arm: Arm) -> &ArmReport {
        self.arms.iter().find(|a| a.arm == arm).expect("every arm is reported")
    }

    /// Contrastive has the strictly highest concept score, strictly lower domain
    /// distance than both guided baselines, and domain distance within the null
    /// band of the unguided expert.
    pub fn orderings(&self) -> Orderings {
        let c = self.arm(Arm::Contrastive);
        let others = [Arm::ExpertOnly, Arm::CfgPositive, Arm::Negative].map(|a| self.arm(a));
        Orderings {
            concept_best: others.iter().all(|o| c.concept_score.value > o.concept_score.value),
            domain_best_guided: [Arm::CfgPositive, Arm::Negative]
                .iter()
                .all(|&a| c.domain_fit < self.arm(a).domain_fit),
            domain_matches_expert: c.domain_fit <= self.arm(Arm::ExpertOnly).domain_fit + self.null_threshold,
        }
    }
}

/// Coordinates on which the `y⁺` and `y⁻` means agree (all coordinates if none do).
pub fn off_concept_coordinates(world: &World, positive: &PromptId, negative: &PromptId) -> Result<Vec<usize>> {
    let (mp, mn) = (world.mixture(positive)?.mean(), world.mixture(negative)?.mean());
    let off: Vec<usize> = (0..world.dim()).filter(|&k| (mp[k] - mn[k]).abs() <= 1e-12).collect();
    Ok(if off.is_empty() {
        (0..world.dim()).collect()
    } else {
        off
    })
}

fn project(samples: &[Vector], coords: &[usize]) -> Vec<Vector> {
    samples
        .iter()
        .map(|x| Vector::from_iterator(coords.len(), coords.iter().map(|&k| x[k])))
        .collect()
}

fn domain_samples(world: &World, domain: &PromptId, n: usize, seed: u64) -> Result<Vec<Vector>> {
    let mix = world.mixture(domain)?;
    let mut rng = rng_from_seed(seed);
    Ok((0..n).map(|_| mix.sample(&mut rng)).collect())
}

/// Sample the four arms and score them. `generalist` and `expert` may be analytic or learned.
pub fn evaluate_arms(
    world: &World,
    config: &ExpertConfig,
    generalist: Arc<dyn ConditionalModel>,
    expert: Arc<dyn ScoreField>,
    sched: &NoiseSchedule,
) -> Result<(Vec<ArmReport>, f64, Vec<usize>)> {
    config.validate(world)?;
    let grid = TimeGrid::generation(config.steps)?;
    let off = off_concept_coordinates(world, &config.positive, &config.negative)?;
    let reference = domain_samples(world, &config.domain, config.n, derive_seed(config.seed, 1))?;
    let ref_off = project(&reference, &off);
    let analytic = AnalyticModel::new(world.clone(), *sched);

    let mut null: Vec<f64> = (0..config.null_draws.max(1))
        .map(|i| {
            let other = domain_samples(
                world,
                &config.domain,
                config.n,
                derive_seed(config.seed, 100 + i as u64),
            )?;
            energy_distance(&ref_off, &project(&other, &off))
        })
        .collect::<Result<_>>()?;
    null.sort_by(f64::total_cmp);
    let null_threshold = quantile_sorted(&null, 0.95);

    let run_seed = derive_seed(config.seed, 2);
    let arms = Arm::ALL
        .iter()
        .map(|&arm| {
            let field = compose(&config.spec(arm), generalist.clone(), Some(expert.clone()), *sched)?;
            let samples = sample_endpoints(&field, &grid, sched, config.sampler, config.n, run_seed)?;
            let scores = samples
                .iter()
                .map(|x| contrastive_likelihood_score(&analytic, x, &config.positive, &config.negative))
                .collect::<Result<Vec<f64>>>()?;
            Ok(ArmReport {
                arm,
                domain_fit: energy_distance(&project(&samples, &off), &ref_off)?,
                domain_fit_full: energy_distance(&samples, &reference)?,
                concept_score: MetricReport::mean_with_bootstrap(
                    format!("{}_concept_score", arm.name()),
                    &scores,
                    derive_seed(config.seed, 3),
                ),
                mean: crate::analysis::sample_mean(&samples).iter().copied().collect(),
                samples,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((arms, null_threshold, off))
}

/// Analytic scores stand in for both the generalist and the expert (no training).
pub fn run_expert_guidance_analytic(
    world: &World,
    config: &ExpertConfig,
    sched: &NoiseSchedule,
) -> Result<ExpertReport> {
    config.validate(world)?;
    let model = Arc::new(AnalyticModel::new(world.clone(), *sched));
    let expert: Arc<dyn ScoreField> = Arc::new(PromptScore::new(model.clone(), config.domain.clone())?);
    let (arms, null_threshold, off_concept) = evaluate_arms(world, config, model, expert, sched)?;
    Ok(ExpertReport {
        config: config.clone(),
        learned: false,
        off_concept,
        null_threshold,
        arms,
        training: None,
    })
}

/// Prompts the generalist is trained on: every positive-prior prompt plus ∅.
pub fn generalist_prompts(world: &World) -> Vec<PromptId> {
    world
        .prompts()
        .filter(|(_, e)| e.prior > 0.0)
        .map(|(p, _)| p.clone())
        .chain(std::iter::once(PromptId::empty()))
        .collect()
}

pub struct TrainedPair {
    pub generalist: LearnedScoreModel,
    pub expert: LearnedScoreModel,
    pub report: TrainingReport,
}

const RMS_SAMPLES: usize = 2000;

/// Train the generalist, fine-tune a copy into the domain expert and measure both
/// against the analytic scores.
pub fn train_pair(world: &World, config: &ExpertConfig, sched: &NoiseSchedule) -> Result<TrainedPair> {
    config.validate(world)?;
    let prompts = generalist_prompts(world);
    let generalist = train_dsm(
        world,
        &prompts,
        sched,
        config.generalist_budget,
        derive_seed(config.seed, 10),
    )?;
    let expert = finetune_expert(
        &generalist,
        world,
        &config.domain,
        sched,
        config.expert_budget,
        derive_seed(config.seed, 11),
    )?;
    let analytic = AnalyticModel::new(world.clone(), *sched);
    let rms_seed = derive_seed(config.seed, 12);
    let generalist_rms = prompts
        .iter()
        .map(|p| {
            let reference = PromptScore::new(&analytic, p.clone())?;
            let rms = generalist.score_rms(p, &reference, world.mixture(p)?, sched, RMS_SAMPLES, rms_seed)?;
            Ok((p.to_string(), rms))
        })
        .collect::<Result<Vec<_>>>()?;
    let expert_field = PromptScore::new(&expert, PromptId::empty())?;
    let domain_ref = PromptScore::new(&analytic, config.domain.clone())?;
    let expert_rms = score_rms(
        &expert_field,
        &domain_ref,
        world.mixture(&config.domain)?,
        sched,
        RMS_SAMPLES,
        rms_seed,
    )?;
    let off_ref = PromptScore::new(&analytic, config.positive.clone())?;
    let expert_off_domain_rms = score_rms(
        &expert_field,
        &off_ref,
        world.mixture(&config.positive)?,
        sched,
        RMS_SAMPLES,
        rms_seed,
    )?;
    Ok(TrainedPair {
        generalist,
        expert,
        report: TrainingReport {
            generalist_rms,
            expert_rms,
            expert_off_domain_rms,
        },
    })
}

/// Full learned run: train, then evaluate the four arms with the networks.
pub fn run_expert_guidance(world: &World, config: &ExpertConfig, sched: &NoiseSchedule) -> Result<ExpertReport> {
    let pair = train_pair(world, config, sched)?;
    let expert: Arc<dyn ScoreField> = Arc::new(PromptScore::new(Arc::new(pair.expert), PromptId::empty())?);
    let (arms, null_threshold, off_concept) = evaluate_arms(world, config, Arc::new(pair.generalist), expert, sched)?;
    Ok(ExpertReport {
        config: config.clone(),
        learned: true,
        off_concept,
        null_threshold,
        arms,
        training: Some(pair.report),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::presets;

    fn small() -> ExpertConfig {
        ExpertConfig {
            n: 400,
            steps: 100,
            null_draws: 9,
            ..ExpertConfig::default()
        }
    }

    #[test]
    fn zero_lambda_arm_equals_expert_only() {
        let sched = NoiseSchedule::default();
        let config = ExpertConfig { lambda: 0.0, ..small() };
        let report = run_expert_guidance_analytic(&presets::two_factor(), &config, &sched).unwrap();
        assert_eq!(
            report.arm(Arm::ExpertOnly).samples,
            report.arm(Arm::Contrastive).samples
        );
    }

    #[test]
    fn off_concept_coordinates_of_two_factor_world() {
        let off = off_concept_coordinates(&presets::two_factor(), &"cat+eyeglasses".into(), &"cat".into()).unwrap();
        assert_eq!(off, vec![1]);
    }

    #[test]
    fn analytic_orderings_hold() {
        let sched = NoiseSchedule::default();
        let report = run_expert_guidance_analytic(&presets::two_factor(), &small(), &sched).unwrap();
        let o = report.orderings();
        assert!(
            o.all(),
            "{o:?}: {:#?}",
            report
                .arms
                .iter()
                .map(|a| (a.arm, a.domain_fit, a.concept_score.value))
                .collect::<Vec<_>>()
        );
        assert!(report.arm(Arm::Negative).concept_score.value <= report.arm(Arm::Contrastive).concept_score.value);
    }

    #[test]
    fn unknown_domain_is_rejected() {
        let sched = NoiseSchedule::default();
        let config = ExpertConfig {
            domain: "horse".into(),
            ..small()
        };
        assert!(matches!(
            run_expert_guidance_analytic(&presets::two_factor(), &config, &sched),
            Err(Error::UnknownPrompt(_))
        ));
    }
}
