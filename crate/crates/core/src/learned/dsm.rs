//! Denoising score matching for a prompt-conditioned MLP score network.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::sampler::{rng_from_seed, standard_normal};
use crate::schedule::NoiseSchedule;
use crate::score::{ConditionalModel, ScoreField};
use crate::world::{GaussianMixture, PromptId, World};
use crate::Vector;

use super::nn::{Adam, Mlp};

pub const HIDDEN_WIDTH: usize = 64;
pub const HIDDEN_LAYERS: usize = 3;
/// Sinusoidal time features (half sine, half cosine).
pub const TIME_FEATURES: usize = 16;
pub const TOKEN_FEATURES: usize = 16;
/// Lower end of the training time range.
pub const T_MIN_TRAIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` (cosine decay).
    pub lr_floor: f64,
    pub ema_decay: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 256,
            lr: 2e-3,
            lr_floor: 0.02,
            ema_decay: 0.995,
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub steps: usize,
    pub seeds: Vec<u64>,
    pub loss_curve: Vec<LossPoint>,
}

/// MLP score model `s_θ(x, t, y) = −x + f_θ(x, emb(t), Σ emb(token))`.
///
/// The `−x` skip makes the untrained network the standard-normal score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnedScoreModel {
    pub dim: usize,
    pub vocab: Vec<String>,
    /// Prompts the model was trained on; only these are answered.
    pub prompts: Vec<PromptId>,
    pub net: Mlp,
    /// Token table (`vocab.len() × TOKEN_FEATURES`, row-major) followed by the network.
    pub params: Vec<f64>,
    pub meta: TrainingMeta,
}

pub fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    let mut out = [0.0; TIME_FEATURES];
    for k in 0..TIME_FEATURES / 2 {
        let w = (1u32 << k) as f64;
        out[2 * k] = (w * t).sin();
        out[2 * k + 1] = (w * t).cos();
    }
    out
}

impl LearnedScoreModel {
    /// Fresh network over the vocabulary of `world`.
    pub fn init(world: &World, prompts: &[PromptId], seed: u64) -> Result<Self> {
        for p in prompts {
            if !world.contains(p) {
                return Err(Error::UnknownPrompt(p.to_string()));
            }
        }
        let vocab: Vec<String> = world
            .prompts()
            .flat_map(|(p, _)| p.tokens().to_vec())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let d = world.dim();
        let mut sizes = vec![d + TIME_FEATURES + TOKEN_FEATURES];
        sizes.extend([HIDDEN_WIDTH; HIDDEN_LAYERS]);
        sizes.push(d);
        let net = Mlp::new(sizes);
        let mut rng = rng_from_seed(seed);
        let mut params: Vec<f64> = (0..vocab.len() * TOKEN_FEATURES)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        params.extend(net.init(&mut rng, 0.1));
        Ok(Self {
            dim: d,
            vocab,
            prompts: prompts.to_vec(),
            net,
            params,
            meta: TrainingMeta {
                seeds: vec![seed],
                ..TrainingMeta::default()
            },
        })
    }

    fn table_len(&self) -> usize {
        self.vocab.len() * TOKEN_FEATURES
    }

    fn token_rows(&self, prompt: &PromptId) -> Result<Vec<usize>> {
        prompt
            .tokens()
            .iter()
            .map(|tok| {
                self.vocab
                    .binary_search(tok)
                    .map_err(|_| Error::UnknownPrompt(prompt.to_string()))
            })
            .collect()
    }

    fn write_features(&self, x: &Vector, t: f64, rows: &[usize], out: &mut [f64]) {
        let d = self.dim;
        out[..d].copy_from_slice(x.as_slice());
        out[d..d + TIME_FEATURES].copy_from_slice(&time_features(t));
        let emb = &mut out[d + TIME_FEATURES..];
        emb.fill(0.0);
        for &r in rows {
            for (e, w) in emb
                .iter_mut()
                .zip(&self.params[r * TOKEN_FEATURES..(r + 1) * TOKEN_FEATURES])
            {
                *e += w;
            }
        }
    }

    fn raw_score(&self, rows: &[usize], x: &Vector, t: f64) -> Vector {
        let mut feats = DVector::zeros(self.net.sizes[0]);
        self.write_features(x, t, rows, feats.as_mut_slice());
        self.net.eval(&self.params[self.table_len()..], &feats) - x
    }

    /// One DSM step on a batch; returns the batch loss and accumulates the gradient.
    fn batch_grad(&self, batch: &[Example], grad: &mut [f64]) -> f64 {
        let (d, b) = (self.dim, batch.len());
        let width = self.net.sizes[0];
        let mut feats = DMatrix::zeros(width, b);
        for (c, ex) in batch.iter().enumerate() {
            self.write_features(&ex.x, ex.t, &ex.rows, feats.column_mut(c).as_mut_slice());
        }
        let table = self.table_len();
        let (out, cache) = self.net.forward(&self.params[table..], feats);
        let mut d_out = DMatrix::zeros(d, b);
        let mut loss = 0.0;
        for (c, ex) in batch.iter().enumerate() {
            for k in 0..d {
                let residual = ex.sigma * (out[(k, c)] - ex.x[k]) + ex.z[k];
                loss += residual * residual;
                d_out[(k, c)] = 2.0 * ex.sigma * residual / b as f64;
            }
        }
        let (g_table, g_net) = grad.split_at_mut(table);
        let d_in = self.net.backward(&self.params[table..], &cache, d_out, g_net);
        for (c, ex) in batch.iter().enumerate() {
            for &r in &ex.rows {
                for j in 0..TOKEN_FEATURES {
                    g_table[r * TOKEN_FEATURES + j] += d_in[(d + TIME_FEATURES + j, c)];
                }
            }
        }
        loss / b as f64
    }

    /// RMS of `s_θ(·, ·, prompt) − s(·, ·)` over `x ~ p_t`, `t ~ U[0.1, 0.9]`.
    pub fn score_rms(
        &self,
        prompt: &PromptId,
        reference: &dyn ScoreField,
        data: &GaussianMixture,
        sched: &NoiseSchedule,
        n: usize,
        seed: u64,
    ) -> Result<f64> {
        let field = crate::score::PromptScore::new(self, prompt.clone())?;
        score_rms(&field, reference, data, sched, n, seed)
    }
}

/// RMS (Euclidean norm) of `field − reference` over `x ~ p_t`, `t ~ U[0.1, 0.9]`,
/// where `p_0 = data`.
pub fn score_rms(
    field: &dyn ScoreField,
    reference: &dyn ScoreField,
    data: &GaussianMixture,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<f64> {
    check_dim(field.dim(), reference.dim())?;
    let mut rng = rng_from_seed(seed);
    let mut total = 0.0;
    for _ in 0..n {
        let t = rng.random_range(0.1..0.9);
        let (a, s) = sched.alpha_sigma(t)?;
        let x = data.sample(&mut rng) * a + standard_normal(data.dim(), &mut rng) * s;
        total += (field.score(&x, t)? - reference.score(&x, t)?).norm_squared();
    }
    Ok((total / n as f64).sqrt())
}

impl ConditionalModel for LearnedScoreModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn has_prompt(&self, prompt: &PromptId) -> bool {
        self.prompts.contains(prompt)
    }

    fn cond_score(&self, prompt: &PromptId, x: &Vector, t: f64) -> Result<Vector> {
        if !self.has_prompt(prompt) {
            return Err(Error::UnknownPrompt(prompt.to_string()));
        }
        check_dim(self.dim, x.len())?;
        let s = self.raw_score(&self.token_rows(prompt)?, x, t);
        if s.iter().all(|v| v.is_finite()) {
            Ok(s)
        } else {
            Err(Error::non_finite("learned score", t, x))
        }
    }
}

struct Example {
    x: Vector,
    z: Vector,
    t: f64,
    sigma: f64,
    rows: Vec<usize>,
}

/// Training source: which data each prompt input is paired with.
struct Source<'a> {
    input: Vec<usize>,
    data: &'a GaussianMixture,
}

fn draw_batch(sources: &[Source], sched: &NoiseSchedule, batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Example>> {
    (0..batch)
        .map(|_| {
            let src = &sources[rng.random_range(0..sources.len())];
            let t = rng.random_range(T_MIN_TRAIN..1.0);
            let (a, s) = sched.alpha_sigma(t)?;
            let x0 = src.data.sample(rng);
            let z = standard_normal(x0.len(), rng);
            Ok(Example {
                x: x0 * a + &z * s,
                z,
                t,
                sigma: s,
                rows: src.input.clone(),
            })
        })
        .collect()
}

fn run_training(
    model: &mut LearnedScoreModel,
    sources: &[Source],
    sched: &NoiseSchedule,
    budget: usize,
    seed: u64,
    config: &TrainConfig,
) -> Result<()> {
    if budget == 0 {
        return Ok(());
    }
    if config.batch == 0 || !(config.lr > 0.0) || !(0.0..1.0).contains(&config.ema_decay) {
        return Err(Error::Config(
            "training needs batch > 0, lr > 0 and ema_decay in [0, 1)".into(),
        ));
    }
    let mut rng = rng_from_seed(seed);
    let mut adam = Adam::new(model.params.len());
    let mut ema = model.params.clone();
    let mut grad = vec![0.0; model.params.len()];
    let mut running = 0.0;
    let base_step = model.meta.steps;
    for step in 0..budget {
        let batch = draw_batch(sources, sched, config.batch, &mut rng)?;
        grad.fill(0.0);
        let loss = model.batch_grad(&batch, &mut grad);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged {
                step: base_step + step,
                loss,
            });
        }
        let progress = step as f64 / budget as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        let lr = config.lr * (config.lr_floor + (1.0 - config.lr_floor) * cosine);
        adam.step(&mut model.params, &grad, lr);
        // Standard EMA warm-up so early steps are not dominated by the initialization.
        let decay = config.ema_decay.min((1.0 + step as f64) / (10.0 + step as f64));
        for (e, p) in ema.iter_mut().zip(&model.params) {
            *e = decay * *e + (1.0 - decay) * p;
        }
        running += loss;
        if (step + 1) % config.log_every == 0 || step + 1 == budget {
            let count = (step % config.log_every + 1) as f64;
            model.meta.loss_curve.push(LossPoint {
                step: base_step + step + 1,
                loss: running / count,
            });
            running = 0.0;
        }
    }
    model.params = ema;
    model.meta.steps += budget;
    model.meta.seeds.push(seed);
    Ok(())
}

/// Train a generalist on `prompts` (∅ allowed) for `budget` Adam steps.
pub fn train_dsm(
    world: &World,
    prompts: &[PromptId],
    sched: &NoiseSchedule,
    budget: usize,
    seed: u64,
) -> Result<LearnedScoreModel> {
    train_dsm_with(world, prompts, sched, budget, seed, &TrainConfig::default())
}

pub fn train_dsm_with(
    world: &World,
    prompts: &[PromptId],
    sched: &NoiseSchedule,
    budget: usize,
    seed: u64,
    config: &TrainConfig,
) -> Result<LearnedScoreModel> {
    if prompts.is_empty() {
        return Err(Error::Config("train_dsm needs at least one prompt".into()));
    }
    let mut model = LearnedScoreModel::init(world, prompts, seed)?;
    let sources = prompts
        .iter()
        .map(|p| {
            Ok(Source {
                input: model.token_rows(p)?,
                data: world.mixture(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    run_training(
        &mut model,
        &sources,
        sched,
        budget,
        crate::sampler::derive_seed(seed, 1),
        config,
    )?;
    Ok(model)
}

/// Copy `base` and continue training on `domain`'s data with the empty prompt as input.
///
/// The returned model answers only ∅, which now denotes the domain.
pub fn finetune_expert(
    base: &LearnedScoreModel,
    world: &World,
    domain: &PromptId,
    sched: &NoiseSchedule,
    budget: usize,
    seed: u64,
) -> Result<LearnedScoreModel> {
    finetune_expert_with(base, world, domain, sched, budget, seed, &TrainConfig::default())
}

pub fn finetune_expert_with(
    base: &LearnedScoreModel,
    world: &World,
    domain: &PromptId,
    sched: &NoiseSchedule,
    budget: usize,
    seed: u64,
    config: &TrainConfig,
) -> Result<LearnedScoreModel> {
    check_dim(base.dim, world.dim())?;
    let mut expert = base.clone();
    expert.prompts = vec![PromptId::empty()];
    let sources = [Source {
        input: Vec::new(),
        data: world.mixture(domain)?,
    }];
    run_training(&mut expert, &sources, sched, budget, seed, config)?;
    Ok(expert)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::PromptScore;
    use crate::world::{presets, AnalyticModel};

    #[test]
    fn zero_budget_keeps_initialization() {
        let sched = NoiseSchedule::default();
        let world = presets::two_prompt();
        let prompts = [PromptId::from("photo")];
        let init = LearnedScoreModel::init(&world, &prompts, 7).unwrap();
        let trained = train_dsm(&world, &prompts, &sched, 0, 7).unwrap();
        assert_eq!(init.params, trained.params);
        let expert = finetune_expert(&trained, &world, &prompts[0], &sched, 0, 3).unwrap();
        assert_eq!(expert.params, trained.params);
        assert!(expert.has_prompt(&PromptId::empty()));
    }

    #[test]
    fn unknown_prompts_are_rejected() {
        let sched = NoiseSchedule::default();
        let world = presets::two_prompt();
        let m = train_dsm(&world, &[PromptId::from("photo")], &sched, 0, 1).unwrap();
        let x = Vector::zeros(2);
        assert!(matches!(
            m.cond_score(&"photo+winter".into(), &x, 0.5),
            Err(Error::UnknownPrompt(_))
        ));
        assert!(train_dsm(&world, &[PromptId::from("dog")], &sched, 1, 1).is_err());
    }

    #[test]
    fn token_gradient_matches_finite_differences() {
        let world = presets::two_factor();
        let model = LearnedScoreModel::init(&world, &[PromptId::from("cat+eyeglasses")], 2).unwrap();
        let sched = NoiseSchedule::default();
        let src = [Source {
            input: model.token_rows(&"cat+eyeglasses".into()).unwrap(),
            data: world.mixture(&"cat+eyeglasses".into()).unwrap(),
        }];
        let batch = draw_batch(&src, &sched, 8, &mut rng_from_seed(4)).unwrap();
        let mut grad = vec![0.0; model.params.len()];
        model.batch_grad(&batch, &mut grad);
        let h = 1e-6;
        let rows = &batch[0].rows;
        for &r in rows {
            for j in [0, 5, 15] {
                let k = r * TOKEN_FEATURES + j;
                let mut m = model.clone();
                m.params[k] += h;
                let up = m.batch_grad(&batch, &mut vec![0.0; grad.len()]);
                m.params[k] -= 2.0 * h;
                let down = m.batch_grad(&batch, &mut vec![0.0; grad.len()]);
                let fd = (up - down) / (2.0 * h);
                assert!((fd - grad[k]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn short_training_reduces_score_error() {
        let sched = NoiseSchedule::default();
        let world = presets::two_prompt();
        let p = PromptId::from("photo+winter");
        let analytic = AnalyticModel::new(world.clone(), sched);
        let reference = PromptScore::new(&analytic, p.clone()).unwrap();
        let data = world.mixture(&p).unwrap();
        let before = LearnedScoreModel::init(&world, std::slice::from_ref(&p), 5)
            .unwrap()
            .score_rms(&p, &reference, data, &sched, 500, 1)
            .unwrap();
        let after = train_dsm(&world, std::slice::from_ref(&p), &sched, 300, 5)
            .unwrap()
            .score_rms(&p, &reference, data, &sched, 500, 1)
            .unwrap();
        assert!(after < 0.5 * before, "{after} vs {before}");
    }
}
