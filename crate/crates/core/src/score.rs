use std::sync::Arc;

use crate::error::{Error, Result};
use crate::world::PromptId;
use crate::Vector;

/// A time-dependent vector field `(x, t) ↦ ∇ₓ log p_t(x)` or an approximation of it.
pub trait ScoreField: Send + Sync {
    fn dim(&self) -> usize;

    fn score(&self, x: &Vector, t: f64) -> Result<Vector>;
}

impl<S: ScoreField + ?Sized> ScoreField for &S {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn score(&self, x: &Vector, t: f64) -> Result<Vector> {
        (**self).score(x, t)
    }
}

impl<S: ScoreField + ?Sized> ScoreField for Box<S> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn score(&self, x: &Vector, t: f64) -> Result<Vector> {
        (**self).score(x, t)
    }
}

impl<S: ScoreField + ?Sized> ScoreField for Arc<S> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn score(&self, x: &Vector, t: f64) -> Result<Vector> {
        (**self).score(x, t)
    }
}

/// Closure-backed score field.
pub struct FnScore<F> {
    dim: usize,
    f: F,
}

impl<F> FnScore<F>
where
    F: Fn(&Vector, f64) -> Vector + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> ScoreField for FnScore<F>
where
    F: Fn(&Vector, f64) -> Vector + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x: &Vector, t: f64) -> Result<Vector> {
        Ok((self.f)(x, t))
    }
}

/// A family of score fields indexed by prompt, including the unconditional prompt ∅.
pub trait ConditionalModel: Send + Sync {
    fn dim(&self) -> usize;

    fn has_prompt(&self, prompt: &PromptId) -> bool;

    fn cond_score(&self, prompt: &PromptId, x: &Vector, t: f64) -> Result<Vector>;

    /// Exact `log p_t(x | prompt)` when the model has one; `None` for learned models.
    fn cond_log_density(&self, _prompt: &PromptId, _x: &Vector, _t: f64) -> Option<Result<f64>> {
        None
    }
}

impl<M: ConditionalModel + ?Sized> ConditionalModel for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn has_prompt(&self, prompt: &PromptId) -> bool {
        (**self).has_prompt(prompt)
    }

    fn cond_score(&self, prompt: &PromptId, x: &Vector, t: f64) -> Result<Vector> {
        (**self).cond_score(prompt, x, t)
    }

    fn cond_log_density(&self, prompt: &PromptId, x: &Vector, t: f64) -> Option<Result<f64>> {
        (**self).cond_log_density(prompt, x, t)
    }
}

impl<M: ConditionalModel + ?Sized> ConditionalModel for Arc<M> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn has_prompt(&self, prompt: &PromptId) -> bool {
        (**self).has_prompt(prompt)
    }

    fn cond_score(&self, prompt: &PromptId, x: &Vector, t: f64) -> Result<Vector> {
        (**self).cond_score(prompt, x, t)
    }

    fn cond_log_density(&self, prompt: &PromptId, x: &Vector, t: f64) -> Option<Result<f64>> {
        (**self).cond_log_density(prompt, x, t)
    }
}

/// One prompt of a [`ConditionalModel`] viewed as a plain score field.
#[derive(Clone)]
pub struct PromptScore<M> {
    pub model: M,
    pub prompt: PromptId,
}

impl<M: ConditionalModel> PromptScore<M> {
    pub fn new(model: M, prompt: PromptId) -> Result<Self> {
        if !model.has_prompt(&prompt) {
            return Err(Error::UnknownPrompt(prompt.to_string()));
        }
        Ok(Self { model, prompt })
    }
}

impl<M: ConditionalModel> ScoreField for PromptScore<M> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn score(&self, x: &Vector, t: f64) -> Result<Vector> {
        self.model.cond_score(&self.prompt, x, t)
    }
}
