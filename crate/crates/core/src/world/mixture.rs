//! Gaussian mixtures and their exact VP-perturbed marginals.
//!
//! Component `k` with `N(μ_k, Σ_k)` is pushed to `N(α μ_k, α²Σ_k + σ²I)` by the
//! perturbation kernel, so every quantity at time `t` stays closed-form.

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::Vector;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    /// Per-coordinate variances.
    Diagonal(Vector),
    Full(DMatrix<f64>),
}

impl Covariance {
    pub fn identity(dim: usize) -> Self {
        Covariance::Diagonal(Vector::from_element(dim, 1.0))
    }

    pub fn isotropic(dim: usize, variance: f64) -> Self {
        Covariance::Diagonal(Vector::from_element(dim, variance))
    }

    pub fn dim(&self) -> usize {
        match self {
            Covariance::Diagonal(v) => v.len(),
            Covariance::Full(m) => m.nrows(),
        }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        match self {
            Covariance::Diagonal(v) => DMatrix::from_diagonal(v),
            Covariance::Full(m) => m.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Covariance::Diagonal(v) => {
                if v.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                    return Err(Error::InvalidMixture("variances must be positive".into()));
                }
            }
            Covariance::Full(m) => {
                if !m.is_square() {
                    return Err(Error::InvalidMixture("covariance must be square".into()));
                }
                if (m - m.transpose()).abs().max() > 1e-10 * (1.0 + m.abs().max()) {
                    return Err(Error::InvalidMixture("covariance must be symmetric".into()));
                }
                if Cholesky::new(m.clone()).is_none() {
                    return Err(Error::InvalidMixture("covariance must be positive-definite".into()));
                }
            }
        }
        Ok(())
    }

    /// `α²Σ + σ²I`.
    fn perturbed(&self, alpha: f64, sigma: f64) -> Covariance {
        let (a2, s2) = (alpha * alpha, sigma * sigma);
        match self {
            Covariance::Diagonal(v) => Covariance::Diagonal(v.map(|s| a2 * s + s2)),
            Covariance::Full(m) => {
                let mut c = m * a2;
                for i in 0..c.nrows() {
                    c[(i, i)] += s2;
                }
                Covariance::Full(c)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Vector,
    pub covariance: Covariance,
}

/// Factorized form of one perturbed component, ready for repeated evaluation.
enum Factor {
    Diagonal { inv: Vector, log_det: f64 },
    Full { chol: Cholesky<f64, Dyn>, log_det: f64 },
}

impl Factor {
    fn new(cov: &Covariance) -> Result<Self> {
        match cov {
            Covariance::Diagonal(v) => Ok(Factor::Diagonal {
                inv: v.map(|s| 1.0 / s),
                log_det: v.iter().map(|s| s.ln()).sum(),
            }),
            Covariance::Full(m) => {
                let chol = Cholesky::new(m.clone())
                    .ok_or_else(|| Error::InvalidMixture("perturbed covariance lost definiteness".into()))?;
                let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
                Ok(Factor::Full { chol, log_det })
            }
        }
    }

    /// `(log N(x; m, C), C⁻¹(x − m))`.
    fn eval(&self, diff: &Vector) -> (f64, Vector) {
        let d = diff.len() as f64;
        match self {
            Factor::Diagonal { inv, log_det } => {
                let precision_diff = diff.component_mul(inv);
                let quad = diff.dot(&precision_diff);
                (-0.5 * (d * LN_2PI + log_det + quad), precision_diff)
            }
            Factor::Full { chol, log_det } => {
                let precision_diff = chol.solve(diff);
                let quad = diff.dot(&precision_diff);
                (-0.5 * (d * LN_2PI + log_det + quad), precision_diff)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<Component>,
}

/// Log-density, score and responsibilities at one point.
#[derive(Debug, Clone)]
pub struct MixtureEval {
    pub log_density: f64,
    pub score: Vector,
    pub responsibilities: Vec<f64>,
}

impl GaussianMixture {
    /// Validates shapes, positive weights summing to one, and positive-definite covariances.
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidMixture("mixture needs at least one component".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::InvalidMixture("dimension must be positive".into()));
        }
        let mut total = 0.0;
        for c in &components {
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::InvalidMixture(format!("weight {} is not positive", c.weight)));
            }
            if c.mean.len() != dim || c.covariance.dim() != dim {
                return Err(Error::InvalidMixture(format!("component dimension differs from {dim}")));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::InvalidMixture("mean must be finite".into()));
            }
            c.covariance.validate()?;
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidMixture(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { dim, components })
    }

    /// Single `N(mean, I)`.
    pub fn unit(mean: Vector) -> Self {
        Self::isotropic(&[(1.0, mean)], 1.0).expect("unit Gaussian is valid")
    }

    /// Equal-variance isotropic mixture from `(weight, mean)` pairs.
    pub fn isotropic(parts: &[(f64, Vector)], variance: f64) -> Result<Self> {
        let comps = parts
            .iter()
            .map(|(w, m)| Component {
                weight: *w,
                mean: m.clone(),
                covariance: Covariance::isotropic(m.len(), variance),
            })
            .collect();
        Self::new(comps)
    }

    /// Prior-weighted union of mixtures; priors are renormalized over the positive ones.
    pub fn combine(parts: &[(f64, &GaussianMixture)]) -> Result<Self> {
        let total: f64 = parts.iter().filter(|(p, _)| *p > 0.0).map(|(p, _)| p).sum();
        if !(total > 0.0) {
            return Err(Error::InvalidMixture("no prompt has positive prior".into()));
        }
        let mut comps = Vec::new();
        for (p, m) in parts.iter().filter(|(p, _)| *p > 0.0) {
            for c in &m.components {
                comps.push(Component {
                    weight: c.weight * p / total,
                    ..c.clone()
                });
            }
        }
        Self::new(comps)
    }

    /// Mixture of the product distribution on concatenated coordinates.
    pub fn product(a: &GaussianMixture, b: &GaussianMixture) -> Self {
        let mut comps = Vec::with_capacity(a.components.len() * b.components.len());
        for ca in &a.components {
            for cb in &b.components {
                let mean = Vector::from_iterator(a.dim + b.dim, ca.mean.iter().chain(cb.mean.iter()).copied());
                let covariance = match (&ca.covariance, &cb.covariance) {
                    (Covariance::Diagonal(va), Covariance::Diagonal(vb)) => Covariance::Diagonal(
                        Vector::from_iterator(a.dim + b.dim, va.iter().chain(vb.iter()).copied()),
                    ),
                    (x, y) => {
                        let mut m = DMatrix::zeros(a.dim + b.dim, a.dim + b.dim);
                        m.view_mut((0, 0), (a.dim, a.dim)).copy_from(&x.to_matrix());
                        m.view_mut((a.dim, a.dim), (b.dim, b.dim)).copy_from(&y.to_matrix());
                        Covariance::Full(m)
                    }
                };
                comps.push(Component {
                    weight: ca.weight * cb.weight,
                    mean,
                    covariance,
                });
            }
        }
        Self::new(comps).expect("product of valid mixtures is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// The exact marginal after perturbation with coefficients `(α, σ)`.
    pub fn perturbed(&self, alpha: f64, sigma: f64) -> Self {
        Self {
            dim: self.dim,
            components: self
                .components
                .iter()
                .map(|c| Component {
                    weight: c.weight,
                    mean: &c.mean * alpha,
                    covariance: c.covariance.perturbed(alpha, sigma),
                })
                .collect(),
        }
    }

    /// Log-density, score and responsibilities of the `(α, σ)`-perturbed mixture at `x`.
    pub fn evaluate(&self, x: &Vector, alpha: f64, sigma: f64) -> Result<MixtureEval> {
        check_dim(self.dim, x.len())?;
        let k = self.components.len();
        let mut log_terms = Vec::with_capacity(k);
        let mut grads = Vec::with_capacity(k);
        for c in &self.components {
            let factor = Factor::new(&c.covariance.perturbed(alpha, sigma))?;
            let diff = x - &c.mean * alpha;
            let (lp, precision_diff) = factor.eval(&diff);
            log_terms.push(c.weight.ln() + lp);
            grads.push(precision_diff);
        }
        let max = log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::NonFinite {
                what: "mixture log-density",
                t: f64::NAN,
                x: x.iter().copied().collect(),
            });
        }
        let weights: Vec<f64> = log_terms.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let responsibilities: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut score = Vector::zeros(self.dim);
        for (r, g) in responsibilities.iter().zip(&grads) {
            score.axpy(-r, g, 1.0);
        }
        Ok(MixtureEval {
            log_density: max + total.ln(),
            score,
            responsibilities,
        })
    }

    pub fn log_density_at(&self, x: &Vector, alpha: f64, sigma: f64) -> Result<f64> {
        Ok(self.evaluate(x, alpha, sigma)?.log_density)
    }

    pub fn score_at(&self, x: &Vector, alpha: f64, sigma: f64) -> Result<Vector> {
        Ok(self.evaluate(x, alpha, sigma)?.score)
    }

    /// Unperturbed log-density.
    pub fn log_density(&self, x: &Vector) -> Result<f64> {
        self.log_density_at(x, 1.0, 0.0)
    }

    pub fn mean(&self) -> Vector {
        self.components
            .iter()
            .fold(Vector::zeros(self.dim), |acc, c| acc + &c.mean * c.weight)
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let mut cov = DMatrix::zeros(self.dim, self.dim);
        for c in &self.components {
            let d = &c.mean - &mean;
            cov += (c.covariance.to_matrix() + &d * d.transpose()) * c.weight;
        }
        cov
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = &self.components[self.components.len() - 1];
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        let z = Vector::from_iterator(self.dim, (0..self.dim).map(|_| StandardNormal.sample(rng)));
        match &chosen.covariance {
            Covariance::Diagonal(v) => &chosen.mean + z.component_mul(&v.map(f64::sqrt)),
            Covariance::Full(m) => {
                let l = Cholesky::new(m.clone()).expect("validated").unpack();
                &chosen.mean + l * z
            }
        }
    }
}

/// Serialized component: `covariance` (full matrix) or `variance` (scalar or per
/// coordinate); unit variance when both are omitted.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none", alias = "isotropic")]
    pub variance: Option<VarianceSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VarianceSpec {
    Scalar(f64),
    PerCoordinate(Vec<f64>),
}

impl ComponentSpec {
    pub fn to_component(&self) -> Result<Component> {
        let dim = self.mean.len();
        let covariance = match (&self.covariance, &self.variance) {
            (Some(_), Some(_)) => {
                return Err(Error::InvalidMixture(
                    "give either covariance or variance, not both".into(),
                ))
            }
            (Some(rows), None) => {
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    return Err(Error::InvalidMixture(format!("covariance must be {dim}x{dim}")));
                }
                Covariance::Full(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
            }
            (None, Some(VarianceSpec::Scalar(v))) => Covariance::isotropic(dim, *v),
            (None, Some(VarianceSpec::PerCoordinate(v))) => {
                if v.len() != dim {
                    return Err(Error::InvalidMixture(format!("variance must have length {dim}")));
                }
                Covariance::Diagonal(Vector::from_vec(v.clone()))
            }
            (None, None) => Covariance::identity(dim),
        };
        Ok(Component {
            weight: self.weight,
            mean: Vector::from_vec(self.mean.clone()),
            covariance,
        })
    }

    pub fn from_component(c: &Component) -> Self {
        let (covariance, variance) = match &c.covariance {
            Covariance::Diagonal(v) => {
                let first = v[0];
                if v.iter().all(|&s| s == first) {
                    (None, Some(VarianceSpec::Scalar(first)))
                } else {
                    (None, Some(VarianceSpec::PerCoordinate(v.iter().copied().collect())))
                }
            }
            Covariance::Full(m) => (Some(m.row_iter().map(|r| r.iter().copied().collect()).collect()), None),
        };
        Self {
            weight: c.weight,
            mean: c.mean.iter().copied().collect(),
            covariance,
            variance,
        }
    }
}

impl Serialize for GaussianMixture {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let specs: Vec<ComponentSpec> = self.components.iter().map(ComponentSpec::from_component).collect();
        specs.serialize(s)
    }
}

impl<'de> Deserialize<'de> for GaussianMixture {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let specs = Vec::<ComponentSpec>::deserialize(d)?;
        let comps = specs
            .iter()
            .map(ComponentSpec::to_component)
            .collect::<Result<Vec<_>>>()
            .map_err(serde::de::Error::custom)?;
        GaussianMixture::new(comps).map_err(serde::de::Error::custom)
    }
}
