//! A plain feed-forward network with SiLU activations, batched over columns.
//!
//! Parameters live in one flat `Vec<f64>` (per layer: weight matrix in column-major
//! order, then bias) so that optimizers and serialization see a single vector.

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    /// `[input, hidden…, output]`.
    pub sizes: Vec<usize>,
}

/// Intermediate values kept by [`Mlp::forward`] for the backward pass.
pub struct Cache {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

impl Mlp {
    pub fn new(sizes: Vec<usize>) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        Self { sizes }
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    fn offset(&self, layer: usize) -> usize {
        self.sizes[..=layer].windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    fn layer<'a>(&self, params: &'a [f64], l: usize) -> (DMatrixView<'a, f64>, DMatrixView<'a, f64>) {
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        let off = self.offset(l);
        (
            DMatrixView::from_slice(&params[off..off + o * i], o, i),
            DMatrixView::from_slice(&params[off + o * i..off + o * i + o], o, 1),
        )
    }

    /// LeCun-normal weights, zero biases; the last layer is scaled by `out_scale`.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, out_scale: f64) -> Vec<f64> {
        let mut params = vec![0.0; self.n_params()];
        for l in 0..self.n_layers() {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let scale = (1.0 / i as f64).sqrt() * if l + 1 == self.n_layers() { out_scale } else { 1.0 };
            let off = self.offset(l);
            for w in &mut params[off..off + o * i] {
                *w = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        params
    }

    /// Forward pass over the columns of `x`.
    pub fn forward(&self, params: &[f64], x: DMatrix<f64>) -> (DMatrix<f64>, Cache) {
        let mut cache = Cache {
            inputs: Vec::with_capacity(self.n_layers()),
            pre: Vec::with_capacity(self.n_layers()),
        };
        let mut h = x;
        for l in 0..self.n_layers() {
            let (w, b) = self.layer(params, l);
            let mut z = w * &h;
            for mut col in z.column_iter_mut() {
                col += b.column(0);
            }
            cache.inputs.push(h);
            if l + 1 == self.n_layers() {
                return (z, cache);
            }
            h = z.map(silu);
            cache.pre.push(z);
        }
        unreachable!("loop returns at the output layer")
    }

    /// Single-input forward without a cache.
    pub fn eval(&self, params: &[f64], x: &DVector<f64>) -> DVector<f64> {
        let mut h = x.clone();
        for l in 0..self.n_layers() {
            let (w, b) = self.layer(params, l);
            let z = w * &h + b.column(0);
            h = if l + 1 == self.n_layers() { z } else { z.map(silu) };
        }
        h
    }

    /// Accumulate `∂L/∂params` into `grad` and return `∂L/∂x` given `∂L/∂output`.
    pub fn backward(&self, params: &[f64], cache: &Cache, d_out: DMatrix<f64>, grad: &mut [f64]) -> DMatrix<f64> {
        let mut dz = d_out;
        for l in (0..self.n_layers()).rev() {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.offset(l);
            let x = &cache.inputs[l];
            {
                let (gw, gb) = grad[off..off + o * i + o].split_at_mut(o * i);
                let mut gw = DMatrixViewMut::from_slice(gw, o, i);
                gw.gemm(1.0, &dz, &x.transpose(), 1.0);
                for (k, g) in gb.iter_mut().enumerate() {
                    *g += dz.row(k).sum();
                }
            }
            let (w, _) = self.layer(params, l);
            let mut dx = w.transpose() * &dz;
            if l > 0 {
                dx.zip_apply(&cache.pre[l - 1], |d, z| *d *= silu_grad(z));
            }
            dz = dx;
        }
        dz
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::rng_from_seed;

    fn loss(net: &Mlp, params: &[f64], x: &DMatrix<f64>, target: &DMatrix<f64>) -> f64 {
        let (y, _) = net.forward(params, x.clone());
        (y - target).norm_squared()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = Mlp::new(vec![3, 5, 4, 2]);
        let mut rng = rng_from_seed(1);
        let params = net.init(&mut rng, 1.0);
        let x = DMatrix::from_fn(3, 6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let target = DMatrix::from_fn(2, 6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (y, cache) = net.forward(&params, x.clone());
        let mut grad = vec![0.0; net.n_params()];
        let dx = net.backward(&params, &cache, (y - &target) * 2.0, &mut grad);
        let h = 1e-6;
        for k in 0..params.len() {
            let mut p = params.clone();
            p[k] += h;
            let up = loss(&net, &p, &x, &target);
            p[k] -= 2.0 * h;
            let down = loss(&net, &p, &x, &target);
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - grad[k]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "param {k}: {fd} vs {}",
                grad[k]
            );
        }
        for (r, c) in [(0, 0), (2, 3), (1, 5)] {
            let mut xp = x.clone();
            xp[(r, c)] += h;
            let up = loss(&net, &params, &xp, &target);
            xp[(r, c)] -= 2.0 * h;
            let down = loss(&net, &params, &xp, &target);
            assert!(((up - down) / (2.0 * h) - dx[(r, c)]).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_matches_batched_forward() {
        let net = Mlp::new(vec![2, 8, 8, 3]);
        let mut rng = rng_from_seed(2);
        let params = net.init(&mut rng, 1.0);
        let x = DMatrix::from_fn(2, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (y, _) = net.forward(&params, x.clone());
        for c in 0..4 {
            let single = net.eval(&params, &x.column(c).into_owned());
            assert!((single - y.column(c)).norm() < 1e-12);
        }
    }

    #[test]
    fn adam_fits_a_linear_map() {
        let net = Mlp::new(vec![1, 16, 1]);
        let mut rng = rng_from_seed(3);
        let mut params = net.init(&mut rng, 1.0);
        let mut adam = Adam::new(params.len());
        let x = DMatrix::from_fn(1, 64, |_, c| c as f64 / 32.0 - 1.0);
        let target = x.map(|v| 0.5 * v + 0.25);
        let before = loss(&net, &params, &x, &target);
        for _ in 0..2000 {
            let (y, cache) = net.forward(&params, x.clone());
            let mut grad = vec![0.0; params.len()];
            net.backward(&params, &cache, (y - &target) * (2.0 / 64.0), &mut grad);
            adam.step(&mut params, &grad, 1e-2);
        }
        assert!(loss(&net, &params, &x, &target) < 1e-3 * before);
    }
}
