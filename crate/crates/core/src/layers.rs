//! Small building blocks shared by the model modules.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// `x·w + b` over the last axis of `x`.
pub fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    let shape = g.shape(y).to_vec();
    let mut bshape = vec![1; shape.len()];
    *bshape.last_mut().unwrap() = shape[shape.len() - 1];
    let b = g.reshape(b, &bshape)?;
    let b = g.expand(b, &shape)?;
    g.add(y, b)
}

/// Zero-mean Gaussian tensor with the given standard deviation.
pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// He-style initialization, std = sqrt(2 / fan_in).
pub fn he(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    normal(rng, shape, (2.0 / fan_in as f64).sqrt())
}

/// `-mean_b Σ_k y[b,k]·ln(p[b,k] + 1e-12)` for one-hot targets `y`.
pub fn cross_entropy(g: &mut Graph, probs: Var, labels: &[u8]) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    let b = shape[0];
    let k = shape[1];
    let onehot = Tensor::from_fn(&[b, k], |i| f64::from(labels[i[0]] as usize == i[1]));
    let y = g.constant(onehot);
    let shifted = g.add_scalar(probs, LOG_EPS);
    let logp = g.ln(shifted);
    let picked = g.mul(y, logp)?;
    let total = g.sum(picked, None)?;
    Ok(g.scale(total, -1.0 / b as f64))
}

pub const LOG_EPS: f64 = 1e-12;
