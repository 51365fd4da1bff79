//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-7;

/// Moment buffers for one parameter list, created on the first step.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

impl OptimizerState {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        OptimizerState {
            lr,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
            shapes: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }
}

/// One Adam update. `decay[i]` says whether parameter `i` takes weight
/// decay, applied as `θ ← θ − lr·wd·θ` before the moment update.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&[f64]], decay: &[bool], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != decay.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} decay flags",
            params.len(),
            grads.len(),
            decay.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() {
            return Err(Error::Contract(format!(
                "gradient {i} has {} entries for a parameter of shape {:?}",
                g.len(),
                p.shape()
            )));
        }
    }
    if state.shapes.is_empty() && state.step == 0 {
        state.shapes = params.iter().map(|p| p.shape().to_vec()).collect();
        state.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.second = state.first.clone();
    } else if state.shapes.len() != params.len() || state.shapes.iter().zip(params.iter()).any(|(s, p)| s != p.shape()) {
        return Err(Error::Contract("parameter shapes differ from the optimizer buffers".into()));
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let (lr, wd) = (state.lr, state.weight_decay);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        let shrink = if decay[i] { lr * wd } else { 0.0 };
        for (j, theta) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            *theta -= shrink * *theta;
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *theta -= lr * mhat / (vhat.sqrt() + EPSILON);
        }
    }
    Ok(())
}
