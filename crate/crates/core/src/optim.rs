//! SGD with momentum under a cosine-annealed learning rate.

use std::f64::consts::PI;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::{GradMap, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    velocity: IndexMap<String, Tensor>,
    pub momentum: f64,
    pub lr0: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    step: usize,
}

impl OptimizerState {
    pub fn new(
        params: &ParamSet,
        lr0: f64,
        lr_min: f64,
        momentum: f64,
        total_steps: usize,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum must lie in [0,1), got {momentum}")));
        }
        if lr0 <= 0.0 || lr_min < 0.0 || total_steps == 0 {
            return Err(Error::config(format!(
                "need lr0 > 0, lr_min >= 0, total_steps > 0 (got {lr0}, {lr_min}, {total_steps})"
            )));
        }
        let velocity = params
            .trainable()
            .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
            .collect();
        Ok(OptimizerState {
            velocity,
            momentum,
            lr0,
            lr_min,
            weight_decay: 0.0,
            total_steps,
            step: 0,
        })
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.get(name)
    }

    /// `lr_min + ½(lr0 − lr_min)(1 + cos(π t / T))`.
    pub fn lr_at(&self, t: usize) -> f64 {
        let frac = t.min(self.total_steps) as f64 / self.total_steps as f64;
        self.lr_min + 0.5 * (self.lr0 - self.lr_min) * (1.0 + (PI * frac).cos())
    }

    pub fn current_lr(&self) -> f64 {
        self.lr_at(self.step)
    }
}

/// `v ← μv + g; θ ← θ − lr(t)·v; t ← t + 1`.
///
/// `grads` must cover exactly the trainable parameters.
pub fn sgd_step(state: &mut OptimizerState, params: &mut ParamSet, grads: &GradMap) -> Result<()> {
    let trainable: Vec<String> = params.trainable().map(|(n, _)| n.to_string()).collect();
    if grads.len() != trainable.len() || trainable.iter().any(|n| !grads.contains_key(n)) {
        return Err(Error::contract("gradients do not cover exactly the trainable parameters"));
    }
    for name in &trainable {
        let (p, g) = (params.tensor(name)?, &grads[name]);
        if p.shape() != g.shape() {
            return Err(Error::contract(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    if state.step >= state.total_steps {
        return Err(Error::contract("optimizer already at its final step"));
    }
    let lr = state.current_lr();
    let (mu, wd) = (state.momentum, state.weight_decay);
    for name in &trainable {
        let theta = params.tensor_mut(name)?;
        let v = state
            .velocity
            .get_mut(name.as_str())
            .ok_or_else(|| Error::contract(format!("no velocity for `{name}`")))?;
        for ((vi, ti), gi) in v.data_mut().iter_mut().zip(theta.data_mut()).zip(grads[name].data()) {
            let g = gi + wd * *ti;
            *vi = mu * *vi + g;
            *ti -= lr * *vi;
        }
    }
    state.step += 1;
    Ok(())
}
