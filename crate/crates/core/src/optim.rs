//! SGD and Adam over a flat parameter vector.
//!
//! Both update only the entries recorded as touched in the [`GradBuffer`]; for
//! dense models that is every parameter, for tables it keeps a step
//! proportional to the batch rather than the table.

use serde::{Deserialize, Serialize};

use crate::approximator::GradBuffer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sgd,
    Adam,
}

/// Optimization hyperparameters shared by every fitting routine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    /// `None` picks 1e-2 for tables and 1e-3 for networks.
    pub learning_rate: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Weight of the target-sample regularizer.
    pub lambda: f64,
    /// Learning rate at the last step as a fraction of the initial one;
    /// decay is geometric. 1 keeps the rate constant.
    pub final_lr_fraction: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Adam,
            learning_rate: None,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 256,
            steps: 2000,
            seed: 0,
            lambda: 0.0,
            final_lr_fraction: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::InvalidConfig("batch_size and steps must be positive".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::InvalidConfig(format!("learning rate must be > 0, got {lr}")));
            }
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::InvalidConfig("final_lr_fraction must lie in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn resolved_lr(&self, tabular: bool) -> f64 {
        self.learning_rate.unwrap_or(if tabular { 1e-2 } else { 1e-3 })
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    algorithm: Algorithm,
    lr0: f64,
    decay: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Optimizer {
    pub fn new(config: &OptimizerConfig, num_params: usize, tabular: bool) -> Self {
        let lr0 = config.resolved_lr(tabular);
        let decay = if config.steps > 1 {
            config.final_lr_fraction.powf(1.0 / (config.steps - 1) as f64)
        } else {
            1.0
        };
        let adam = config.algorithm == Algorithm::Adam;
        Self {
            algorithm: config.algorithm,
            lr0,
            decay,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            m: if adam { vec![0.0; num_params] } else { Vec::new() },
            v: if adam { vec![0.0; num_params] } else { Vec::new() },
            step: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr0 * self.decay.powf(self.step as f64)
    }

    /// Applies one update from the touched entries of `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &GradBuffer) {
        let lr = self.learning_rate();
        self.step += 1;
        match self.algorithm {
            Algorithm::Sgd => {
                for &i in grad.touched() {
                    params[i] -= lr * grad.values()[i];
                }
            }
            Algorithm::Adam => {
                let k = self.step as i32;
                let c1 = 1.0 - self.beta1.powi(k);
                let c2 = 1.0 - self.beta2.powi(k);
                for &i in grad.touched() {
                    let g = grad.values()[i];
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= lr * mh / (vh.sqrt() + self.epsilon);
                }
            }
        }
    }
}
