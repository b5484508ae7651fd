//! First-order optimizers over flat parameter slices.
//!
//! Optimizers see parameters as consecutive segments addressed by a running
//! offset, so the same state object serves a whole network or a plain vector.

use serde::{Deserialize, Serialize};

const FLUSH: f64 = 1e-200;

pub trait Optimizer {
    /// Called once per update, before any [`Optimizer::update`] call.
    fn begin_step(&mut self, num_params: usize);
    /// Update `params` in place; `offset` locates the segment in the flat state.
    fn update(&mut self, offset: usize, params: &mut [f64], grads: &[f64]);

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len(), "gradient length mismatch");
        self.begin_step(params.len());
        self.update(0, params, grads);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
    Rmsprop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are allocated lazily on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    correction1: f64,
    correction2: f64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            correction1: 1.0,
            correction2: 1.0,
        }
    }

    pub fn with_lr(learning_rate: f64) -> Self {
        Self::new(AdamConfig {
            learning_rate,
            ..AdamConfig::default()
        })
    }
}

impl Optimizer for Adam {
    fn begin_step(&mut self, num_params: usize) {
        if self.first_moment.len() != num_params {
            self.first_moment = vec![0.0; num_params];
            self.second_moment = vec![0.0; num_params];
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        self.correction1 = 1.0 - self.config.beta1.powi(t);
        self.correction2 = 1.0 - self.config.beta2.powi(t);
    }

    fn update(&mut self, offset: usize, params: &mut [f64], grads: &[f64]) {
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let m = &mut self.first_moment[offset..offset + params.len()];
        let v = &mut self.second_moment[offset..offset + params.len()];
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m).zip(v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            // Moments of dead units decay geometrically into subnormals, which are slow.
            if m.abs() < FLUSH {
                *m = 0.0;
            }
            if *v < FLUSH {
                *v = 0.0;
            }
            if g == 0.0 && *m == 0.0 {
                continue;
            }
            let m_hat = *m / self.correction1;
            let v_hat = *v / self.correction2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
}

impl Optimizer for Sgd {
    fn begin_step(&mut self, _num_params: usize) {}

    fn update(&mut self, _offset: usize, params: &mut [f64], grads: &[f64]) {
        for (p, g) in params.iter_mut().zip(grads) {
            *p -= self.learning_rate * g;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    square_avg: Vec<f64>,
}

impl RmsProp {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            decay: 0.99,
            epsilon: 1e-8,
            square_avg: Vec::new(),
        }
    }
}

impl Optimizer for RmsProp {
    fn begin_step(&mut self, num_params: usize) {
        if self.square_avg.len() != num_params {
            self.square_avg = vec![0.0; num_params];
        }
    }

    fn update(&mut self, offset: usize, params: &mut [f64], grads: &[f64]) {
        let sq = &mut self.square_avg[offset..offset + params.len()];
        for ((p, &g), s) in params.iter_mut().zip(grads).zip(sq) {
            *s = self.decay * *s + (1.0 - self.decay) * g * g;
            *p -= self.learning_rate * g / (s.sqrt() + self.epsilon);
        }
    }
}
