use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{Gradients, ParamId, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Learning rate multiplied by `rate` every `steps` steps, continuously.
    ExponentialDecay {
        rate: f64,
        steps: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl Method {
    pub fn adam() -> Self {
        Method::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub method: Method,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// EMA decay of the evaluation weights; `None` disables EMA.
    pub ema_decay: Option<f64>,
    /// Ramp the EMA decay as `min(decay, (1+n)/(10+n))` over the first updates.
    pub ema_warmup: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-2,
            schedule: Schedule::Constant,
            method: Method::Sgd,
            batch_size: 8,
            max_steps: 100,
            seed: 0,
            clip_norm: Some(1.0),
            ema_decay: Some(0.999),
            ema_warmup: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                "learning_rate must be finite and non-negative",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if let Schedule::ExponentialDecay { rate, steps } = self.schedule {
            if !(rate > 0.0 && rate <= 1.0) || steps == 0 {
                return Err(Error::config(
                    "decay rate must be in (0, 1] with positive steps",
                ));
            }
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::config("clip_norm must be positive"));
            }
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::config("ema_decay must be in [0, 1]"));
            }
        }
        if let Method::Adam {
            beta1,
            beta2,
            epsilon,
        } = self.method
        {
            if !(0.0..1.0).contains(&beta1)
                || !(0.0..1.0).contains(&beta2)
                || epsilon.is_nan()
                || epsilon <= 0.0
            {
                return Err(Error::config(
                    "Adam betas must be in [0, 1) and epsilon positive",
                ));
            }
        }
        Ok(())
    }

    /// Learning rate in force at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::ExponentialDecay { rate, steps } => {
                self.learning_rate * rate.powf(step as f64 / steps as f64)
            }
        }
    }
}

/// Optimizer state for one parameter store.
#[derive(Clone, Debug)]
pub struct Optimizer {
    method: Method,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
    steps: u64,
}

impl Optimizer {
    pub fn new(method: Method) -> Self {
        Optimizer {
            method,
            moments: BTreeMap::new(),
            steps: 0,
        }
    }

    /// Applies one update. A zero learning rate leaves every parameter untouched.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        self.steps += 1;
        if lr == 0.0 {
            return Ok(());
        }
        for (id, g) in grads.iter() {
            let p = store.tensor_mut(id);
            if !p.same_shape(g) {
                return Err(Error::shape(format!(
                    "gradient for {id:?} has the wrong shape"
                )));
            }
            match self.method {
                Method::Sgd => {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
                Method::Adam {
                    beta1,
                    beta2,
                    epsilon,
                } => {
                    let (m, v) = self.moments.entry(id).or_insert_with(|| {
                        (
                            Tensor::zeros(g.shape().to_vec()),
                            Tensor::zeros(g.shape().to_vec()),
                        )
                    });
                    let c1 = 1.0 - beta1.powi(self.steps as i32);
                    let c2 = 1.0 - beta2.powi(self.steps as i32);
                    for (((w, d), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * d;
                        *vi = beta2 * *vi + (1.0 - beta2) * d * d;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}
