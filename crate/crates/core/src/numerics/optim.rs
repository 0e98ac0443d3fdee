use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

#[derive(Clone, Debug, PartialEq)]
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
            beta2: 0.98,
            epsilon: 1e-9,
        }
    }
}

/// Adam with bias correction. Moment buffers are created lazily to match
/// the parameter set on the first step.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step_count: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self, idx: usize) -> Option<&Tensor> {
        self.m.get(idx)
    }

    pub fn second_moment(&self, idx: usize) -> Option<&Tensor> {
        self.v.get(idx)
    }

    /// Applies one update with learning rate `lr` (overriding the configured
    /// one, for schedules) and zeroes the gradients.
    pub fn step_with_lr(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        if !params.has_fresh_grads() {
            return Err(Error::Contract(
                "adam step without gradients; run backward and accumulate first".into(),
            ));
        }
        if self.m.is_empty() {
            for id in params.ids() {
                self.m.push(Tensor::zeros(params.value(id).shape()));
                self.v.push(Tensor::zeros(params.value(id).shape()));
            }
        }
        if self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters but the set has {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
            ..
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for id in params.ids().collect::<Vec<_>>() {
            let i = id.index();
            let g = params.grad(id).data().to_vec();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = params.value_mut(id).data_mut();
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= lr * mhat / (vhat.sqrt() + epsilon);
            }
        }
        params.zero_grad();
        Ok(())
    }

    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        let lr = self.config.learning_rate;
        self.step_with_lr(params, lr)
    }
}
