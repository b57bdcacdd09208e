//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::params::ParamSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: ParamSet,
    pub second_moment: ParamSet,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        Self {
            config,
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }

    /// One update. Names missing from `grads` are only decayed.
    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        let c = &self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            if c.weight_decay > 0.0 {
                *p *= 1.0 - c.learning_rate * c.weight_decay;
            }
            let Some(g) = grads.get(name) else { continue };
            let m = self.first_moment.get_mut(name).expect("moment for every parameter");
            m.zip_apply(g, |mi, gi| *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi);
            let v = self.second_moment.get_mut(name).expect("moment for every parameter");
            v.zip_apply(g, |vi, gi| *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi);
            let m = &self.first_moment.get(name).unwrap();
            let v = &self.second_moment.get(name).unwrap();
            for ((pi, mi), vi) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                *pi -= c.learning_rate * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
            }
        }
    }
}
