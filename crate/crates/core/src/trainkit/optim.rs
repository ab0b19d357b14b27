use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndtensor::Tensor;
use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            epochs: 30,
            batch_size: 16,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.eps > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Config(format!("clip_norm must be finite and >= 0, got {}", self.clip_norm)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Factor bringing the global L2 norm of `grads` down to `ceiling`.
pub fn clip_scale(grads: &[Tensor], ceiling: f64) -> f64 {
    if ceiling == 0.0 {
        return 1.0;
    }
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > ceiling {
        ceiling / norm
    } else {
        1.0
    }
}

/// Bias-corrected Adam with one moment pair per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: OptimizerConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, config: OptimizerConfig) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// Applies one update; `grads` follows store order.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Training(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::Training(format!(
                    "gradient shape {:?} for parameter {}",
                    g.shape(),
                    params.name(id)
                )));
            }
            if !g.is_finite() {
                return Err(Error::Training(format!("non-finite gradient for parameter {}", params.name(id))));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let scale = clip_scale(grads, c.clip_norm);
        for (i, id) in params.ids().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let theta = params.get_mut(id).data_mut();
            for j in 0..g.len() {
                let g = scale * g[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                theta[j] -= c.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("theta", Tensor::from_vec(vec![v]));
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = one_param(0.0);
        let mut adam = Adam::new(&p, OptimizerConfig::default());
        adam.update(&mut p, &[Tensor::from_vec(vec![1.0])]).unwrap();
        let theta = p.iter().next().unwrap().1.data()[0];
        assert!((theta + 0.001).abs() < 1e-10, "{theta}");
    }

    #[test]
    fn zero_gradient_keeps_value_and_decays_moments() {
        let mut p = one_param(0.5);
        let mut adam = Adam::new(&p, OptimizerConfig::default());
        adam.update(&mut p, &[Tensor::from_vec(vec![2.0])]).unwrap();
        let before = p.iter().next().unwrap().1.data()[0];
        let (m1, v1) = (adam.first_moments()[0].data()[0], adam.second_moments()[0].data()[0]);
        adam.update(&mut p, &[Tensor::from_vec(vec![0.0])]).unwrap();
        assert_eq!(adam.first_moments()[0].data()[0], 0.9 * m1);
        assert_eq!(adam.second_moments()[0].data()[0], 0.999 * v1);
        // The bias-corrected momentum still moves theta; a fresh optimizer does not.
        let mut q = one_param(0.5);
        let mut fresh = Adam::new(&q, OptimizerConfig::default());
        fresh.update(&mut q, &[Tensor::from_vec(vec![0.0])]).unwrap();
        assert_eq!(q.iter().next().unwrap().1.data()[0], 0.5);
        assert!(p.iter().next().unwrap().1.data()[0] < before);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = one_param(0.0);
        let mut adam = Adam::new(&p, OptimizerConfig::default());
        let err = adam.update(&mut p, &[Tensor::from_vec(vec![f64::NAN])]).unwrap_err();
        assert!(err.to_string().contains("theta"));
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn clipping_rescales_global_norm() {
        let grads = [Tensor::from_vec(vec![3.0]), Tensor::from_vec(vec![4.0])];
        assert_eq!(clip_scale(&grads, 0.0), 1.0);
        assert_eq!(clip_scale(&grads, 10.0), 1.0);
        assert!((clip_scale(&grads, 1.0) - 0.2).abs() < 1e-15);
        let mut p = one_param(0.0);
        p.add("phi", Tensor::from_vec(vec![0.0]));
        let cfg = OptimizerConfig {
            clip_norm: 1.0,
            ..OptimizerConfig::default()
        };
        let mut adam = Adam::new(&p, cfg);
        adam.update(&mut p, &grads).unwrap();
        assert!((adam.first_moments()[1].data()[0] - 0.1 * 0.8).abs() < 1e-15);
        assert!(OptimizerConfig { clip_norm: -1.0, ..cfg }.validate().is_err());
    }
}
