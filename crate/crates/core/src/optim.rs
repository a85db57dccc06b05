//! Adaptive-moment (Adam) parameter updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Tensor<f32>]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update; `grads[i]` pairs with `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor<f32>], grads: &[Tensor<f32>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::dim("adam", format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj as f64;
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                *x = (*x as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Tensor::new(vec![3], vec![1.0f32, -1.0, 0.5]).unwrap();
        let g = Tensor::new(vec![3], vec![0.2f32, -3.0, 0.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &[&p]);
        adam.step(&mut [&mut p], &[g]).unwrap();
        assert!((p.data()[0] - 0.999).abs() < 1e-6);
        assert!((p.data()[1] + 0.999).abs() < 1e-6);
        assert_eq!(p.data()[2], 0.5);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = Tensor::new(vec![2], vec![3.0f32, -2.0]).unwrap();
        let cfg = AdamConfig { lr: 0.05, ..Default::default() };
        let mut adam = Adam::new(cfg, &[&p]);
        for _ in 0..2000 {
            let g = p.map(|x| 2.0 * x);
            adam.step(&mut [&mut p], &[g]).unwrap();
        }
        assert!(p.data().iter().all(|x| x.abs() < 1e-2), "{:?}", p.data());
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let mut p = Tensor::new(vec![1], vec![1.0f32]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &[]);
        assert!(adam.step(&mut [&mut p], &[Tensor::zeros(&[1])]).is_err());
    }
}
