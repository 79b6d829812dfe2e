//! Adam with L2 weight decay and a step learning-rate schedule.

use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added to the gradient as `weight_decay * param` before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 5e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let wd = T::from_f64(c.weight_decay);
        let step_size = T::from_f64(lr / bc1);
        let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(c.eps);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let grad = gv + wd * *pv;
                *mv = b1 * *mv + ob1 * grad;
                *vv = b2 * *vv + ob2 * grad * grad;
                let denom = vv.sqrt() * inv_sqrt_bc2 + eps;
                *pv = *pv - step_size * *mv / denom;
            }
        }
    }
}

/// `base * factor^(epoch / every)`.
pub fn step_decay_lr(base: f64, epoch: usize, every: usize, factor: f64) -> f64 {
    base * factor.powi((epoch / every.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = vec![Tensor::<f64>::new(&[2], vec![3.0, -2.0]).unwrap()];
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = Adam::new(cfg, &params);
        for _ in 0..2000 {
            let g = params[0].map(|v| 2.0 * (v - 1.0));
            opt.step(&mut params, &[g], 0.01);
        }
        assert!(params[0].data().iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn first_step_has_lr_magnitude() {
        let mut params = vec![Tensor::<f64>::new(&[3], vec![0.0, 0.0, 0.0]).unwrap()];
        let mut opt = Adam::new(
            AdamConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &params,
        );
        let g = Tensor::new(&[3], vec![5.0, -0.1, 1e-3]).unwrap();
        opt.step(&mut params, &[g], 0.01);
        for (&p, s) in params[0].data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((p - s * 0.01).abs() < 1e-6, "{p}");
        }
    }

    #[test]
    fn lr_schedule() {
        assert_eq!(step_decay_lr(0.01, 0, 50, 0.1), 0.01);
        assert_eq!(step_decay_lr(0.01, 49, 50, 0.1), 0.01);
        assert!((step_decay_lr(0.01, 50, 50, 0.1) - 0.001).abs() < 1e-15);
        assert!((step_decay_lr(0.01, 199, 50, 0.1) - 1e-5).abs() < 1e-18);
    }
}
