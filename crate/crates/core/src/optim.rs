//! AdamW with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::scalar::{lit, to_f64, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            max_grad_norm: Some(1.0),
        }
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    cfg: AdamWConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|t| t.data().iter())
        .map(|&x| {
            let x = to_f64(x);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update and returns the pre-clipping gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<T>, mut grads: Vec<Tensor<T>>) -> f64 {
        assert_eq!(grads.len(), store.len(), "gradient count");
        let norm = global_norm(&grads);
        if let Some(max) = self.cfg.max_grad_norm {
            if norm > max && norm.is_finite() {
                let s: T = lit(max / norm);
                for g in &mut grads {
                    g.data_mut().iter_mut().for_each(|x| *x *= s);
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1: T = lit(self.cfg.beta1);
        let b2: T = lit(self.cfg.beta2);
        let one = T::one();
        let bc1: T = lit(1.0 - self.cfg.beta1.powi(t));
        let bc2: T = lit(1.0 - self.cfg.beta2.powi(t));
        let lr: T = lit(self.cfg.lr);
        let eps: T = lit(self.cfg.eps);
        let decay: T = lit(1.0 - self.cfg.lr * self.cfg.weight_decay);
        for (((p, g), m), v) in store
            .tensors_mut()
            .iter_mut()
            .zip(&grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pw, &gw), mw), vw) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mw = b1 * *mw + (one - b1) * gw;
                *vw = b2 * *vw + (one - b2) * gw * gw;
                let mhat = *mw / bc1;
                let vhat = *vw / bc2;
                *pw = *pw * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut s = ParamStore::<f64>::new();
        s.add("x", Tensor::from_vec(1, 2, vec![1.0, -1.0]).unwrap());
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            max_grad_norm: None,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        opt.step(
            &mut s,
            vec![Tensor::from_vec(1, 2, vec![3.0, -0.5]).unwrap()],
        );
        let x = s.flatten();
        assert!((x[0] - 0.9).abs() < 1e-6);
        assert!((x[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_reports_raw_norm() {
        let mut s = ParamStore::<f64>::new();
        s.add("x", Tensor::zeros(1, 2));
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let n = opt.step(
            &mut s,
            vec![Tensor::from_vec(1, 2, vec![3.0, 4.0]).unwrap()],
        );
        assert!((n - 5.0).abs() < 1e-12);
    }

    #[test]
    fn minimises_quadratic() {
        let mut s = ParamStore::<f64>::new();
        s.add("x", Tensor::from_vec(1, 1, vec![5.0]).unwrap());
        let cfg = AdamWConfig {
            lr: 0.05,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        for _ in 0..2000 {
            let x = s.flatten()[0];
            opt.step(&mut s, vec![Tensor::scalar(2.0 * (x - 1.0))]);
        }
        assert!((s.flatten()[0] - 1.0).abs() < 1e-2);
    }
}
