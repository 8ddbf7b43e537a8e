//! AdamW with decoupled weight decay and a step-decay learning rate schedule.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First/second moment buffers and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<S> {
    pub config: AdamWConfig,
    pub step_count: u64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig, params: &ParamStore<S>) -> Self {
        let zeros = || params.iter().map(|p| alloc::vec![S::zero(); p.tensor.numel()]).collect();
        Self { config, step_count: 0, m: zeros(), v: zeros() }
    }

    /// One update at learning rate `lr`:
    ///
    /// ```text
    /// theta <- theta * (1 - lr * wd)
    /// m <- b1 m + (1 - b1) g;   v <- b2 v + (1 - b2) g^2
    /// theta <- theta - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
    /// ```
    ///
    /// Gradients are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<S>, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        for p in params.iter() {
            if p.grad.is_none() {
                return Err(contract(format!("parameter `{}` has no gradient", p.name)));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let decay = S::of(1.0 - lr * c.weight_decay);
        let (lr_s, eps) = (S::of(lr), S::of(c.eps));
        let (bc1, bc2) = (S::of(bc1), S::of(bc2));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.as_ref().expect("checked above");
            for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w *= decay;
                *mi = b1 * *mi + (S::one() - b1) * gi;
                *vi = b2 * *vi + (S::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr_s * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Learning rate multiplied by `factor` once each milestone epoch is reached.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule {
    pub base: f64,
    pub factor: f64,
    pub milestones: Vec<usize>,
}

impl StepSchedule {
    pub fn new(base: f64, factor: f64, milestones: Vec<usize>) -> Self {
        Self { base, factor, milestones }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.factor.powi(drops as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(value: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.register("w", Tensor::scalar(value)).unwrap();
        s.get_mut(id).grad = Some(alloc::vec![grad]);
        s
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut s = one_param(0.75, 0.0);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &s);
        opt.step(&mut s, 1e-3).unwrap();
        assert_eq!(s.iter().next().unwrap().tensor.data(), &[0.75]);
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn single_step_matches_hand_calculation() {
        // theta = 2, g = 0.5, lr = 0.1, wd = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8.
        // decayed: 2 * (1 - 0.001) = 1.998
        // m = 0.05, v = 0.00025; mhat = 0.5, vhat = 0.25; step = 0.1 * 0.5 / (0.5 + 1e-8)
        let mut s = one_param(2.0, 0.5);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        opt.step(&mut s, 0.1).unwrap();
        let expected = 1.998 - 0.1 * 0.5 / (0.5 + 1e-8);
        let got = s.iter().next().unwrap().tensor.data()[0];
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!((opt.m[0][0] - 0.05).abs() < 1e-15);
        assert!((opt.v[0][0] - 0.00025).abs() < 1e-15);
        assert_eq!(s.iter().next().unwrap().grad.as_deref(), Some(&[0.5][..]));
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut s = ParamStore::<f64>::new();
        s.zeros("encoder.block0.mha.wq", &[2]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let err = opt.step(&mut s, 1e-3).unwrap_err();
        assert!(format!("{err}").contains("encoder.block0.mha.wq"));
    }

    #[test]
    fn step_schedule_drops_at_milestones() {
        let s = StepSchedule::new(1e-4, 0.1, alloc::vec![50, 120]);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b;
        assert!(close(s.lr(0), 1e-4));
        assert!(close(s.lr(49), 1e-4));
        assert!(close(s.lr(50), 1e-5));
        assert!(close(s.lr(119), 1e-5));
        assert!(close(s.lr(120), 1e-6));
    }
}
