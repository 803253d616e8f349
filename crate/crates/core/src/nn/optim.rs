//! Adam with bias correction and a linear learning-rate decay schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Linearly decayed learning rate: `base_lr * (1 - step / total_steps)`.
pub fn lr_at(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    assert!(step <= total_steps, "step {step} past total {total_steps}");
    base_lr * (1.0 - step as f64 / total_steps as f64)
}

/// Per-parameter first/second moment estimates, keyed by parameter name.
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    states: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            states: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Advances the shared timestep; call once per batch before the
    /// per-parameter updates.
    pub fn begin_step(&mut self) {
        self.step_count += 1;
    }

    /// One Adam update. `weight_decay` adds classic L2 (`g + wd * param`)
    /// before the moment updates. Non-finite gradients abort the step.
    pub fn step(
        &mut self,
        name: &str,
        param: &mut Tensor<T>,
        grad: &Tensor<T>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::shape("adam_step", param.shape(), grad.shape()));
        }
        if !grad.all_finite() {
            return Err(Error::contract(format!("non-finite gradient for '{name}'")));
        }
        if self.step_count == 0 {
            return Err(Error::contract("adam step before begin_step"));
        }
        let (m, v) = self
            .states
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(param.shape().to_vec()), Tensor::zeros(param.shape().to_vec())));
        let t = self.step_count as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let corr1 = T::from_f64(1.0 - self.beta1.powi(t));
        let corr2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr_t = T::from_f64(lr);
        let eps = T::from_f64(self.eps);
        let wd = T::from_f64(weight_decay);
        for ((p, g0), (mi, vi)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data().iter())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            let g = *g0 + wd * *p;
            *mi = b1 * *mi + one_m_b1 * g;
            *vi = b2 * *vi + one_m_b2 * g * g;
            let m_hat = *mi / corr1;
            let v_hat = *vi / corr2;
            *p -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }

    /// Moment tensors for persistence, in deterministic name order.
    pub fn states(&self) -> impl Iterator<Item = (&str, &Tensor<T>, &Tensor<T>)> {
        self.states.iter().map(|(k, (m, v))| (k.as_str(), m, v))
    }

    pub fn restore(&mut self, step_count: u64, states: Vec<(String, Tensor<T>, Tensor<T>)>) {
        self.step_count = step_count;
        self.states = states.into_iter().map(|(k, m, v)| (k, (m, v))).collect();
    }
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_endpoints_and_midpoint() {
        assert_eq!(lr_at(0, 100, 0.5), 0.5);
        assert_eq!(lr_at(100, 100, 0.5), 0.0);
        assert_eq!(lr_at(50, 100, 0.5), 0.25);
    }

    #[test]
    fn lr_schedule_is_nonincreasing() {
        let mut prev = f64::INFINITY;
        for step in 0..=200 {
            let lr = lr_at(step, 200, 1e-2);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // g = 1, lr = 0.1, fresh state: update is -0.1 / (1 + eps)
        let mut adam = Adam::<f64>::new();
        adam.begin_step();
        let mut p = Tensor::from_slice(&[0.0]);
        adam.step("p", &mut p, &Tensor::from_slice(&[1.0]), 0.1, 0.0).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-12, "{}", p.data()[0]);
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut adam = Adam::<f64>::new();
        let mut p = Tensor::from_slice(&[1.0, -2.0]);
        // park some momentum first, then feed zero gradients
        adam.begin_step();
        adam.step("p", &mut p, &Tensor::from_slice(&[0.5, -0.5]), 0.0, 0.0).unwrap();
        let before = p.data().to_vec();
        adam.begin_step();
        adam.step("p", &mut p, &Tensor::from_slice(&[0.0, 0.0]), 0.0, 0.0).unwrap();
        assert_eq!(p.data(), before.as_slice());
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut adam = Adam::<f64>::new();
        adam.begin_step();
        let mut p = Tensor::from_slice(&[0.0]);
        let err = adam.step("p", &mut p, &Tensor::from_slice(&[f64::NAN]), 0.1, 0.0);
        assert!(err.is_err());
    }

    #[test]
    fn weight_decay_shrinks_parameters() {
        let mut adam = Adam::<f64>::new();
        adam.begin_step();
        let mut p = Tensor::from_slice(&[2.0]);
        adam.step("p", &mut p, &Tensor::from_slice(&[0.0]), 0.1, 0.01).unwrap();
        assert!(p.data()[0] < 2.0);
    }
}
