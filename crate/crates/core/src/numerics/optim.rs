use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.05;

/// AdamW with decoupled weight decay and bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub step: u64,
    /// First and second moments, one buffer per parameter in store order.
    #[serde(skip)]
    pub(crate) m: Vec<Vec<f64>>,
    #[serde(skip)]
    pub(crate) v: Vec<Vec<f64>>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new()
    }
}

impl AdamW {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    fn ensure_state(&mut self, store: &ParamStore) {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
            self.v = self.m.clone();
        }
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub(crate) fn set_moments(&mut self, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        self.m = m;
        self.v = v;
    }

    /// Applies one update to every trainable parameter. Frozen parameters are
    /// skipped entirely; a trainable parameter without a gradient is an error.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, weight_decay: f64) -> Result<()> {
        if let Some((_, p)) = store
            .iter()
            .find(|(_, p)| !p.frozen && p.tensor.grad().is_none())
        {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        self.ensure_state(store);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let grad = p.tensor.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.tensor.values_mut().iter_mut().enumerate() {
                let g = grad[j];
                *w -= lr * weight_decay * *w;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn store_with(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(value)).unwrap();
        s.get_mut(id).tensor.accumulate_grad(&[grad]);
        s
    }

    #[test]
    fn defaults_follow_reported_schedule() {
        assert_eq!(DEFAULT_LR, 1e-4);
        assert_eq!(DEFAULT_WEIGHT_DECAY, 0.05);
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let mut s = store_with(0.7, 0.0);
        AdamW::new().step(&mut s, 1e-3, 0.0).unwrap();
        assert_eq!(s.value(s.id("p").unwrap()).values()[0], 0.7);
    }

    #[test]
    fn first_step_matches_hand_recurrence() {
        let (lr, wd) = (1e-4, 0.05);
        let mut s = store_with(1.0, 1.0);
        AdamW::new().step(&mut s, lr, wd).unwrap();
        // t=1: m = 0.1, v = 0.001, mhat = 1, vhat = 1.
        let decayed = 1.0 - lr * wd * 1.0;
        let expected = decayed - lr * 1.0 / (1.0 + 1e-8);
        let got = s.value(s.id("p").unwrap()).values()[0];
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn missing_gradient_is_reported() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(1.0)).unwrap();
        let err = AdamW::new().step(&mut s, 1e-3, 0.0).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(name) if name == "w"));
    }

    #[test]
    fn frozen_parameters_are_bit_identical() {
        let mut s = store_with(0.3, 1.0);
        let id = s.id("p").unwrap();
        s.get_mut(id).frozen = true;
        let mut opt = AdamW::new();
        for _ in 0..10 {
            opt.step(&mut s, 1e-2, 0.05).unwrap();
        }
        assert_eq!(s.value(id).values()[0].to_bits(), 0.3f64.to_bits());
    }
}
