//! AdamW with bias correction and decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

pub struct AdamW {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step_count: u64,
    moments: Vec<Option<Moments>>,
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            eps,
            weight_decay,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One optimizer step over every trainable parameter carrying a
    /// gradient. Frozen parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bias1 = 1.0 - self.beta1.powf(t);
        let bias2 = 1.0 - self.beta2.powf(t);
        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), || None);
        }

        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(grad) = p.tensor.grad() else { continue };
            let grad = grad.to_vec();
            let slot = self.moments[id.index()].get_or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            if slot.m.len() != grad.len() {
                return Err(Error::InvalidArg(format!(
                    "optimizer state size changed for {}",
                    p.name
                )));
            }
            let values = p.tensor.values_mut();
            for i in 0..grad.len() {
                // decoupled weight decay, then bias-corrected Adam update
                values[i] *= 1.0 - self.learning_rate * self.weight_decay;
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * grad[i];
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = slot.m[i] / bias1;
                let v_hat = slot.v[i] / bias2;
                values[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "adamw_step", index: id.index() });
            }
        }
        Ok(())
    }
}

/// Scales every trainable gradient so the global norm does not exceed
/// `max_norm`.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) {
    let mut sq_sum = 0.0;
    for (_, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        if let Some(grad) = p.tensor.grad() {
            sq_sum += grad.iter().map(|g| g * g).sum::<f64>();
        }
    }
    let norm = sq_sum.sqrt();
    if norm <= max_norm || norm == 0.0 {
        return;
    }
    let scale = max_norm / norm;
    for (_, p) in store.iter_mut() {
        if !p.trainable {
            continue;
        }
        p.tensor.scale_grad(scale);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::full(1, 3, 1.5), true).unwrap();
        store.get_mut(id).tensor.accumulate_grad(&[0.0, 0.0, 0.0]);
        let mut opt = AdamW::new(1e-3, 0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut store).unwrap();
        assert_eq!(store.get(id).tensor.values(), &[1.5, 1.5, 1.5]);
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_learning_rate() {
        let lr = 1e-3;
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::scalar(0.0), true).unwrap();
        store.get_mut(id).tensor.accumulate_grad(&[1.0]);
        let mut opt = AdamW::new(lr, 0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut store).unwrap();
        let delta = store.get(id).tensor.values()[0];
        assert!((delta + lr).abs() < 1e-6 * lr, "delta {delta}");
    }

    #[test]
    fn frozen_parameters_are_never_updated() {
        let mut store = ParamStore::new();
        let id = store.insert("frozen", Tensor::full(1, 2, 2.0), false).unwrap();
        store.get_mut(id).tensor.accumulate_grad(&[5.0, 5.0]);
        let mut opt = AdamW::new(0.1, 0.9, 0.999, 1e-8, 0.1);
        opt.step(&mut store).unwrap();
        assert_eq!(store.get(id).tensor.values(), &[2.0, 2.0]);
    }

    #[test]
    fn weight_decay_shrinks_parameters_without_gradient_coupling() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::scalar(10.0), true).unwrap();
        store.get_mut(id).tensor.accumulate_grad(&[0.0]);
        let mut opt = AdamW::new(0.1, 0.9, 0.999, 1e-8, 0.5);
        opt.step(&mut store).unwrap();
        let v = store.get(id).tensor.values()[0];
        assert!((v - 10.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn clip_rescales_only_when_norm_exceeds_bound() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::zeros(1, 2), true).unwrap();
        store.get_mut(id).tensor.accumulate_grad(&[3.0, 4.0]);
        clip_grad_norm(&mut store, 10.0);
        assert_eq!(store.get(id).tensor.grad().unwrap(), &[3.0, 4.0]);
        clip_grad_norm(&mut store, 1.0);
        let grad = store.get(id).tensor.grad().unwrap();
        let norm = (grad[0] * grad[0] + grad[1] * grad[1]).sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}
