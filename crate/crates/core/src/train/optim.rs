use crate::error::{Error, Result};
use crate::math::{Gradients, ParamStore, Tensor};

use super::TrainConfig;

/// Linear warmup from 0 to the peak rate, then linear decay to 0 at
/// `total_steps`.
pub fn lr_schedule(step: u64, config: &TrainConfig) -> f64 {
    let peak = config.learning_rate;
    let warmup = config.warmup_steps as f64;
    let total = config.total_steps as f64;
    let s = step as f64;
    if s < warmup {
        return peak * (s / warmup);
    }
    if total <= warmup {
        return if s <= total { peak } else { 0.0 };
    }
    (peak * ((total - s) / (total - warmup))).max(0.0)
}

/// Rescales `grads` in place so the norm over trainable parameters is at
/// most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, store: &ParamStore, max_norm: f64) -> Result<f64> {
    let norm = grads.norm_where(|id| !store.get(id).frozen);
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {norm}")));
    }
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update of every unfrozen parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::dim("adam step", &[store.len()], &[grads.len(), self.m.len()]));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.get(id).frozen {
                continue;
            }
            let g = grads.get(id).data();
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = store.value_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(lr: f64, warmup: usize, total: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            warmup_steps: warmup,
            total_steps: total,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_points() {
        let c = cfg(3e-5, 2000, 12000);
        assert_eq!(lr_schedule(0, &c), 0.0);
        assert_eq!(lr_schedule(2000, &c), 3e-5);
        assert!((lr_schedule(7000, &c) - 1.5e-5).abs() < 1e-18);
        assert_eq!(lr_schedule(12000, &c), 0.0);
        assert_eq!(lr_schedule(20000, &c), 0.0);
        assert!((lr_schedule(1000, &c) - 1.5e-5).abs() < 1e-18);
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        let c = cfg(1e-3, 0, 10);
        assert_eq!(lr_schedule(0, &c), 1e-3);
        assert!((lr_schedule(5, &c) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.normal("a", &[3, 4], 1.0, &mut rng);
        store.normal("b", &[5], 1.0, &mut rng);
        let before = store.clone();
        let mut adam = Adam::new(&store);
        let grads = Gradients::zeros_like(&store);
        for _ in 0..5 {
            adam.step(&mut store, &grads, 0.1).unwrap();
        }
        for ((_, a), (_, b)) in store.iter().zip(before.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let mut store = ParamStore::new();
        let id = store.constant("w", &[2], 1.0);
        let mut adam = Adam::new(&store);
        let mut grads = Gradients::zeros_like(&store);
        grads.get_mut(id).data_mut().copy_from_slice(&[0.5, -2.0]);
        adam.step(&mut store, &grads, 0.01).unwrap();
        let w = store.value(id).data();
        assert!((w[0] - 0.99).abs() < 1e-9);
        assert!((w[1] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut store = ParamStore::new();
        let a = store.constant("enc.w", &[2], 1.0);
        let b = store.constant("dec.w", &[2], 1.0);
        store.set_frozen(a, true);
        let mut adam = Adam::new(&store);
        let mut grads = Gradients::zeros_like(&store);
        grads.get_mut(a).data_mut().fill(1.0);
        grads.get_mut(b).data_mut().fill(1.0);
        adam.step(&mut store, &grads, 0.1).unwrap();
        assert_eq!(store.value(a).data(), &[1.0, 1.0]);
        assert!(store.value(b).data()[0] < 1.0);
    }

    #[test]
    fn clipping_caps_trainable_norm() {
        let mut store = ParamStore::new();
        let a = store.constant("a", &[2], 0.0);
        let f = store.constant("f", &[1], 0.0);
        store.set_frozen(f, true);
        let mut grads = Gradients::zeros_like(&store);
        grads.get_mut(a).data_mut().copy_from_slice(&[3.0, 4.0]);
        grads.get_mut(f).data_mut()[0] = 100.0;
        let norm = clip_grad_norm(&mut grads, &store, 0.1).unwrap();
        assert_eq!(norm, 5.0);
        let after = grads.norm_where(|id| id == a);
        assert!((after - 0.1).abs() < 1e-15);

        grads.get_mut(a).data_mut()[0] = f64::NAN;
        assert!(matches!(clip_grad_norm(&mut grads, &store, 0.1), Err(Error::Numeric(_))));
    }
}
