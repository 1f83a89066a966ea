//! AdamW with decoupled weight decay and a warm-up plus cosine schedule.

use alloc::vec::Vec;

use crate::error::{config_err, contract_err, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            weight_decay: 5e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|p| alloc::vec![0.0; p.tensor.len()])
                .collect()
        };
        OptimState {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// One update of every parameter. Decay applies only to parameters flagged
    /// for it, and before the moment-based step.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(contract_err!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.first.len(),
                store.len()
            ));
        }
        for (id, g) in store.ids().zip(grads) {
            if g.len() != store.tensor(id).len() {
                return Err(contract_err!(
                    "gradient for {} has {} values, parameter has {}",
                    store.get(id).name,
                    g.len(),
                    store.tensor(id).len()
                ));
            }
        }
        self.step += 1;
        let AdamWConfig {
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(beta1, t);
        let c2 = 1.0 - libm::pow(beta2, t);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let decay = if store.get(id).decay {
                weight_decay
            } else {
                0.0
            };
            let w = store.tensor_mut(id).data_mut();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((w, g), m), v) in w
                .iter_mut()
                .zip(&grads[i])
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *w -= lr * decay * *w;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (libm::sqrt(v_hat) + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global 2-norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().flatten().map(|g| g * g).sum::<f64>());
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub lr_base: f64,
    pub lr_min: f64,
}

impl Schedule {
    pub fn new(warmup_epochs: f64, total_epochs: f64, lr_base: f64, lr_min: f64) -> Result<Self> {
        if !(0.0 <= warmup_epochs && warmup_epochs < total_epochs) {
            return Err(config_err!(
                "warm-up {warmup_epochs} must lie in [0, total epochs {total_epochs})"
            ));
        }
        if !(lr_base >= lr_min && lr_min >= 0.0) {
            return Err(config_err!(
                "need lr_base {lr_base} >= lr_min {lr_min} >= 0"
            ));
        }
        Ok(Schedule {
            warmup_epochs,
            total_epochs,
            lr_base,
            lr_min,
        })
    }

    /// Learning rate at a fractional epoch position.
    pub fn lr_at(&self, epoch: f64) -> f64 {
        let e = epoch.clamp(0.0, self.total_epochs);
        if e < self.warmup_epochs {
            return self.lr_base * e / self.warmup_epochs;
        }
        let progress = (e - self.warmup_epochs) / (self.total_epochs - self.warmup_epochs);
        self.lr_min
            + 0.5
                * (self.lr_base - self.lr_min)
                * (1.0 + libm::cos(core::f64::consts::PI * progress))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;
    use proptest::prelude::*;

    fn store(values: &[f64], decay: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.add(
            "w",
            Tensor::new(&[values.len()], values.to_vec()).unwrap(),
            decay,
        );
        s
    }

    #[test]
    fn zero_grad_without_decay_is_a_fixed_point() {
        let mut s = store(&[1.0, -2.0, 3.0], true);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut st = OptimState::new(&s, cfg);
        for _ in 0..5 {
            st.step(&mut s, &[vec![0.0; 3]], 1e-2).unwrap();
        }
        assert_eq!(s.tensor(s.find("w").unwrap()).data(), &[1.0, -2.0, 3.0]);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_by_hand() {
        let mut s = store(&[1.0], true);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut st = OptimState::new(&s, cfg);
        st.step(&mut s, &[vec![1.0]], 0.1).unwrap();
        let w = s.tensor(s.find("w").unwrap()).data()[0];
        assert!((w - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn decay_contracts_toward_zero_only_when_flagged() {
        let mut s = store(&[2.0, -3.0], true);
        let mut st = OptimState::new(&s, AdamWConfig::default());
        st.step(&mut s, &[vec![0.0; 2]], 0.1).unwrap();
        let w = s.tensor(s.find("w").unwrap()).data().to_vec();
        assert!(w[0] < 2.0 && w[0] > 0.0 && w[1] > -3.0 && w[1] < 0.0);

        let mut s = store(&[2.0], false);
        let mut st = OptimState::new(&s, AdamWConfig::default());
        st.step(&mut s, &[vec![0.0]], 0.1).unwrap();
        assert_eq!(s.tensor(s.find("w").unwrap()).data(), &[2.0]);
    }

    #[test]
    fn gradient_mismatch_is_a_contract_error() {
        let mut s = store(&[1.0, 2.0], true);
        let mut st = OptimState::new(&s, AdamWConfig::default());
        assert!(st.step(&mut s, &[], 0.1).is_err());
        assert!(st.step(&mut s, &[vec![0.0]], 0.1).is_err());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn schedule_landmarks() {
        let s = Schedule::new(10.0, 300.0, 1e-3, 1e-5).unwrap();
        assert_eq!(s.lr_at(0.0), 0.0);
        assert_eq!(s.lr_at(10.0), 1e-3);
        assert!((s.lr_at(155.0) - (1e-3 + 1e-5) / 2.0).abs() < 1e-18);
        assert!((s.lr_at(300.0) - 1e-5).abs() < 1e-18);
        assert!((s.lr_at(5.0) - 5e-4).abs() < 1e-18);
        let ramp_end = 1e-3 * (10.0 - 1e-12) / 10.0;
        assert!((ramp_end - s.lr_at(10.0)).abs() < 1e-15);
        assert!(Schedule::new(10.0, 10.0, 1e-3, 0.0).is_err());
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut g = vec![vec![0.1]];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g, vec![vec![0.1]]);
    }

    proptest! {
        #[test]
        fn lr_stays_between_bounds(e in 0.0f64..50.0, warm in 0.0f64..10.0) {
            let s = Schedule::new(warm, 50.0, 1e-3, 1e-5).unwrap();
            let lr = s.lr_at(e);
            prop_assert!((0.0..=1e-3 + 1e-18).contains(&lr));
            if e >= warm {
                prop_assert!(lr >= 1e-5 - 1e-18);
            }
        }

        #[test]
        fn decay_shrinks_magnitude(w in prop::collection::vec(-5.0f64..5.0, 1..8), lr in 1e-4f64..1e-1) {
            prop_assume!(w.iter().all(|x| x.abs() > 1e-6));
            let mut s = store(&w, true);
            let mut st = OptimState::new(&s, AdamWConfig::default());
            st.step(&mut s, &[vec![0.0; w.len()]], lr).unwrap();
            for (a, b) in s.tensor(s.find("w").unwrap()).data().iter().zip(&w) {
                prop_assert!(a.abs() < b.abs() && a.signum() == b.signum());
            }
        }
    }
}
