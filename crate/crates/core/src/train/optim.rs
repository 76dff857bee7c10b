//! Adam with an inverse-square-root warm-up schedule and global-norm clipping.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Learning rate at 0-based `step`: linear warm-up to `peak`, then `∝ 1/sqrt(step)`.
pub fn learning_rate(peak: f64, warmup: usize, step: usize) -> f64 {
    let s = (step + 1) as f64;
    if warmup == 0 {
        return peak / s.sqrt();
    }
    let w = warmup as f64;
    peak * (s / w).min((w / s).sqrt())
}

/// Scale `grads` in place so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Per-parameter first and second moments plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    moments: Vec<Option<(Tensor, Tensor, u64)>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Self {
            config,
            moments: vec![None; store.len()],
        }
    }

    /// Apply one update. Parameters without a gradient this step are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        for (id, g) in grads {
            let slot = &mut self.moments[id.0];
            let (m, v, t) = slot.get_or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape()), 0));
            *t += 1;
            let bc1 = 1.0 - beta1.powi(*t as i32);
            let bc2 = 1.0 - beta2.powi(*t as i32);
            let p = store.value_mut(*id);
            for (((pv, mv), vv), gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Moments as named tensors (`m.<param>`, `v.<param>`) plus per-parameter step counts.
    pub fn export(&self, store: &ParamStore) -> (Vec<(String, Tensor)>, Vec<(String, u64)>) {
        let mut tensors = Vec::new();
        let mut counts = Vec::new();
        for (i, slot) in self.moments.iter().enumerate() {
            if let Some((m, v, t)) = slot {
                let name = &store.get(ParamId(i)).name;
                tensors.push((format!("m.{name}"), m.clone()));
                tensors.push((format!("v.{name}"), v.clone()));
                counts.push((name.clone(), *t));
            }
        }
        (tensors, counts)
    }

    pub fn import(
        config: AdamConfig,
        store: &ParamStore,
        tensors: &[(String, Tensor)],
        counts: &[(String, u64)],
    ) -> Result<Self> {
        let mut adam = Self::new(config, store);
        let find = |n: &str| tensors.iter().find(|(k, _)| k == n).map(|(_, t)| t.clone());
        for (name, t) in counts {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter {name}")))?;
            let (m, v) = match (find(&format!("m.{name}")), find(&format!("v.{name}"))) {
                (Some(m), Some(v)) => (m, v),
                _ => return Err(Error::Checkpoint(format!("incomplete optimizer state for {name}"))),
            };
            if m.shape() != store.value(id).shape() || v.shape() != store.value(id).shape() {
                return Err(Error::Checkpoint(format!("optimizer state shape mismatch for {name}")));
            }
            adam.moments[id.0] = Some((m, v, *t));
        }
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_at_warmup() {
        assert!((learning_rate(1e-3, 400, 399) - 1e-3).abs() < 1e-15);
        assert!((learning_rate(1e-3, 400, 0) - 1e-3 / 400.0).abs() < 1e-15);
        assert!((learning_rate(1e-3, 400, 1599) - 0.5e-3).abs() < 1e-15);
        assert!(learning_rate(1e-3, 400, 200) < learning_rate(1e-3, 400, 300));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![(ParamId(0), Tensor::new(vec![2], vec![3.0, 4.0]))];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].1.sq_norm() - 1.0).abs() < 1e-12);
        let mut small = vec![(ParamId(0), Tensor::new(vec![2], vec![0.3, 0.4]))];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].1.data(), &[0.3, 0.4]);
    }

    #[test]
    fn first_adam_step_matches_closed_form() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![2], vec![1.0, -1.0]));
        let cfg = AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        };
        let mut adam = Adam::new(cfg, &store);
        adam.step(&mut store, &[(id, Tensor::new(vec![2], vec![0.5, -2.0]))], 0.1);
        // After bias correction the first step is lr * g / (|g| + eps).
        let want = [1.0 - 0.1 * 0.5 / (0.5 + 1e-9), -1.0 + 0.1 * 2.0 / (2.0 + 1e-9)];
        for (a, b) in store.value(id).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let (t, c) = adam.export(&store);
        assert_eq!(Adam::import(cfg, &store, &t, &c).unwrap(), adam);
    }
}
