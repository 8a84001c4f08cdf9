//! AdamW with decoupled weight decay, cosine annealing, and norm clipping.

use crate::autodiff::{ParamGrads, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First and second moments for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = ParamGrads::zeros_like(store).0;
        AdamW {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every parameter in `store`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) -> Result<()> {
        if grads.0.len() != self.m.len() {
            return Err(Error::dim(format!(
                "{} gradients for {} parameters",
                grads.0.len(),
                self.m.len()
            )));
        }
        for (id, g) in store.ids().zip(&grads.0) {
            if let Some(k) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::numeric(format!(
                    "non-finite gradient {} at {}[{k}] on step {}",
                    g[k],
                    store.name(id),
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads.0[k]);
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let (mh, vh) = (m[i] / bc1, v[i] / bc2);
                p[i] *= 1.0 - lr * c.weight_decay;
                p[i] -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// `min + ½(base − min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64, min_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(values).unwrap());
        s
    }

    fn adam(s: &ParamStore, wd: f64) -> AdamW {
        AdamW::new(
            s,
            AdamConfig {
                weight_decay: wd,
                ..AdamConfig::default()
            },
        )
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut s = store(vec![0.3, -1.0]);
        let mut opt = adam(&s, 0.0);
        opt.step(&mut s, &ParamGrads(vec![vec![0.0, 0.0]]), 1e-3).unwrap();
        assert_eq!(s.get(s.find("w").unwrap()).data(), &[0.3, -1.0]);
    }

    #[test]
    fn first_step_hand_computed() {
        let mut s = store(vec![0.5]);
        let mut opt = adam(&s, 0.0);
        opt.step(&mut s, &ParamGrads(vec![vec![1.0]]), 1e-3).unwrap();
        let want = 0.5 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((s.get(s.find("w").unwrap()).data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_shrinks() {
        let mut s = store(vec![2.0]);
        let mut opt = adam(&s, 1e-2);
        opt.step(&mut s, &ParamGrads(vec![vec![0.0]]), 1e-3).unwrap();
        assert_eq!(s.get(s.find("w").unwrap()).data()[0], 2.0 * (1.0 - 1e-3 * 1e-2));
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut s = store(vec![0.7, -0.2]);
        let mut opt = adam(&s, 1e-2);
        opt.step(&mut s, &ParamGrads(vec![vec![3.0, -1.0]]), 0.0).unwrap();
        assert_eq!(s.get(s.find("w").unwrap()).data(), &[0.7, -0.2]);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = store(vec![0.7]);
        let mut opt = adam(&s, 1e-2);
        let err = opt.step(&mut s, &ParamGrads(vec![vec![f64::NAN]]), 1e-3).unwrap_err();
        assert!(err.to_string().contains("w[0]"));
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5), 1e-3);
        assert!((cosine_lr(100, 100, 1e-3, 1e-5) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3, 1e-5) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        let lrs: Vec<f64> = (0..=100).map(|s| cosine_lr(s, 100, 1e-3, 1e-5)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn clipping() {
        let mut g = ParamGrads(vec![vec![3.0, 4.0]]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-15);
        let mut small = ParamGrads(vec![vec![0.3]]);
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small.0[0], vec![0.3]);
    }
}
