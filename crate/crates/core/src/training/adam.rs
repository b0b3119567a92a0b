use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Module, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> AdamMoments<T> {
    pub fn zeros(n: usize) -> Self {
        AdamMoments {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }
}

/// One bias-corrected Adam update; `t` counts steps from 1.
pub fn adam_update<T: Real>(param: &mut [T], grad: &[T], state: &mut AdamMoments<T>, t: u64, cfg: &AdamConfig) {
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::one() - T::of(cfg.beta1.powi(t as i32));
    let c2 = T::one() - T::of(cfg.beta2.powi(t as i32));
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p -= lr * mh / (vh.sqrt() + eps);
    }
}

/// Adam over named parameters of one or more modules.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub t: u64,
    pub state: HashMap<String, AdamMoments<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            state: HashMap::new(),
        }
    }

    /// Applies `grads` to the trainable parameters of `modules`. A gradient
    /// for a frozen or unknown parameter is an invariant violation and
    /// nothing is updated.
    pub fn step(&mut self, modules: &mut [&mut dyn Module<T>], grads: &Gradients<T>) -> Result<()> {
        let mut known = HashMap::new();
        for m in modules.iter() {
            m.visit(&mut |p| {
                known.insert(p.name().to_string(), p.trainable);
            });
        }
        for name in grads.names() {
            match known.get(name) {
                Some(true) => {}
                Some(false) => {
                    return Err(Error::Invariant(format!("gradient update for frozen parameter `{name}`")))
                }
                None => return Err(Error::Invariant(format!("gradient for unknown parameter `{name}`"))),
            }
        }
        self.t += 1;
        let (t, cfg) = (self.t, self.cfg);
        let state = &mut self.state;
        for m in modules.iter_mut() {
            m.visit_mut(&mut |p| {
                if let Some(g) = grads.get(p.name()) {
                    let s = state
                        .entry(p.name().to_string())
                        .or_insert_with(|| AdamMoments::zeros(g.len()));
                    adam_update(p.value.data_mut(), g.data(), s, t, &cfg);
                }
            });
        }
        Ok(())
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut names: Vec<&String> = self.state.keys().collect();
        names.sort();
        let mut out = vec![("adam.t".to_string(), Tensor::scalar(T::of(self.t as f64)))];
        for n in names {
            let s = &self.state[n];
            let len = s.m.len();
            out.push((format!("adam.m.{n}"), Tensor::new(vec![len], s.m.clone()).expect("len > 0")));
            out.push((format!("adam.v.{n}"), Tensor::new(vec![len], s.v.clone()).expect("len > 0")));
        }
        out
    }

    pub fn from_tensors(cfg: AdamConfig, tensors: &[(String, Tensor<T>)]) -> Self {
        let mut opt = Adam::new(cfg);
        for (n, t) in tensors {
            if n == "adam.t" {
                opt.t = t.item().f64().round() as u64;
            } else if let Some(p) = n.strip_prefix("adam.m.") {
                opt.state
                    .entry(p.to_string())
                    .or_insert_with(|| AdamMoments::zeros(t.len()))
                    .m = t.data().to_vec();
            } else if let Some(p) = n.strip_prefix("adam.v.") {
                opt.state
                    .entry(p.to_string())
                    .or_insert_with(|| AdamMoments::zeros(t.len()))
                    .v = t.data().to_vec();
            }
        }
        opt
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_param() {
        let mut p = vec![1.5f64, -2.0];
        let mut s = AdamMoments::zeros(2);
        adam_update(&mut p, &[0.0, 0.0], &mut s, 1, &AdamConfig::default());
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig {
            lr: 0.1,
            eps: 0.0,
            ..Default::default()
        };
        let mut p = vec![0.0f64; 3];
        let mut s = AdamMoments::zeros(3);
        adam_update(&mut p, &[3.0, -0.25, 7.0], &mut s, 1, &cfg);
        for (a, b) in p.iter().zip([-0.1, 0.1, -0.1]) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn minimizes_a_parabola() {
        let cfg = AdamConfig {
            lr: 0.05,
            ..Default::default()
        };
        let mut p = vec![1.0f64];
        let mut s = AdamMoments::zeros(1);
        for t in 1..=500 {
            let g = 2.0 * p[0];
            adam_update(&mut p, &[g], &mut s, t, &cfg);
        }
        assert!(p[0].abs() < 0.05, "{}", p[0]);
    }
}
