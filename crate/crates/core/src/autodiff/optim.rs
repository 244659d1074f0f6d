use serde::{Deserialize, Serialize};

use super::params::{Gradients, Mat, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Linear warmup to the base rate, then constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if self.warmup == 0 || step >= self.warmup {
            self.base
        } else {
            self.base * (step + 1) as f64 / self.warmup as f64
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<Mat<T>>,
    v: Vec<Mat<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, p)| Mat::zeros(p.dim())).collect();
        Adam {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update at learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.t += 1;
        let c = &self.config;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let one = T::one();
        let bc1 = one - T::of(c.beta1.powi(self.t as i32));
        let bc2 = one - T::of(c.beta2.powi(self.t as i32));
        let lr_t = T::of(lr);
        let eps = T::of(c.eps);
        let decay = T::of(lr * c.weight_decay);
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr_t * mhat / (vhat.sqrt() + eps) + decay * *p;
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Mat::from_elem((1, 3), 5.0));
        let mut opt = Adam::new(&store, AdamConfig { lr: 0.1, ..AdamConfig::default() });
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::new(&store);
                let w = g.param(id);
                let sq = g.mul(w, w);
                let l = g.sum(sq);
                g.backward(l)
            };
            opt.step(&mut store, &grads, 0.1);
        }
        assert!(store.get(id).iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn warmup_is_linear() {
        let s = LrSchedule { base: 1.0, warmup: 4 };
        assert_eq!(s.at(0), 0.25);
        assert_eq!(s.at(3), 1.0);
        assert_eq!(s.at(100), 1.0);
    }
}
