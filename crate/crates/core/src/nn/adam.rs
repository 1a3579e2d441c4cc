//! Adam optimizer over a [`ParamStore`].

use super::graph::Graph;
use super::params::{Bound, ParamStore};
use super::tensor::Tensor;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    mask: Option<Vec<bool>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64) -> Self {
        let m = store
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.shape()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m,
            v,
            mask: None,
        }
    }

    /// Restrict updates to entries whose name matches the predicate.
    /// Lets a generator step ignore discriminator gradients (and vice versa)
    /// when both families live in one store.
    pub fn with_mask(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, pred: impl Fn(&str) -> bool) -> Self {
        let mut adam = Self::new(store, lr, beta1, beta2);
        adam.mask = Some(store.entries().iter().map(|e| pred(&e.name)).collect());
        adam
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Apply one update using the gradients accumulated in `g` for the
    /// parameters bound via `bound`. Entries without a gradient are skipped.
    pub fn step(&mut self, store: &mut ParamStore, g: &Graph, bound: &Bound) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, var) in bound.iter() {
            if let Some(mask) = &self.mask {
                if !mask[idx] {
                    continue;
                }
            }
            let Some(grad) = g.grad(var) else { continue };
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let p = store.entries_mut()[idx].value.data_mut();
            for ((pi, mi), (vi, gi)) in p
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut().zip(grad.data()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
