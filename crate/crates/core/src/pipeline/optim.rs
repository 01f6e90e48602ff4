//! Adam over a fixed, ordered list of parameter stores.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{lit, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Scalar = f32> {
    pub config: AdamConfig,
    /// Updates applied so far.
    pub t: u64,
    /// First and second moments, per store, per tensor.
    pub m: Vec<Vec<Tensor<T>>>,
    pub v: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, stores: &[&ParamStore<T>]) -> Self {
        let zeros = |s: &&ParamStore<T>| s.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            config,
            t: 0,
            m: stores.iter().map(zeros).collect(),
            v: stores.iter().map(zeros).collect(),
        }
    }

    /// One update with per-store, per-tensor gradients in store order.
    pub fn step(&mut self, stores: &mut [&mut ParamStore<T>], grads: &[Vec<Tensor<T>>]) -> Result<()> {
        if stores.len() != self.m.len() || grads.len() != stores.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} stores, got {} stores and {} gradient sets",
                self.m.len(),
                stores.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (lit::<T>(c.beta1), lit::<T>(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let step = lit::<T>(c.lr * bc2.sqrt() / bc1);
        let eps = lit::<T>(c.eps * bc2.sqrt());
        for (si, store) in stores.iter_mut().enumerate() {
            for (ti, p) in store.tensors_mut().iter_mut().enumerate() {
                let g = &grads[si][ti];
                if g.shape() != p.shape() {
                    return Err(Error::dim("adam", format!("gradient {:?} for weight {:?}", g.shape(), p.shape())));
                }
                let m = self.m[si][ti].data_mut();
                let v = self.v[si][ti].data_mut();
                for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                    *mi = b1 * *mi + (T::one() - b1) * gi;
                    *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                    *w -= step * *mi / (vi.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Sums per-example gradient sets in order.
pub fn sum_grads<T: Scalar>(mut sets: impl Iterator<Item = Vec<Vec<Tensor<T>>>>) -> Option<Vec<Vec<Tensor<T>>>> {
    let mut acc = sets.next()?;
    for set in sets {
        for (a, b) in acc.iter_mut().flatten().zip(set.iter().flatten()) {
            a.add_assign(b);
        }
    }
    Some(acc)
}
