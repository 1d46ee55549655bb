//! AdamW with decoupled weight decay and a constant learning rate.

use std::collections::BTreeMap;

use crate::error::{shape_err, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter named in `grads`. Parameters without a
    /// gradient entry are left untouched, including by weight decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (name, grad) in grads {
            let Some(p) = store.get_mut(name) else {
                return Err(crate::error::Error::UnknownParam(name.clone()));
            };
            if p.shape() != grad.shape() {
                return Err(shape_err!("adamw {name}: param {:?} grad {:?}", p.shape(), grad.shape()));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape()));
            let (b1, b2) = (self.beta1, self.beta2);
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *pi = *pi * decay - self.lr * update;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        let mut opt = AdamW::new(0.1, 0.0);
        let grads = BTreeMap::from([("w".to_string(), Tensor::from_vec(&[2], vec![3.0, -0.5]).unwrap())]);
        opt.step(&mut store, &grads).unwrap();
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] + 0.9).abs() < 1e-7, "{w:?}");
    }

    #[test]
    fn decay_is_decoupled_from_the_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(&[1], vec![2.0]).unwrap());
        let mut opt = AdamW::new(0.1, 0.5);
        let grads = BTreeMap::from([("w".to_string(), Tensor::zeros(&[1]))]);
        opt.step(&mut store, &grads).unwrap();
        assert_eq!(store.get("w").unwrap().data()[0], 2.0 * (1.0 - 0.05));
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise_unchanged() {
        let mut store = ParamStore::new();
        let before = Tensor::from_vec(&[3], vec![0.1, -7.25, 1e-30]).unwrap();
        store.insert("w", before.clone());
        let mut opt = AdamW::new(0.0, 1e-2);
        let grads = BTreeMap::from([("w".to_string(), Tensor::from_vec(&[3], vec![1.0, 2.0, -3.0]).unwrap())]);
        for _ in 0..3 {
            opt.step(&mut store, &grads).unwrap();
        }
        assert_eq!(store.get("w").unwrap(), &before);
    }
}
