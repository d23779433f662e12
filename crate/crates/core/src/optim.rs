//! Adam over the trainable tensors of a [`ParamStore`].

use std::collections::BTreeMap;

use controlsr_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Names with optimizer state.
    pub fn tracked(&self) -> impl Iterator<Item = &String> {
        self.moments.keys()
    }

    /// Applies one update. Gradients for frozen or unknown tensors are an error.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (lr, eps) = (self.lr, self.eps);
        for (name, g) in grads {
            match store.get(name) {
                Some(p) if p.trainable => {}
                Some(_) => return Err(Error::validation("optimizer", format!("gradient for frozen tensor {name:?}"))),
                None => return Err(Error::validation("optimizer", format!("gradient for unknown tensor {name:?}"))),
            }
            let w = store.tensor_mut(name).expect("checked above");
            w.expect_shape(g.shape())?;
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            for (((wi, &gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mh = mi.as_f64() / bc1;
                let vh = vi.as_f64() / bc2;
                *wi -= T::of(lr * mh / (vh.sqrt() + eps));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::full(&[2], 1.0), true).unwrap();
        let mut opt = Adam::new(0.1);
        let grads = BTreeMap::from([("w".to_string(), Tensor::from_vec(&[2], vec![3.0, -0.5]).unwrap())]);
        opt.step(&mut store, &grads).unwrap();
        let w = store.tensor("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::full(&[1], 5.0), true).unwrap();
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let w = store.tensor("w").unwrap().data()[0];
            let grads = BTreeMap::from([("w".to_string(), Tensor::full(&[1], 2.0 * (w - 2.0)))]);
            opt.step(&mut store, &grads).unwrap();
        }
        assert!((store.tensor("w").unwrap().data()[0] - 2.0).abs() < 1e-2);
    }

    #[test]
    fn refuses_frozen_gradients() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::full(&[1], 1.0), false).unwrap();
        let grads = BTreeMap::from([("w".to_string(), Tensor::full(&[1], 1.0))]);
        assert!(Adam::new(0.1).step(&mut store, &grads).is_err());
        assert_eq!(store.tensor("w").unwrap().data()[0], 1.0);
    }
}
