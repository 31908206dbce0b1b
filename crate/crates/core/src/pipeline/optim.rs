//! AdamW with decoupled weight decay and bias-corrected moments.

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub weight_decay: f64,
    /// Updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    /// Zero moments shaped like every parameter of `store`.
    pub fn new(store: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamW {
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the accumulated `.grad` of every parameter.
    /// Nothing is modified when any gradient is non-finite.
    pub fn update(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} moments for {} parameters",
                self.m.len(),
                store.len()
            )));
        }
        for (_, p) in store.iter() {
            if !p.grad.all_finite() {
                return Err(Error::Training {
                    step: self.step,
                    detail: format!("non-finite gradient in {}", p.name),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grads = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[i].to_f64_lossy();
                let mi = BETA1 * md[i].to_f64_lossy() + (1.0 - BETA1) * g;
                let vi = BETA2 * vd[i].to_f64_lossy() + (1.0 - BETA2) * g * g;
                md[i] = T::from_f64_lossy(mi);
                vd[i] = T::from_f64_lossy(vi);
                let step = lr * (mi / bc1) / ((vi / bc2).sqrt() + EPS);
                *w = T::from_f64_lossy(w.to_f64_lossy() * decay - step);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all accumulated gradients.
pub fn grad_norm<T: Scalar>(store: &ParamStore<T>) -> f64 {
    store
        .iter()
        .flat_map(|(_, p)| p.grad.data().iter())
        .map(|g| g.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(store);
    if max_norm > 0.0 && norm > max_norm {
        let k = T::from_f64_lossy(max_norm / norm);
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = *g * k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(value: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(value)).unwrap();
        s.get_mut(id).grad = Tensor::scalar(grad);
        s
    }

    #[test]
    fn first_step_by_hand() {
        let (lr, wd) = (5e-5, 1e-4);
        let mut s = one(0.7, 1.0);
        let mut opt = AdamW::new(&s, wd);
        opt.update(&mut s, lr).unwrap();
        // m_hat = 1, v_hat = 1 after bias correction
        let expect = 0.7 * (1.0 - lr * wd) - lr * 1.0 / (1.0 + 1e-8);
        assert!((s.value(crate::numerics::ParamId(0)).data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_no_decay_is_a_no_op() {
        let mut s = one(0.7, 0.0);
        let mut opt = AdamW::new(&s, 0.0);
        opt.update(&mut s, 1e-3).unwrap();
        assert_eq!(s.value(crate::numerics::ParamId(0)).data()[0], 0.7);
    }

    #[test]
    fn non_finite_grad_names_the_param() {
        let mut s = one(0.7, f64::NAN);
        let mut opt = AdamW::new(&s, 0.0);
        match opt.update(&mut s, 1e-3) {
            Err(Error::Training { detail, .. }) => assert!(detail.contains('w')),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.value(crate::numerics::ParamId(0)).data()[0], 0.7);
    }
}
