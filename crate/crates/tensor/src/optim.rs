use std::collections::BTreeMap;

use crate::param::{ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with PyTorch's update rule and bias correction.
#[derive(Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: BTreeMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<ParamId, Tensor<T>>) {
        self.step += 1;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2_sqrt = T::from_f64_lossy((1.0 - self.beta2.powi(self.step)).sqrt());
        let step_size = T::from_f64_lossy(self.lr / bc1);
        let eps = T::from_f64_lossy(self.eps);
        for (&id, g) in grads {
            if store.entry(id).kind != ParamKind::Trainable {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let (md, vd) = (m.data_mut(), v.data_mut());
            let p = store.value_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + (T::one() - b1) * gi;
                vd[i] = b2 * vd[i] + (T::one() - b2) * gi * gi;
                let denom = vd[i].sqrt() / bc2_sqrt + eps;
                p[i] -= step_size * md[i] / denom;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{Builder, Init};

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut b = Builder::<f64>::new(0);
        let id = b.param("w", &[3], Init::Zeros);
        let mut store = b.finish();
        let mut grads = BTreeMap::new();
        grads.insert(id, Tensor::from_vec(&[3], vec![2.0, -0.5, 0.0]).unwrap());
        let mut adam = Adam::new(0.1);
        adam.step(&mut store, &grads);
        let p = store.get(id).data();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        assert!((p[0] + 0.1).abs() < 1e-7);
        assert!((p[1] - 0.1).abs() < 1e-7);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut b = Builder::<f32>::new(3);
        let id = b.param("w", &[4], Init::KaimingUniform { fan_in: 2 });
        let mut store = b.finish();
        let before = store.get(id).clone();
        let mut grads = BTreeMap::new();
        grads.insert(id, Tensor::full(&[4], 1.5f32));
        let mut adam = Adam::new(0.0);
        adam.step(&mut store, &grads);
        assert_eq!(store.get(id), &before);
    }
}
