use std::collections::BTreeMap;

use crate::nn::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Parameter update rule keyed by parameter name. Frozen parameters are skipped.
pub trait Optimizer<T> {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: T);
}

/// Stochastic gradient descent with classical momentum:
/// `v = mu * v + g`, `p -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    momentum: T,
    velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: T) -> Self {
        Self { momentum, velocity: BTreeMap::new() }
    }
}

impl<T: Scalar> Optimizer<T> for Sgd<T> {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: T) {
        for (name, g) in grads {
            if params.is_frozen(name) {
                continue;
            }
            let Some(p) = params.get_mut(name) else { continue };
            let v = self.velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (vv, &gv) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = self.momentum * *vv + gv;
            }
            p.axpy(-lr, v);
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    beta1: T,
    beta2: T,
    eps: T,
    state: BTreeMap<String, (u32, Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: T, beta2: T) -> Self {
        Self { beta1, beta2, eps: T::lit(1e-8), state: BTreeMap::new() }
    }
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self::new(T::lit(0.9), T::lit(0.999))
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: T) {
        let one = T::one();
        for (name, g) in grads {
            if params.is_frozen(name) {
                continue;
            }
            let Some(p) = params.get_mut(name) else { continue };
            let (t, m, v) = self
                .state
                .entry(name.clone())
                .or_insert_with(|| (0, Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            *t += 1;
            let c1 = one - self.beta1.powi(*t as i32);
            let c2 = one - self.beta2.powi(*t as i32);
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (one - self.beta1) * gv;
                v[i] = self.beta2 * v[i] + (one - self.beta2) * gv * gv;
                *pv -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: T) -> T {
    let norm = grads.values().map(Tensor::sq_norm).sum::<T>().sqrt();
    if norm > max_norm && norm > T::zero() {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
    norm
}

/// Adds `src` gradients into `dst`, scaled by `weight`.
pub fn accumulate<T: Scalar>(dst: &mut BTreeMap<String, Tensor<T>>, src: BTreeMap<String, Tensor<T>>, weight: T) {
    for (k, g) in src {
        match dst.get_mut(&k) {
            Some(acc) => acc.axpy(weight, &g),
            None => {
                dst.insert(k, g.map(|v| v * weight));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_accumulates_velocity() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::scalar(1.0));
        let mut opt = Sgd::new(0.9);
        let grads: BTreeMap<_, _> = [("w".to_string(), Tensor::scalar(1.0))].into();
        opt.step(&mut store, &grads, 0.1);
        assert!((store.get("w").unwrap().data()[0] - 0.9).abs() < 1e-12);
        opt.step(&mut store, &grads, 0.1);
        // v = 0.9 * 1 + 1 = 1.9
        assert!((store.get("w").unwrap().data()[0] - 0.71).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::<f32>::new();
        store.insert("gen.w", Tensor::scalar(1.0));
        store.freeze_prefix("gen.");
        let grads: BTreeMap<_, _> = [("gen.w".to_string(), Tensor::scalar(5.0))].into();
        Sgd::new(0.9).step(&mut store, &grads, 1.0);
        assert_eq!(store.get("gen.w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap());
        let grads: BTreeMap<_, _> = [("w".to_string(), Tensor::from_vec(&[2], vec![3.0, -0.01]).unwrap())].into();
        Adam::default().step(&mut store, &grads, 0.1);
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-5);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut grads: BTreeMap<_, _> =
            [("a".to_string(), Tensor::<f64>::from_vec(&[2], vec![3.0, 4.0]).unwrap())].into();
        let before = clip_grad_norm(&mut grads, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((grads["a"].sq_norm().sqrt() - 1.0).abs() < 1e-12);
    }
}
