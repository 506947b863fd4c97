//! Adam with decoupled weight decay, and global-norm gradient clipping.

use crate::tensor::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to matrices only; biases, layer-norm and other 1-D tensors are
    /// not decayed.
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update from the gradients stored in `store`. Tensors without a
    /// gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get_mut(id);
            let Some(grad) = t.grad.take() else { continue };
            let decay = if t.shape().len() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                *w -= self.lr * (update + decay * *w);
            }
            t.grad = Some(grad);
        }
    }
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for id in store.ids().collect::<Vec<_>>() {
            if let Some(g) = store.get_mut(id).grad.as_mut() {
                g.iter_mut().for_each(|x| *x *= scale);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()).unwrap();
        store.get_mut(id).grad = Some(vec![0.5, -3.0]);
        let mut opt = AdamW::new(&store, 0.1, 0.0);
        opt.step(&mut store);
        let w = store.get(id).data();
        // bias-corrected first step is g / |g|
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_only_on_matrices() {
        let mut store = ParamStore::new();
        let m = store.insert("m", Tensor::ones(&[1, 1])).unwrap();
        let b = store.insert("b", Tensor::ones(&[1])).unwrap();
        store.get_mut(m).grad = Some(vec![0.0]);
        store.get_mut(b).grad = Some(vec![0.0]);
        let mut opt = AdamW::new(&store, 0.1, 0.5);
        opt.step(&mut store);
        assert!((store.get(m).data()[0] - 0.95).abs() < 1e-12);
        assert_eq!(store.get(b).data()[0], 1.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::new(vec![3], vec![2.0, -1.0, 0.5]).unwrap()).unwrap();
        let mut opt = AdamW::new(&store, 0.05, 0.0);
        for _ in 0..500 {
            let g: Vec<f64> = store.get(id).data().iter().map(|x| 2.0 * x).collect();
            store.get_mut(id).grad = Some(g);
            opt.step(&mut store);
        }
        assert!(store.get(id).data().iter().all(|x| x.abs() < 1e-2));
        assert_eq!(opt.steps(), 500);
    }

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_limit(
            grads in prop::collection::vec(-1e3f64..1e3, 1..40),
            max_norm in 0.1f64..5.0,
        ) {
            let mut store = ParamStore::new();
            let n = grads.len();
            let half = n / 2;
            let a = store.insert("a", Tensor::zeros(&[half])).unwrap();
            let b = store.insert("b", Tensor::zeros(&[n - half])).unwrap();
            store.get_mut(a).grad = Some(grads[..half].to_vec());
            store.get_mut(b).grad = Some(grads[half..].to_vec());
            let before = clip_grad_norm(&mut store, max_norm);
            let after = store.grad_norm();
            prop_assert!(after <= max_norm + 1e-9);
            if before <= max_norm {
                prop_assert_eq!(after, before);
            }
        }
    }
}
