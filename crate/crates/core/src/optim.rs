//! Adam with optional global-norm clipping and decoupled weight decay.

use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: None,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients accumulated in `store`, then clears them.
    pub fn step(&mut self, store: &mut ParamStore<F>) {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|p| vec![F::zero(); p.value.len()]).collect();
            self.v = self.m.clone();
        }
        let scale = match self.grad_clip {
            Some(c) => {
                let norm = global_grad_norm(store);
                if norm > c { c / norm } else { 1.0 }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (F::c(self.beta1), F::c(self.beta2));
        let c1 = F::c(1.0 - self.beta1.powi(t));
        let c2 = F::c(1.0 - self.beta2.powi(t));
        let (lr, eps, wd, sc) = (F::c(self.lr), F::c(self.eps), F::c(self.weight_decay), F::c(scale));
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let value = p.value.data_mut();
            for (i, g) in p.grad.data_mut().iter_mut().enumerate() {
                let gi = *g * sc;
                m[i] = b1 * m[i] + (F::one() - b1) * gi;
                v[i] = b2 * v[i] + (F::one() - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                value[i] -= lr * (mh / (vh.sqrt() + eps) + wd * value[i]);
                *g = F::zero();
            }
        }
    }
}

pub fn global_grad_norm<F: Real>(store: &ParamStore<F>) -> f64 {
    store
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g.f64() * g.f64())
        .sum::<f64>()
        .sqrt()
}

/// Multiplies every accumulated gradient by `k`.
pub fn scale_grads<F: Real>(store: &mut ParamStore<F>, k: f64) {
    let k = F::c(k);
    for p in store.iter_mut() {
        for g in p.grad.data_mut() {
            *g *= k;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::<f64>::new(0);
        let id = store.zeros("w", &[3]).unwrap();
        store.grad_mut(id).data_mut().copy_from_slice(&[2.0, -0.5, 0.0]);
        let mut opt = Adam::new(0.1);
        opt.step(&mut store);
        let w = store.value(id).data();
        assert_abs_diff_eq!(w[0], -0.1, epsilon = 1e-6);
        assert_abs_diff_eq!(w[1], 0.1, epsilon = 1e-6);
        assert_eq!(w[2], 0.0);
        assert!(store.grad(id).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn matches_reference_recurrence() {
        let mut store = ParamStore::<f64>::new(0);
        let id = store.zeros("w", &[1]).unwrap();
        store.set(id, Tensor::from_f64([1], &[1.0]).unwrap()).unwrap();
        let mut opt = Adam::new(0.01);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
        for t in 1..=5 {
            let g = 2.0 * x; // d/dx x^2
            store.grad_mut(id).data_mut()[0] = g;
            opt.step(&mut store);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert_abs_diff_eq!(store.value(id).data()[0], x, epsilon = 1e-12);
        }
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut store = ParamStore::<f64>::new(0);
        let id = store.zeros("w", &[2]).unwrap();
        store.grad_mut(id).data_mut().copy_from_slice(&[30.0, 40.0]);
        assert_abs_diff_eq!(global_grad_norm(&store), 50.0);
        scale_grads(&mut store, 0.5);
        assert_eq!(store.grad(id).data(), &[15.0, 20.0]);
        let mut opt = Adam::new(0.1);
        opt.grad_clip = Some(1.0);
        opt.step(&mut store);
        // direction preserved after clipping
        let w = store.value(id).data();
        assert!(w[0] < 0.0 && w[1] < 0.0);
    }
}
