//! Optimizers. Plain gradient descent is the reference; Adam is what the
//! training loops actually use.

use ndarray::ArrayD;

use super::store::{GradBuf, ParamStore};

/// Momentum-free gradient descent with a fixed step.
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step(&self, store: &mut ParamStore, grads: &GradBuf) {
        for id in store.ids().collect::<Vec<_>>() {
            let g = grads.get(id).clone();
            store.get_mut(id).zip_mut_with(&g, |v, &gv| *v -= self.lr * gv);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let shapes: Vec<_> = store
            .ids()
            .map(|id| ArrayD::zeros(store.get(id).raw_dim()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuf) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let g = grads.get(id);
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            m.zip_mut_with(g, |mv, &gv| *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv);
            v.zip_mut_with(g, |vv, &gv| *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv);
            let value = store.get_mut(id);
            ndarray::Zip::from(value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mv, &vv| {
                    let mh = mv / bc1;
                    let vh = vv / bc2;
                    *p -= self.lr * mh / (vh.sqrt() + self.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::store::zeros;

    /// Minimize (x - 3)^2 with both optimizers.
    fn quadratic_descent(use_adam: bool) -> f64 {
        let mut store = ParamStore::new();
        let x = store.add("x", zeros(&[1]));
        let mut adam = Adam::new(&store, 0.1);
        let sgd = Sgd { lr: 0.1 };
        for _ in 0..200 {
            let mut grads = GradBuf::zeros_like(&store);
            let v = store.get(x)[0];
            grads.accum(x, &ndarray::arr1(&[2.0 * (v - 3.0)]));
            if use_adam {
                adam.step(&mut store, &grads);
            } else {
                sgd.step(&mut store, &grads);
            }
        }
        store.get(x)[0]
    }

    #[test]
    fn both_optimizers_converge() {
        assert!((quadratic_descent(false) - 3.0).abs() < 1e-6);
        assert!((quadratic_descent(true) - 3.0).abs() < 1e-2);
    }
}
