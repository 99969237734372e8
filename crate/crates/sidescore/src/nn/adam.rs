//! Adam optimizer over a [`ParamStore`].

use ndarray::Array2;

use super::layers::ParamStore;

/// Standard Adam with bias correction. Parameters that received no
/// gradient in a step (absent from the graph) are left untouched, moment
/// state included, so disabled loss branches cannot drift weights.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m = store
            .ids()
            .map(|id| Array2::zeros(store.value(id).raw_dim()))
            .collect();
        let v = store
            .ids()
            .map(|id| Array2::zeros(store.value(id).raw_dim()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Array2<f64>>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, id) in store.ids().enumerate().collect::<Vec<_>>() {
            let Some(g) = &grads[i] else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |mi, &gi| {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi
            });
            v.zip_mut_with(g, |vi, &gi| {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi
            });
            let p = store.value_mut(id);
            for ((pi, mi), vi) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let m_hat = mi / c1;
                let v_hat = vi / c2;
                *pi -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
