//! Adam optimizer over a `ParamStore`.

use std::collections::HashMap;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<usize, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: HashMap::new() }
    }

    /// Apply one update from already-averaged gradients. Frozen params are
    /// skipped even if a gradient is supplied.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (id, grad) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(id.0)
                .or_insert_with(|| (Tensor::zeros(grad.shape().to_vec()), Tensor::zeros(grad.shape().to_vec())));
            {
                let md = m.data_mut();
                let vd = v.data_mut();
                for ((m_i, v_i), &g_i) in md.iter_mut().zip(vd.iter_mut()).zip(grad.data().iter()) {
                    *m_i = self.beta1 * *m_i + (1.0 - self.beta1) * g_i;
                    *v_i = self.beta2 * *v_i + (1.0 - self.beta2) * g_i * g_i;
                }
            }
            let mut value = store.get(*id).clone();
            {
                let vd = value.data_mut();
                for ((x, &m_i), &v_i) in vd.iter_mut().zip(m.data().iter()).zip(v.data().iter()) {
                    let mhat = m_i / bc1;
                    let vhat = v_i / bc2;
                    *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
            store.set(*id, value);
        }
    }
}
