use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with bias correction. Blocks without a gradient are skipped
/// entirely, moments and step count included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: Vec<Option<Moments>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: Vec::new(),
        }
    }
}

impl Adam {
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        for id in store.ids().collect::<Vec<_>>() {
            let Some(Some(g)) = grads.get(id.index()) else { continue };
            let p = store.get_mut(id);
            let n = p.len();
            let st = self.state[id.index()].get_or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - self.beta1.powi(st.t as i32);
            let c2 = 1.0 - self.beta2.powi(st.t as i32);
            for ((w, gi), (m, v)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.iter_mut().zip(st.v.iter_mut()))
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }

    /// Number of updates applied to block `index`.
    pub fn steps_of(&self, index: usize) -> u64 {
        self.state.get(index).and_then(|s| s.as_ref()).map_or(0, |s| s.t)
    }
}
