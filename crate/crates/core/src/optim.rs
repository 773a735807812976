//! Adam with bias correction.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Ok(Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }

    /// One update. Parameters absent from `grads` still decay their moments.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads.param(id);
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.as_ref().map_or(0.0, |g| g.data()[k]);
                let mk = &mut m.data_mut()[k];
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gk;
                let vk = &mut v.data_mut()[k];
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gk * gk;
                let mh = *mk / c1;
                let vh = *vk / c2;
                p[k] -= self.lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(alloc::vec![1.0, -2.0]));
        let mut opt = Adam::new(&store, 0.1).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let l = tape.mul(w, w).unwrap();
        let l = tape.sum(l);
        let g = tape.backward(l).unwrap();
        opt.update(&mut store, &g);
        let p = store.get(id).data();
        assert!((p[0] - 0.9).abs() < 1e-9);
        assert!((p[1] + 1.9).abs() < 1e-9);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(5.0));
        let mut opt = Adam::new(&store, 0.05).unwrap();
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let w = tape.param(&store, id);
            let d = tape.offset(w, -3.0);
            let l = tape.mul(d, d).unwrap();
            let g = tape.backward(l).unwrap();
            opt.update(&mut store, &g);
        }
        assert!((store.get(id).item() - 3.0).abs() < 1e-3);
    }

    #[test]
    fn rejects_bad_rate() {
        let store = ParamStore::new();
        assert!(Adam::new(&store, 0.0).is_err());
        assert!(Adam::new(&store, f64::NAN).is_err());
    }
}
