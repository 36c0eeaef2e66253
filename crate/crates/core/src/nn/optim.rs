use ndarray::Array2;

use super::graph::Grads;
use super::params::{round_f32, Mat, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct AdamSlot {
    pub m: Mat,
    pub v: Mat,
    pub t: u64,
}

/// Adam with constant learning rate. Moments are kept at `f32` precision
/// alongside the parameters so a checkpointed optimizer resumes exactly.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: Vec<Option<AdamSlot>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots: Vec::new(),
        }
    }

    /// Applies one update to exactly `ids`; parameters without a gradient are skipped.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, ids: &[ParamId]) {
        for &id in ids {
            let Some(g) = grads.get(id) else { continue };
            if self.slots.len() <= id.0 {
                self.slots.resize(id.0 + 1, None);
            }
            let slot = self.slots[id.0].get_or_insert_with(|| AdamSlot {
                m: Array2::zeros(g.dim()),
                v: Array2::zeros(g.dim()),
                t: 0,
            });
            slot.t += 1;
            let (b1, b2) = (self.beta1, self.beta2);
            ndarray::Zip::from(&mut slot.m)
                .and(&mut slot.v)
                .and(g)
                .for_each(|m, v, &gv| {
                    *m = b1 * *m + (1.0 - b1) * gv;
                    *v = b2 * *v + (1.0 - b2) * gv * gv;
                });
            round_f32(&mut slot.m);
            round_f32(&mut slot.v);
            let c1 = 1.0 - b1.powi(slot.t as i32);
            let c2 = 1.0 - b2.powi(slot.t as i32);
            let (lr, eps) = (self.lr, self.eps);
            let value = store.value_mut(id);
            ndarray::Zip::from(value)
                .and(&slot.m)
                .and(&slot.v)
                .for_each(|p, &m, &v| {
                    *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                    *p = *p as f32 as f64;
                });
        }
    }

    pub fn slot(&self, id: ParamId) -> Option<&AdamSlot> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn set_slot(&mut self, id: ParamId, slot: AdamSlot) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        self.slots[id.0] = Some(slot);
    }

    pub fn slots(&self) -> impl Iterator<Item = (ParamId, &AdamSlot)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|s| (ParamId(i), s)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Graph;
    use ndarray::array;
    use std::rc::Rc;

    #[test]
    fn adam_minimizes_quadratic_and_skips_unlisted() {
        let mut store = ParamStore::new();
        let a = store.add("a", array![[3.0, -2.0]], true);
        let b = store.add("b", array![[1.0]], true);
        let mut adam = Adam::new(0.05);
        let target = Rc::new(array![[0.5, 0.5]]);
        for _ in 0..400 {
            let mut g = Graph::new();
            let av = g.param(&store, a);
            let bv = g.param(&store, b);
            let l1 = g.sq_err(av, target.clone(), 1.0);
            let l2 = g.sq_err(bv, Rc::new(array![[0.0]]), 1.0);
            let loss = g.add(l1, l2);
            let grads = g.backward(loss);
            adam.step(&mut store, &grads, &[a]);
        }
        assert!((store.get(a)[[0, 0]] - 0.5).abs() < 1e-2);
        assert_eq!(store.get(b)[[0, 0]], 1.0);
    }
}
