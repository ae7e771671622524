//! Adam with bias correction, keyed by parameter id.
//!
//! Moment buffers are created lazily on first step and can be dropped per
//! group when a module is re-initialized mid-run.

use std::collections::HashMap;

use ndarray::ArrayD;

use super::param::{ParamId, ParamStore};

pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: HashMap<usize, ArrayD<f32>>,
    v: HashMap<usize, ArrayD<f32>>,
    t: HashMap<usize, u64>,
}

impl Adam {
    pub fn new(beta1: f32, beta2: f32, eps: f32) -> Adam {
        Adam { beta1, beta2, eps, m: HashMap::new(), v: HashMap::new(), t: HashMap::new() }
    }

    /// One update over `ids` at learning rate `lr`. Parameters without an
    /// accumulated gradient are skipped.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], lr: f32) {
        for &id in ids {
            let Some(g) = store.grad(id) else { continue };
            let g = g.clone();
            let m = self
                .m
                .entry(id.0)
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            m.zip_mut_with(&g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            let v = self
                .v
                .entry(id.0)
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            v.zip_mut_with(&g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let t = self.t.entry(id.0).or_insert(0);
            *t += 1;
            let bc1 = 1.0 - self.beta1.powi(*t as i32);
            let bc2 = 1.0 - self.beta2.powi(*t as i32);
            let m = &self.m[&id.0];
            let v = &self.v[&id.0];
            let mut value = store.value(id).clone();
            ndarray::Zip::from(&mut value).and(m).and(v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            });
            store.set_value(id, value);
        }
    }

    /// Drop optimizer state for `ids` (used when a module is re-drawn).
    pub fn reset(&mut self, ids: &[ParamId]) {
        for id in ids {
            self.m.remove(&id.0);
            self.v.remove(&id.0);
            self.t.remove(&id.0);
        }
    }

    /// Snapshot state for checkpointing: `(param id, m, v, t)` sorted by id.
    pub fn snapshot(&self) -> Vec<(usize, ArrayD<f32>, ArrayD<f32>, u64)> {
        let mut ids: Vec<usize> = self.m.keys().copied().collect();
        ids.sort_unstable();
        ids.into_iter()
            .map(|id| (id, self.m[&id].clone(), self.v[&id].clone(), self.t[&id]))
            .collect()
    }

    pub fn restore(&mut self, entries: Vec<(usize, ArrayD<f32>, ArrayD<f32>, u64)>) {
        for (id, m, v, t) in entries {
            self.m.insert(id, m);
            self.v.insert(id, v);
            self.t.insert(id, t);
        }
    }
}
