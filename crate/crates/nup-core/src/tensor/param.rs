//! Named parameter storage, initialization, and graph binding.
//!
//! Parameters live outside any graph. Each training step binds the ones it
//! needs into a fresh graph as leaves, runs forward/backward there, and
//! writes accumulated gradients back. Every slot remembers its init
//! distribution so a group can be re-drawn later (the stage boundary
//! re-initializes the histology-to-mask half from scratch) with exactly the
//! same draws a fresh construction would make.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Graph, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(pub usize);

/// Initialization spec, replayable for re-initialization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f32),
    Normal { std: f32 },
    /// Kaiming-style normal for a leaky-relu fan-in.
    HeNormal { fan_in: usize },
    Uniform { lo: f32, hi: f32 },
}

impl Init {
    fn draw(&self, shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f32> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match *self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal { std } => {
                (0..n).map(|_| <StandardNormal as Distribution<f32>>::sample(&StandardNormal, rng) * std).collect()
            }
            Init::HeNormal { fan_in } => {
                let std = (2.0 / fan_in as f32).sqrt();
                (0..n).map(|_| <StandardNormal as Distribution<f32>>::sample(&StandardNormal, rng) * std).collect()
            }
            Init::Uniform { lo, hi } => (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
        };
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }
}

struct Slot {
    name: String,
    shape: Vec<usize>,
    init: Init,
    value: ArrayD<f32>,
    grad: Option<ArrayD<f32>>,
}

/// All trainable parameters, addressed by id or by hierarchical name.
#[derive(Default)]
pub struct ParamStore {
    slots: Vec<Slot>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn create(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "parameter name collision: {name}"
        );
        let value = init.draw(shape, rng);
        let id = ParamId(self.slots.len());
        self.slots.push(Slot {
            name: name.to_string(),
            shape: shape.to_vec(),
            init,
            value,
            grad: None,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.slots[id.0].shape
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Ids of every parameter whose name starts with `prefix`, in id
    /// (creation) order. Parameter groups, reinit sets, and export
    /// scopes are all expressed as name prefixes.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        (0..self.slots.len())
            .filter(|&i| self.slots[i].name.starts_with(prefix))
            .map(ParamId)
            .collect()
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        (0..self.slots.len()).map(ParamId).collect()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f32> {
        &self.slots[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, v: ArrayD<f32>) {
        assert_eq!(v.shape(), self.slots[id.0].shape.as_slice(), "set_value: shape mismatch");
        self.slots[id.0].value = v;
    }

    pub fn grad(&self, id: ParamId) -> Option<&ArrayD<f32>> {
        self.slots[id.0].grad.as_ref()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &ArrayD<f32>) {
        match &mut self.slots[id.0].grad {
            Some(acc) => *acc += g,
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn zero_grad(&mut self, ids: &[ParamId]) {
        for &id in ids {
            self.slots[id.0].grad = None;
        }
    }

    /// Re-draw `ids` in order from `rng`, replaying each slot's init spec.
    /// Iteration order is id order, which matches construction order, so a
    /// group re-drawn from a fresh stream is bit-identical to building the
    /// same module anew with that stream.
    pub fn reinit(&mut self, ids: &[ParamId], rng: &mut ChaCha8Rng) {
        for &id in ids {
            let slot = &mut self.slots[id.0];
            slot.value = slot.init.draw(&slot.shape.clone(), rng);
            slot.grad = None;
        }
    }

    /// Bind parameters into a graph as differentiable leaves.
    pub fn bind(&self, g: &Graph, ids: &[ParamId]) -> Bound {
        let mut map = HashMap::with_capacity(ids.len());
        for &id in ids {
            map.insert(id, g.input(self.slots[id.0].value.clone()));
        }
        Bound { map }
    }

    /// Bind parameters as constants: forward only, no gradient tracking.
    /// Used when a network is evaluated inside another network's update
    /// phase (the update-isolation rule between the two phases).
    pub fn bind_const(&self, g: &Graph, ids: &[ParamId]) -> Bound {
        let mut map = HashMap::with_capacity(ids.len());
        for &id in ids {
            map.insert(id, g.constant(self.slots[id.0].value.clone()));
        }
        Bound { map }
    }
}

/// Graph leaves for one bound parameter group.
pub struct Bound {
    map: HashMap<ParamId, Tensor>,
}

impl Bound {
    pub fn t(&self, id: ParamId) -> Tensor {
        self.map.get(&id).expect("parameter not bound in this graph").clone()
    }

    pub fn merge(mut self, other: Bound) -> Bound {
        for (k, v) in other.map {
            self.map.insert(k, v);
        }
        self
    }

    /// Accumulate `d loss / d param` into the store for every bound leaf.
    pub fn backward(&self, store: &mut ParamStore, loss: &Tensor) {
        let ids: Vec<ParamId> = {
            let mut v: Vec<ParamId> = self.map.keys().copied().collect();
            v.sort_by_key(|p| p.0);
            v
        };
        let leaves: Vec<&Tensor> = ids.iter().map(|id| self.map.get(id).unwrap()).collect();
        let grads = loss.graph().grad(loss, &leaves);
        for (id, g) in ids.iter().zip(grads) {
            if let Some(g) = g {
                store.accumulate_grad(*id, &g.value());
            }
        }
    }
}

/// Hierarchical name builder for parameter creation.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    path: String,
}

impl<'a> Scope<'a> {
    pub fn root(store: &'a mut ParamStore) -> Scope<'a> {
        Scope { store, path: String::new() }
    }

    pub fn child(&mut self, seg: &str) -> Scope<'_> {
        let path = if self.path.is_empty() { seg.to_string() } else { format!("{}.{seg}", self.path) };
        Scope { store: self.store, path }
    }

    pub fn param(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let full = if self.path.is_empty() { name.to_string() } else { format!("{}.{name}", self.path) };
        self.store.create(&full, shape, init, rng)
    }

    pub fn path(&self) -> &str {
        &self.path
    }
}
