//! Named parameter storage and the per-forward session that binds
//! parameters onto a graph.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Mode, Real, Tensor, Var, BN_MOMENTUM, NORM_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned by gradient descent.
    Weight,
    /// Non-learned state such as normalization running statistics.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
    pub trainable: bool,
}

/// Insertion-ordered named tensors. Order is stable and defines the
/// checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real = f32> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            kind,
            trainable: kind == ParamKind::Weight,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    /// Buffers are never trainable; the request is ignored for them.
    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let p = &mut self.params[id.0];
        p.trainable = trainable && p.kind == ParamKind::Weight;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn weights(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.iter().filter(|(_, p)| p.kind == ParamKind::Weight)
    }

    /// Element count over weights (buffers excluded).
    pub fn weight_count(&self) -> usize {
        self.weights().map(|(_, p)| p.value.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.weights().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.numel()).sum()
    }

    /// Copy converted to another element type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    kind: p.kind,
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Initialization helpers used by layer constructors.
pub(crate) struct Init<'a, T: Real> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    pub warnings: Vec<String>,
}

impl<'a, T: Real> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            warnings: Vec::new(),
        }
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::zeros(shape), ParamKind::Weight)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::ones(shape), ParamKind::Weight)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.store.add(name, value, ParamKind::Buffer)
    }

    /// `U(−1/√fan_in, 1/√fan_in)`.
    pub fn fan_in_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)));
        self.store.add(name, t, ParamKind::Weight)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)));
        self.store.add(name, t, ParamKind::Weight)
    }
}

/// One forward pass: binds store entries to graph leaves on first use and
/// carries the mode and the random stream for stochastic layers.
pub struct Session<'a, T: Real = f32> {
    pub g: &'a mut Graph<T>,
    store: &'a mut ParamStore<T>,
    bound: HashMap<ParamId, Var>,
    mode: Mode,
    rng: &'a mut ChaCha8Rng,
}

impl<'a, T: Real> Session<'a, T> {
    pub fn new(g: &'a mut Graph<T>, store: &'a mut ParamStore<T>, mode: Mode, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            g,
            store,
            bound: HashMap::new(),
            mode,
            rng,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Uses `var` for `id` instead of a fresh leaf.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound.insert(id, var);
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = &self.store.params[id.0];
        let v = self.g.leaf(p.value.clone(), p.trainable);
        self.bound.insert(id, v);
        v
    }

    /// Bound parameters in id order.
    pub fn bindings(&self) -> Vec<(ParamId, Var)> {
        let mut b: Vec<(ParamId, Var)> = self.bound.iter().map(|(&id, &v)| (id, v)).collect();
        b.sort_unstable_by_key(|&(id, _)| id);
        b
    }

    /// Batch normalization with parameters `(gamma, beta, running_mean,
    /// running_var)`; running statistics are updated in train mode.
    pub fn batch_norm(&mut self, x: Var, ids: [ParamId; 4]) -> Result<Var> {
        let [gamma, beta, rm, rv] = ids;
        let gv = self.param(gamma);
        let bv = self.param(beta);
        let (out, stats) = self.g.batch_norm(
            x,
            gv,
            bv,
            &self.store.params[rm.0].value,
            &self.store.params[rv.0].value,
            T::lit(NORM_EPS),
            self.mode,
        )?;
        if let Some(stats) = stats {
            let (lo, hi) = (rm.0.min(rv.0), rm.0.max(rv.0));
            let (a, b) = self.store.params.split_at_mut(hi);
            let (m, v) = if rm.0 < rv.0 {
                (&mut a[lo].value, &mut b[0].value)
            } else {
                (&mut b[0].value, &mut a[lo].value)
            };
            stats.update_running(m, v, T::lit(BN_MOMENTUM));
        }
        Ok(out)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId) -> Result<Var> {
        let gv = self.param(gamma);
        let bv = self.param(beta);
        self.g.layer_norm(x, gv, bv, T::lit(NORM_EPS))
    }

    /// Inverted dropout with an independent mask of shape `mask_shape`
    /// broadcast against `x`. Identity in eval mode or when `p == 0`.
    pub fn dropout_shaped(&mut self, x: Var, p: f64, mask_shape: &[usize]) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability must be in [0, 1), got {p}")));
        }
        if !self.train() || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let rng = &mut *self.rng;
        let mask = Tensor::from_fn(mask_shape, |_| if rng.random::<f64>() < p { T::zero() } else { keep });
        let m = self.g.constant(mask);
        self.g.mul_bcast(x, m)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        let shape = self.g.shape(x).to_vec();
        self.dropout_shaped(x, p, &shape)
    }
}
