use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Gradients, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Trainable parameter.
    Param,
    /// Non-trainable state (normalization running statistics).
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    HeNormal { fan_in: usize },
    Zeros,
    Const(f64),
}

#[derive(Debug, Clone)]
pub struct Entry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: Kind,
}

/// Named parameters and buffers of a model, in registration order.
#[derive(Debug, Clone)]
pub struct Store<T> {
    entries: Vec<Entry<T>>,
    rng: ChaCha8Rng,
}

impl<T: Real> Store<T> {
    pub fn new(seed: u64) -> Self {
        Store {
            entries: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(&mut self, name: String, shape: &[usize], init: Init, kind: Kind) -> ParamId {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::HeNormal { fan_in } => {
                let std = libm::sqrt(2.0 / fan_in.max(1) as f64);
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut self.rng);
                        T::of(z * std)
                    })
                    .collect()
            }
            Init::Zeros => alloc::vec![T::zero(); n],
            Init::Const(v) => alloc::vec![T::of(v); n],
        };
        self.entries.push(Entry {
            name,
            value: Tensor::from_vec(shape, data).expect("shape product matches"),
            kind,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn param(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        self.add(name, shape, init, Kind::Param)
    }

    pub fn buffer(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        self.add(name, shape, init, Kind::Buffer)
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.entries[id.0].kind == Kind::Param)
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.trainable().map(|id| self.get(id).len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Replaces a tensor by name, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::config("parameter", alloc::format!("unknown tensor {name}")))?;
        if self.get(id).shape() != value.shape() {
            return Err(Error::shape("store.set", self.get(id).shape(), value.shape()));
        }
        *self.get_mut(id) = value;
        Ok(())
    }

    /// Same entries converted to another element type.
    pub fn cast<U: Real>(&self) -> Store<U> {
        Store {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    kind: e.kind,
                })
                .collect(),
            rng: self.rng.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

/// Forward-pass context: binds store parameters into a graph on first use.
pub struct Ctx<'g, 's, T> {
    pub g: &'g mut Graph<T>,
    store: &'s mut Store<T>,
    bound: Vec<Option<Var>>,
    pub mode: Mode,
}

impl<'g, 's, T: Real> Ctx<'g, 's, T> {
    pub fn new(g: &'g mut Graph<T>, store: &'s mut Store<T>, mode: Mode) -> Self {
        let n = store.len();
        Ctx {
            g,
            store,
            bound: alloc::vec![None; n],
            mode,
        }
    }

    /// Uses caller-provided variables for the trainable parameters, in
    /// [`Store::trainable`] order.
    pub fn bind_trainable(&mut self, vars: &[Var]) {
        let ids: Vec<ParamId> = self.store.trainable().collect();
        for (id, &v) in ids.iter().zip(vars) {
            self.bound[id.0] = Some(v);
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = match self.store.entries[id.0].kind {
            Kind::Param => self.g.variable(value),
            Kind::Buffer => self.g.constant(value),
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &Store<T> {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut Store<T> {
        self.store
    }

    /// Variables bound for trainable parameters so far.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        self.store
            .trainable()
            .filter_map(|id| self.bound[id.0].map(|v| (id, v)))
            .collect()
    }
}

/// Collects parameter gradients after a backward pass.
pub fn param_grads<T: Real>(bound: &[(ParamId, Var)], grads: &mut Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
    bound
        .iter()
        .filter_map(|&(id, v)| grads.take(v).map(|g| (id, g)))
        .collect()
}
