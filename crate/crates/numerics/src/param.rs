use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use crate::error::{invalid, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal(f64),
}

/// A named trainable (or frozen) tensor.
#[derive(Clone, Debug)]
pub struct Param<T> {
    name: String,
    shape: Vec<usize>,
    data: Vec<T>,
    trainable: bool,
}

impl<T: Real> Param<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_parts(self.shape.clone(), self.data.clone())
    }
}

/// Ordered collection of named parameters.
///
/// A store built with [`ParamStore::shape_only`] records names and shapes
/// but allocates no values; it exists for parameter census of presets too
/// large to materialize.
#[derive(Clone, Debug)]
pub struct ParamStore<T = f32> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
    rng: Rng,
    materialized: bool,
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
            rng: Rng::new(seed),
            materialized: true,
        }
    }

    pub fn shape_only() -> Self {
        Self {
            materialized: false,
            ..Self::new(0)
        }
    }

    pub fn is_materialized(&self) -> bool {
        self.materialized
    }

    /// Registers a new parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter {name}"
        );
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "bad shape {shape:?} for {name}"
        );
        let n = numel(shape);
        let data = if !self.materialized {
            Vec::new()
        } else {
            match init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Const(c) => vec![T::lit(c); n],
                Init::Normal(std) => (0..n).map(|_| T::lit(self.rng.normal() * std)).collect(),
            }
        };
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            data,
            trainable: true,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn total_params(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in self
            .params
            .iter_mut()
            .filter(|p| p.name.starts_with(prefix))
        {
            p.trainable = trainable;
            n += 1;
        }
        n
    }

    pub fn set_value(&mut self, id: ParamId, value: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if value.shape() != p.shape.as_slice() {
            return invalid(
                "set_value",
                format!("{}: shape {:?} vs {:?}", p.name, value.shape(), p.shape),
            );
        }
        p.data = value.data().to_vec();
        Ok(())
    }

    /// Same names, shapes and flags in another element type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
            rng: self.rng.clone(),
            materialized: self.materialized,
        }
    }
}

/// A [`Tape`] bound to a [`ParamStore`].
///
/// Parameters enter the tape as leaves the first time they are used;
/// trainable ones require grad unless the graph was built for inference.
pub struct Graph<'s, T: Real = f32> {
    tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
    track: bool,
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            track: true,
        }
    }

    /// No parameter requires grad.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self {
            track: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        assert!(
            self.store.is_materialized(),
            "shape-only store has no values"
        );
        let v = self.tape.leaf(p.to_tensor(), self.track && p.trainable());
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every bound trainable parameter, after backward.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.tape.grad(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }
}

impl<T: Real> Deref for Graph<'_, T> {
    type Target = Tape<T>;

    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T: Real> DerefMut for Graph<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}
