//! Named parameters and their binding onto a tape.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use indexmap::IndexMap;

use crate::tape::{Gradients, Tape, Var};
use crate::{Error, Real, Result, Tensor};

/// A named, optionally trainable tensor. Every read through
/// [`ParamSet::get`] is counted so tests can audit which parameters a code
/// path touches.
#[derive(Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
    reads: AtomicU64,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            tensor,
            trainable: true,
            reads: AtomicU64::new(0),
        }
    }

    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }
}

impl<T: Real> Clone for Parameter<T> {
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            tensor: self.tensor.clone(),
            trainable: self.trainable,
            reads: AtomicU64::new(0),
        }
    }
}

#[derive(Debug)]
pub struct ParamSet<T> {
    params: IndexMap<String, Parameter<T>>,
}

impl<T: Real> Clone for ParamSet<T> {
    fn clone(&self) -> Self {
        Self {
            params: self.params.clone(),
        }
    }
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.params.insert(name.clone(), Parameter::new(name, tensor));
        Ok(())
    }

    /// Looks up a parameter and records the read.
    pub fn get(&self, name: &str) -> Result<&Parameter<T>> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))?;
        p.reads.fetch_add(1, Ordering::Relaxed);
        Ok(p)
    }

    /// Looks up a parameter without recording a read.
    pub fn peek(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.values_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    /// Total reads of parameters whose name starts with `prefix`.
    pub fn reads_with_prefix(&self, prefix: &str) -> u64 {
        self.params
            .values()
            .filter(|p| p.name.starts_with(prefix))
            .map(Parameter::reads)
            .sum()
    }

    pub fn reset_reads(&self) {
        for p in self.params.values() {
            p.reads.store(0, Ordering::Relaxed);
        }
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads<T> {
    pub grads: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    /// Adds `other` into `self`, entry by entry.
    pub fn accumulate(&mut self, other: &ParamGrads<T>) {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + b;
                    }
                }
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        let c = T::of(c);
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v = *v * c;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.data())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}

/// Lazily records parameters as tape leaves, one leaf per name.
pub struct Binder<'a, T: Real> {
    tape: &'a Tape<T>,
    params: &'a ParamSet<T>,
    bound: RefCell<IndexMap<String, Var>>,
}

impl<'a, T: Real> Binder<'a, T> {
    pub fn new(tape: &'a Tape<T>, params: &'a ParamSet<T>) -> Self {
        Self {
            tape,
            params,
            bound: RefCell::new(IndexMap::new()),
        }
    }

    pub fn tape(&self) -> &'a Tape<T> {
        self.tape
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.borrow().get(name) {
            return Ok(v);
        }
        let p = self.params.get(name)?;
        let v = if p.trainable {
            self.tape.leaf(p.tensor.clone())
        } else {
            self.tape.constant(p.tensor.clone())
        };
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Names bound so far, in binding order.
    pub fn bound_names(&self) -> Vec<String> {
        self.bound.borrow().keys().cloned().collect()
    }

    /// Extracts the gradient of every bound trainable parameter. Parameters
    /// that the loss does not depend on get zero gradients.
    pub fn collect(&self, grads: &Gradients<T>) -> ParamGrads<T> {
        let mut out = IndexMap::new();
        for (name, &v) in self.bound.borrow().iter() {
            let p = self.params.peek(name).expect("bound parameter exists");
            if !p.trainable {
                continue;
            }
            let g = grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.tensor.shape()));
            out.insert(name.clone(), g);
        }
        ParamGrads { grads: out }
    }
}
