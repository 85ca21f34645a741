use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Real;
use crate::error::{Error, Result};

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: true,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); n],
            requires_grad: true,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: F) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: true,
            grad: None,
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| F::lit(normal.sample(rng))).collect();
        Tensor {
            shape,
            data,
            requires_grad: true,
            grad: None,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = F::zero());
        }
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[F]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        let buf = self.grad.get_or_insert_with(|| vec![F::zero(); g.len()]);
        for (b, &x) in buf.iter_mut().zip(g) {
            *b += x;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named collection of model parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: BTreeMap<String, ParamId>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.zero_grad());
    }

    pub fn accumulate(&mut self, grads: &Gradients<F>) {
        for (id, g) in &grads.entries {
            self.tensors[id.0].accumulate_grad(g);
        }
    }

    /// Sets `requires_grad` on every parameter whose name starts with `prefix`.
    /// Returns how many parameters matched.
    pub fn set_requires_grad(&mut self, prefix: &str, requires_grad: bool) -> usize {
        let mut n = 0;
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if name.starts_with(prefix) {
                t.requires_grad = requires_grad;
                if !requires_grad {
                    t.grad = None;
                }
                n += 1;
            }
        }
        n
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.requires_grad)
            .map(|t| t.len())
            .sum()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Copies values for every parameter that exists in `other` under the
    /// same name. Returns the number of tensors copied.
    pub fn load_matching(&mut self, other: &ParamStore<F>) -> Result<usize> {
        let mut n = 0;
        for (name, src) in other.names.iter().zip(&other.tensors) {
            if let Some(id) = self.id(name) {
                let dst = &mut self.tensors[id.0];
                if dst.shape != src.shape {
                    return Err(Error::Shape {
                        op: "load_matching",
                        lhs: dst.shape.clone(),
                        rhs: src.shape.clone(),
                    });
                }
                dst.data.clone_from(&src.data);
                n += 1;
            }
        }
        Ok(n)
    }

    /// Snapshot of the values of all parameters whose name starts with `prefix`.
    pub fn snapshot(&self, prefix: &str) -> Vec<(String, Vec<F>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, t)| (n.clone(), t.data.clone()))
            .collect()
    }

    pub fn grads_snapshot(&self) -> Gradients<F> {
        Gradients {
            entries: self
                .tensors
                .iter()
                .enumerate()
                .filter_map(|(i, t)| t.grad.clone().map(|g| (ParamId(i), g)))
                .collect(),
        }
    }

    pub fn set_grads(&mut self, grads: &Gradients<F>) {
        for t in &mut self.tensors {
            t.grad = None;
        }
        self.accumulate(grads);
    }
}

/// Parameter gradients produced by one backward pass, ordered by parameter id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients<F> {
    pub entries: Vec<(ParamId, Vec<F>)>,
}

impl<F: Real> Gradients<F> {
    pub fn new() -> Self {
        Gradients {
            entries: Vec::new(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[F]> {
        self.entries
            .binary_search_by_key(&id, |(i, _)| *i)
            .ok()
            .map(|k| self.entries[k].1.as_slice())
    }

    /// Elementwise `self += other`, merging the parameter sets.
    pub fn add_assign(&mut self, other: &Gradients<F>) {
        for (id, g) in &other.entries {
            match self.entries.binary_search_by_key(id, |(i, _)| *i) {
                Ok(k) => {
                    for (a, &b) in self.entries[k].1.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                Err(k) => self.entries.insert(k, (*id, g.clone())),
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for (_, g) in &mut self.entries {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn sq_norm(&self) -> F {
        self.entries
            .iter()
            .flat_map(|(_, g)| g.iter())
            .fold(F::zero(), |acc, &x| acc + x * x)
    }
}
