use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`]. Stable across save/load as
/// long as the model is rebuilt from the same configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
    /// Adam first moment.
    pub m: Vec<f32>,
    /// Adam second moment.
    pub v: Vec<f32>,
}

/// Named parameter arrays plus their optimizer slots.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

/// Initialization scheme for a new parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f32),
    /// Uniform on `[-a, a]`.
    Uniform(f32),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let n = rows * cols;
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n).map(|_| std * rng.sample::<f32, _>(StandardNormal)).collect(),
            Init::Uniform(a) => (0..n).map(|_| rng.gen_range(-a..=a)).collect(),
        };
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            rows,
            cols,
            data,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> (usize, usize) {
        let e = &self.entries[id.0];
        (e.rows, e.cols)
    }

    pub fn data(&self, id: ParamId) -> &[f32] {
        &self.entries[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.entries[id.0].data
    }

    pub fn set(&mut self, id: ParamId, values: &[f32]) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.data.len() != values.len() {
            return Err(Error::Shape(format!(
                "parameter {} has {} values, got {}",
                e.name,
                e.data.len(),
                values.len()
            )));
        }
        e.data.copy_from_slice(values);
        Ok(())
    }

    /// Converts every parameter to a standalone table, e.g. `f64` for
    /// finite-difference checking.
    pub fn to_table<T: Real>(&self) -> ParamTable<T> {
        ParamTable {
            values: self
                .entries
                .iter()
                .map(|e| Tensor::from_vec(e.rows, e.cols, e.data.iter().map(|&x| T::from_f32(x)).collect()))
                .collect(),
        }
    }

    /// Zeroes the optimizer moments, keeping the values.
    pub fn reset_moments(&mut self) {
        for e in &mut self.entries {
            e.m.iter_mut().for_each(|x| *x = 0.0);
            e.v.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Read-only source of parameter values for a graph.
pub trait ParamSource<T: Real> {
    fn load(&self, id: ParamId) -> Tensor<T>;
}

impl<T: Real> ParamSource<T> for ParamStore {
    fn load(&self, id: ParamId) -> Tensor<T> {
        let e = &self.entries[id.0];
        Tensor::from_vec(e.rows, e.cols, e.data.iter().map(|&x| T::from_f32(x)).collect())
    }
}

/// Parameter values detached from a store; mutable for perturbation.
#[derive(Clone, Debug)]
pub struct ParamTable<T> {
    pub values: Vec<Tensor<T>>,
}

impl<T: Real> ParamSource<T> for ParamTable<T> {
    fn load(&self, id: ParamId) -> Tensor<T> {
        self.values[id.0].clone()
    }
}

/// Gradient accumulator aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradBuffer {
    pub grads: Vec<Vec<f32>>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.entries.iter().map(|e| vec![0.0; e.data.len()]).collect(),
        }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor<f32>) {
        let dst = &mut self.grads[id.0];
        assert_eq!(dst.len(), grad.data.len(), "gradient shape mismatch");
        for (d, g) in dst.iter_mut().zip(&grad.data) {
            *d += g;
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt()
    }
}
