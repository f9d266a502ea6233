//! Minimal reverse-mode automatic differentiation.
//!
//! A define-by-run [`tape::Tape`] records every operation of a forward pass;
//! [`tape::Tape::backward`] walks it once in reverse. The engine is generic
//! over the element type: training runs in `f32`, gradient checks instantiate
//! the same code in `f64` where central finite differences are trustworthy.

pub mod adam;
pub mod kernels;
pub mod tape;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use tape::{NodeId, Tape};

use thiserror::Error;

/// Element type for all numeric buffers.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// IEEE total order, for canonical (permutation-invariant) reductions.
    fn total_order(self, other: Self) -> std::cmp::Ordering;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn total_order(self, other: Self) -> std::cmp::Ordering {
        self.total_cmp(&other)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn total_order(self, other: Self) -> std::cmp::Ordering {
        self.total_cmp(&other)
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward requires a scalar loss; got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called twice on the same tape")]
    DoubleBackward,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("config: {0}")]
    Config(String),
}

fn dim_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Dimension { op, detail }
}

/// A named, persistent parameter tensor. Parameters live outside the tape and
/// are bound onto it as leaves each forward pass; `trainable` controls whether
/// the leaf participates in gradient computation.
#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub trainable: bool,
}

impl<F: Scalar> Param<F> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<F>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "param data length must match shape");
        Param { name: name.into(), shape, data, trainable: true }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// An ordered collection of named parameters (a whole model's state).
#[derive(Clone, Debug, Default)]
pub struct ParamSet<F> {
    pub params: Vec<Param<F>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn push(&mut self, p: Param<F>) -> usize {
        assert!(self.index_of(&p.name).is_none(), "duplicate param {}", p.name);
        self.params.push(p);
        self.params.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Param<F>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<F>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Set `trainable` on every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    /// Remove every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|p| !p.name.starts_with(prefix));
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect()
    }

    /// Names of parameters whose buffers differ bitwise from `other`.
    pub fn changed_names(&self, other: &ParamSet<F>) -> Vec<String> {
        let mut out = Vec::new();
        for p in &self.params {
            match other.get(&p.name) {
                Some(q) => {
                    let same = p.data.len() == q.data.len()
                        && p.data.iter().zip(&q.data).all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits());
                    if !same {
                        out.push(p.name.clone());
                    }
                }
                None => out.push(p.name.clone()),
            }
        }
        out
    }
}
