//! Dense `f64` tensors, a reverse-mode tape, and the AdamW optimizer.
//!
//! Parameters live in [`Tensor`] values owned by the model structs. A forward
//! pass records onto a [`Tape`] that borrows parameter data; `Tape::backward`
//! returns [`Gradients`] keyed by parameter identity, which are folded back
//! into each trainable tensor with [`Tensor::accumulate`].

mod kernels;
mod optim;
mod tape;

pub use kernels::{cosine_similarity, gemm, softmax_in_place, COSINE_EPS};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use tape::{BinaryOp, Gradients, Tape, Var};

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static NEXT_PARAM_KEY: AtomicU64 = AtomicU64::new(1);

fn fresh_key() -> u64 {
    NEXT_PARAM_KEY.fetch_add(1, Ordering::Relaxed)
}

/// Dense row-major tensor of 64-bit floats.
///
/// Every tensor carries a process-unique key so gradients computed on a tape
/// can be routed back to it. Cloning yields a new key: a clone is a distinct
/// parameter that starts with the same values.
#[derive(Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    trainable: bool,
    key: u64,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: self.grad.clone(),
            trainable: self.trainable,
            key: fresh_key(),
        }
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            trainable: false,
            key: fresh_key(),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n]).expect("zero-sized dimension")
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n]).expect("zero-sized dimension")
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidShape {
                shape: vec![rows.len(), cols],
                len: rows.iter().map(Vec::len).sum(),
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn vector(values: &[f64]) -> Self {
        Self::new(vec![1, values.len()], values.to_vec()).expect("empty vector")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value]).unwrap()
    }

    /// Uniform initialization on `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Self::new(shape.to_vec(), data).expect("zero-sized dimension")
    }

    pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Self::new(shape.to_vec(), data).expect("zero-sized dimension")
    }

    pub fn with_trainable(mut self, trainable: bool) -> Self {
        self.set_trainable(trainable);
        self
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
        if !trainable {
            self.grad = None;
        }
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` view: vectors are a single row, higher ranks fold the
    /// leading dimensions into rows.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [.., last] => (self.data.len() / last, *last),
            [] => (1, 1),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn zero_grad(&mut self) {
        if self.trainable {
            match &mut self.grad {
                Some(g) => g.iter_mut().for_each(|x| *x = 0.0),
                None => self.grad = Some(vec![0.0; self.data.len()]),
            }
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds this tensor's entry from `grads`, scaled by `scale`. Frozen
    /// tensors are left untouched.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        if !self.trainable {
            return;
        }
        if let Some(g) = grads.get(self.key) {
            let acc = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in acc.iter_mut().zip(g) {
                *a += scale * b;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn to_record(&self) -> TensorRecord {
        TensorRecord {
            shape: self.shape.clone(),
            data: self.data.clone(),
        }
    }

    pub fn from_record(record: TensorRecord) -> Result<Self> {
        Self::new(record.shape, record.data)
    }
}

/// Serialized form of a tensor (values only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}
