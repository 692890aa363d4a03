//! Decomposed prompt pools addressed by key-query cosine weights.
//!
//! A pool holds `K` components. For a query `q`, component `k` gets weight
//! `w_k = cos(q ⊙ A_k, K_k)` and the emitted prompt is `Σ_k w_k · P_k`.
//! Weights are used raw: no softmax, no top-k, negative values allowed.
//!
//! `A` and the keys are stored one row per component (`[K, D]`). Each
//! component is flattened into a single row of the `[K, F]` component matrix
//! so aggregation is one `[1,K]·[K,F]` product. For attention injection a
//! component row holds, for every prompted layer, an `N_p × D` key prefix
//! followed by an `N_p × D` value prefix; for input injection it holds one
//! `N_p × D` token block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{InjectionMode, LayerPrefix, PromptInjection};
use crate::error::{config_err, Error, Result};
use crate::tensor::{cosine_similarity, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolRole {
    /// Folder: addressed by text queries.
    Text,
    /// Album: addressed by visual queries.
    Visual,
    /// Memory: addressed by the joint query, used for reconstruction.
    Memory,
    /// One pool addressed by both modality queries.
    Unified,
}

/// Shape of the prompt block a pool or vector emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptGeometry {
    pub embed_dim: usize,
    pub prompt_len: usize,
    pub num_layers: usize,
    pub mode: InjectionMode,
}

impl PromptGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.prompt_len == 0 {
            return Err(config_err("prompt width and length must be >= 1"));
        }
        if self.mode == InjectionMode::Attention && self.num_layers == 0 {
            return Err(config_err("attention prompts need at least one layer"));
        }
        Ok(())
    }

    fn block_len(&self) -> usize {
        self.prompt_len * self.embed_dim
    }

    /// Flattened component width `F`.
    pub fn flat_len(&self) -> usize {
        match self.mode {
            InjectionMode::Attention => self.num_layers * 2 * self.block_len(),
            InjectionMode::Input => self.block_len(),
        }
    }

    /// Splits a `[1, F]` prompt row into an injection.
    pub fn to_injection(&self, tape: &mut Tape<'_>, flat: Var) -> Result<PromptInjection> {
        let (np, d) = (self.prompt_len, self.embed_dim);
        if tape.value(flat).len() != self.flat_len() {
            return Err(Error::ShapeMismatch {
                op: "prompt block",
                lhs: tape.shape(flat).to_vec(),
                rhs: vec![1, self.flat_len()],
            });
        }
        match self.mode {
            InjectionMode::Attention => {
                let mut layers = Vec::with_capacity(self.num_layers);
                for l in 0..self.num_layers {
                    let off = l * 2 * self.block_len();
                    let k = tape.slice_cols(flat, off, self.block_len())?;
                    let v = tape.slice_cols(flat, off + self.block_len(), self.block_len())?;
                    layers.push(LayerPrefix {
                        key: tape.reshape(k, vec![np, d])?,
                        value: tape.reshape(v, vec![np, d])?,
                    });
                }
                Ok(PromptInjection { layers, appended: None })
            }
            InjectionMode::Input => Ok(PromptInjection {
                layers: Vec::new(),
                appended: Some(tape.reshape(flat, vec![np, d])?),
            }),
        }
    }
}

/// Cosine weights of one query against every component of a pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptWeights(pub Vec<f64>);

/// An aggregated prompt (values only).
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBlock {
    pub geometry: PromptGeometry,
    pub data: Vec<f64>,
}

impl PromptBlock {
    /// Key and value prefix of prompted layer `l` (attention mode).
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let b = self.geometry.block_len();
        let off = l * 2 * b;
        (&self.data[off..off + b], &self.data[off + b..off + 2 * b])
    }
}

#[derive(Debug, Clone)]
pub struct PromptPool {
    pub role: PoolRole,
    pub geometry: PromptGeometry,
    pub attention: Tensor,
    pub keys: Tensor,
    pub components: Tensor,
}

impl PromptPool {
    /// Uniform init on `[-1/√D, 1/√D]` for attention vectors, keys and
    /// components.
    pub fn new(role: PoolRole, geometry: PromptGeometry, size: usize, rng: &mut impl Rng) -> Result<Self> {
        geometry.validate()?;
        if size == 0 {
            return Err(config_err("pool size must be >= 1"));
        }
        let d = geometry.embed_dim;
        let bound = 1.0 / (d as f64).sqrt();
        Ok(Self {
            role,
            geometry,
            attention: Tensor::uniform(&[size, d], bound, rng).with_trainable(true),
            keys: Tensor::uniform(&[size, d], bound, rng).with_trainable(true),
            components: Tensor::uniform(&[size, geometry.flat_len()], bound, rng).with_trainable(true),
        })
    }

    pub fn size(&self) -> usize {
        self.keys.shape()[0]
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("attention".into(), &self.attention),
            ("keys".into(), &self.keys),
            ("components".into(), &self.components),
        ]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("attention".into(), &mut self.attention),
            ("keys".into(), &mut self.keys),
            ("components".into(), &mut self.components),
        ]
    }

    fn check_query(&self, len: usize) -> Result<()> {
        if len != self.geometry.embed_dim {
            return Err(Error::ShapeMismatch {
                op: "prompt query",
                lhs: vec![1, len],
                rhs: vec![1, self.geometry.embed_dim],
            });
        }
        Ok(())
    }

    pub fn compute_weights(&self, query: &[f64]) -> Result<PromptWeights> {
        self.check_query(query.len())?;
        let d = self.geometry.embed_dim;
        let w = (0..self.size())
            .map(|k| {
                let scaled: Vec<f64> = self.attention.row(k).iter().zip(query).map(|(a, q)| a * q).collect();
                cosine_similarity(&scaled, &self.keys.data()[k * d..(k + 1) * d])
            })
            .collect();
        Ok(PromptWeights(w))
    }

    pub fn aggregate(&self, weights: &PromptWeights) -> Result<PromptBlock> {
        if weights.0.len() != self.size() {
            return Err(Error::ShapeMismatch {
                op: "aggregate",
                lhs: vec![weights.0.len()],
                rhs: vec![self.size()],
            });
        }
        let f = self.geometry.flat_len();
        let mut data = vec![0.0; f];
        for (k, &w) in weights.0.iter().enumerate() {
            for (acc, p) in data.iter_mut().zip(self.components.row(k)) {
                *acc += w * p;
            }
        }
        Ok(PromptBlock {
            geometry: self.geometry,
            data,
        })
    }

    pub fn select_prompt(&self, query: &[f64]) -> Result<PromptBlock> {
        self.aggregate(&self.compute_weights(query)?)
    }

    /// Weight computation on the tape: `[1, D]` query to `[1, K]` weights.
    pub fn weights_on<'a>(&'a self, tape: &mut Tape<'a>, query: Var) -> Result<Var> {
        self.check_query(tape.value(query).len())?;
        let a = tape.leaf(&self.attention);
        let keys = tape.leaf(&self.keys);
        let scaled = tape.mul_row(a, query)?;
        tape.cosine_rows(scaled, keys)
    }

    /// Aggregation on the tape: `[1, K]` weights to a `[1, F]` prompt row.
    pub fn aggregate_on<'a>(&'a self, tape: &mut Tape<'a>, weights: Var) -> Result<Var> {
        if tape.value(weights).len() != self.size() {
            return Err(Error::ShapeMismatch {
                op: "aggregate",
                lhs: tape.shape(weights).to_vec(),
                rhs: vec![1, self.size()],
            });
        }
        let comps = tape.leaf(&self.components);
        tape.matmul(weights, comps)
    }

    /// Query to flattened prompt row, differentiable in the query and in all
    /// pool parameters.
    pub fn select_on<'a>(&'a self, tape: &mut Tape<'a>, query: Var) -> Result<Var> {
        let w = self.weights_on(tape, query)?;
        self.aggregate_on(tape, w)
    }

    pub fn select_injection<'a>(&'a self, tape: &mut Tape<'a>, query: Var) -> Result<PromptInjection> {
        let flat = self.select_on(tape, query)?;
        self.geometry.to_injection(tape, flat)
    }
}

/// A single learnable prompt block used in place of a pool.
#[derive(Debug, Clone)]
pub struct PromptVector {
    pub geometry: PromptGeometry,
    pub block: Tensor,
}

impl PromptVector {
    pub fn new(geometry: PromptGeometry, rng: &mut impl Rng) -> Result<Self> {
        geometry.validate()?;
        let bound = 1.0 / (geometry.embed_dim as f64).sqrt();
        Ok(Self {
            geometry,
            block: Tensor::uniform(&[1, geometry.flat_len()], bound, rng).with_trainable(true),
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("block".into(), &self.block)]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("block".into(), &mut self.block)]
    }

    pub fn injection<'a>(&'a self, tape: &mut Tape<'a>) -> Result<PromptInjection> {
        let flat = tape.leaf(&self.block);
        self.geometry.to_injection(tape, flat)
    }
}

/// Where a prompt comes from: a query-addressed pool or a fixed vector.
#[derive(Debug, Clone)]
pub enum PromptSource {
    Pool(PromptPool),
    Vector(PromptVector),
}

impl PromptSource {
    pub fn geometry(&self) -> PromptGeometry {
        match self {
            PromptSource::Pool(p) => p.geometry,
            PromptSource::Vector(v) => v.geometry,
        }
    }

    pub fn is_pool(&self) -> bool {
        matches!(self, PromptSource::Pool(_))
    }

    /// Flattened prompt row; the query is ignored by vectors.
    pub fn select_on<'a>(&'a self, tape: &mut Tape<'a>, query: Var) -> Result<Var> {
        match self {
            PromptSource::Pool(p) => p.select_on(tape, query),
            PromptSource::Vector(v) => Ok(tape.leaf(&v.block)),
        }
    }

    pub fn select_injection<'a>(&'a self, tape: &mut Tape<'a>, query: Var) -> Result<PromptInjection> {
        let flat = self.select_on(tape, query)?;
        self.geometry().to_injection(tape, flat)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        match self {
            PromptSource::Pool(p) => p.named_params(),
            PromptSource::Vector(v) => v.named_params(),
        }
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            PromptSource::Pool(p) => p.named_params_mut(),
            PromptSource::Vector(v) => v.named_params_mut(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geom(d: usize) -> PromptGeometry {
        PromptGeometry {
            embed_dim: d,
            prompt_len: 2,
            num_layers: 2,
            mode: InjectionMode::Attention,
        }
    }

    fn pool(d: usize, k: usize, seed: u64) -> PromptPool {
        PromptPool::new(PoolRole::Text, geom(d), k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn hand_evaluated_weight() {
        let mut p = pool(2, 1, 0);
        p.attention.data_mut().copy_from_slice(&[1.0, 1.0]);
        p.keys.data_mut().copy_from_slice(&[1.0, 0.0]);
        let w = p.compute_weights(&[1.0, 1.0]).unwrap();
        assert!((w.0[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn parallel_query_with_unit_attention_gives_one() {
        let mut p = pool(3, 2, 1);
        p.attention.data_mut().iter_mut().for_each(|a| *a = 1.0);
        let key1 = p.keys.row(1).to_vec();
        let q: Vec<f64> = key1.iter().map(|x| 2.5 * x).collect();
        let w = p.compute_weights(&q).unwrap();
        assert!((w.0[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_query_gives_zero_weights() {
        let p = pool(4, 5, 2);
        let w = p.compute_weights(&[0.0; 4]).unwrap();
        assert!(w.0.iter().all(|&x| x == 0.0));
        let b = p.aggregate(&w).unwrap();
        assert!(b.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn one_hot_weights_select_component() {
        let p = pool(4, 3, 3);
        let b = p.aggregate(&PromptWeights(vec![0.0, 1.0, 0.0])).unwrap();
        assert_eq!(b.data, p.components.row(1));
    }

    #[test]
    fn equal_weights_average_two_components() {
        let p = pool(4, 2, 4);
        let b = p.aggregate(&PromptWeights(vec![0.5, 0.5])).unwrap();
        for j in 0..b.data.len() {
            let direct = 0.5 * p.components.row(0)[j] + 0.5 * p.components.row(1)[j];
            assert!((b.data[j] - direct).abs() < 1e-15);
        }
    }

    #[test]
    fn width_and_length_mismatches_are_rejected() {
        let p = pool(4, 3, 5);
        assert!(p.compute_weights(&[1.0; 3]).is_err());
        assert!(p.aggregate(&PromptWeights(vec![1.0; 2])).is_err());
    }

    #[test]
    fn tape_and_plain_paths_agree() {
        let p = pool(4, 3, 6);
        let q = [0.3, -0.1, 0.8, 0.2];
        let plain = p.select_prompt(&q).unwrap();
        let mut tape = Tape::new();
        let qv = tape.constant_row(&q);
        let flat = p.select_on(&mut tape, qv).unwrap();
        for (a, b) in tape.value(flat).iter().zip(&plain.data) {
            assert!((a - b).abs() < 1e-14);
        }
        let inj = p.geometry.to_injection(&mut tape, flat).unwrap();
        assert_eq!(inj.layers.len(), 2);
        let (k1, v1) = plain.layer(1);
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-14);
        assert!(close(tape.value(inj.layers[1].key), k1));
        assert!(close(tape.value(inj.layers[1].value), v1));
    }

    #[test]
    fn input_mode_emits_appended_tokens() {
        let g = PromptGeometry {
            mode: InjectionMode::Input,
            ..geom(4)
        };
        let p = PromptPool::new(PoolRole::Memory, g, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(p.components.shape(), &[3, 8]);
        let mut tape = Tape::new();
        let q = tape.constant_row(&[1.0, 0.0, 0.0, 0.0]);
        let inj = p.select_injection(&mut tape, q).unwrap();
        assert!(inj.layers.is_empty());
        assert_eq!(tape.shape(inj.appended.unwrap()), &[2, 4]);
    }
}
