//! Operation tape for reverse-mode differentiation.
//!
//! A tape is built for one forward pass and dropped after `backward`. Nodes
//! whose inputs are all constants or frozen parameters are marked as not
//! requiring gradients and are skipped during the reverse sweep.

use std::borrow::Cow;
use std::collections::HashMap;

use super::kernels::{self, gemm, COSINE_EPS};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf { key: Option<u64> },
    Binary { kind: BinaryOp, a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose { x: Var },
    SoftmaxRows { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu { x: Var },
    Sum { x: Var },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    Reshape { x: Var },
    CosineRows { a: Var, b: Var },
    SumSquares { x: Var },
    CrossEntropy { logits: Var, probs: Vec<f64>, target: Vec<f64> },
    Bce { logits: Var, target: Vec<f64> },
    Mse { a: Var, b: Var },
    Gather { table: Var, ids: Vec<usize> },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, [f64]>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of trainable leaves, keyed by [`Tensor::key`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_key: HashMap<u64, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, key: u64) -> Option<&[f64]> {
        self.by_key.get(&key).map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }

    pub fn len(&self) -> usize {
        self.by_key.len()
    }
}

#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [.., last] => (shape.iter().product::<usize>() / last, *last),
        [] => (1, 1),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [f64]>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        dims2(&self.nodes[v.0].shape)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Copies a node's value out as a standalone (non-trainable) tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Registers a parameter by reference. Trainable tensors receive a
    /// gradient entry on `backward`; frozen ones act as constants.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        let key = t.trainable().then(|| t.key());
        self.push(
            Cow::Borrowed(t.data()),
            t.shape().to_vec(),
            Op::Leaf { key },
            t.trainable(),
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(self.push(Cow::Owned(data), shape, Op::Leaf { key: None }, false))
    }

    pub fn constant_row(&mut self, data: &[f64]) -> Var {
        self.push(
            Cow::Owned(data.to_vec()),
            vec![1, data.len()],
            Op::Leaf { key: None },
            false,
        )
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// Elementwise add/sub/multiply. `b` may also be a single-element tensor,
    /// which is broadcast.
    pub fn binary(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let scalar_b = self.shape(a) != self.shape(b);
        if scalar_b && self.value(b).len() != 1 {
            return Err(self.mismatch("elementwise", a, b));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let f = |x: f64, y: f64| match kind {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
        };
        let out: Vec<f64> = if scalar_b {
            av.iter().map(|&x| f(x, bv[0])).collect()
        } else {
            av.iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), self.shape(a).to_vec(), Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        self.push(Cow::Owned(out), self.shape(x).to_vec(), Op::Scale { x, c }, rg)
    }

    fn row_broadcast(&mut self, x: Var, row: Var, mul: bool) -> Result<Var> {
        let (_, c) = self.dims(x);
        if self.value(row).len() != c {
            return Err(self.mismatch("row broadcast", x, row));
        }
        let rv = self.value(row);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|r| r.iter().zip(rv.iter()).map(|(a, b)| if mul { a * b } else { a + b }))
            .collect();
        let rg = self.rg(x) || self.rg(row);
        let op = if mul { Op::MulRow { x, row } } else { Op::AddRow { x, row } };
        Ok(self.push(Cow::Owned(out), self.shape(x).to_vec(), op, rg))
    }

    /// `x[n,c] + row[1,c]` on every row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, false)
    }

    /// `x[n,c] ⊙ row[1,c]` on every row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if self.shape(a).len() > 2 || self.shape(b).len() > 2 || k != kb {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(false, trans_b, m, k, n, self.value(a), self.value(b), 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), vec![m, n], Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let rg = self.rg(x);
        self.push(Cow::Owned(out), vec![c, r], Op::Transpose { x }, rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (_, c) = self.dims(x);
        let mut out = self.value(x).to_vec();
        kernels::softmax_in_place(&mut out, c);
        let rg = self.rg(x);
        self.push(Cow::Owned(out), self.shape(x).to_vec(), Op::SoftmaxRows { x }, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Cow::Owned(out),
            self.shape(x).to_vec(),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let rg = self.rg(x);
        self.push(Cow::Owned(out), self.shape(x).to_vec(), Op::Gelu { x }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(Cow::Owned(vec![s]), vec![1], Op::Sum { x }, rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|v| v * v).sum();
        let rg = self.rg(x);
        self.push(Cow::Owned(vec![s]), vec![1], Op::SumSquares { x }, rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > r {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: self.shape(x).to_vec(),
                rhs: vec![start, len],
            });
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), vec![len, c], Op::SliceRows { x, start }, rg))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.slice_rows(x, i, 1)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > c {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: self.shape(x).to_vec(),
                rhs: vec![start, len],
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), vec![r, len], Op::SliceCols { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|&p| self.dims(p).1).ok_or_else(|| Error::ShapeMismatch {
            op: "concat_rows",
            lhs: vec![],
            rhs: vec![],
        })?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(self.mismatch("concat_rows", parts[0], p));
            }
            out.extend_from_slice(self.value(p));
            rows += r;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Cow::Owned(out),
            vec![rows, c],
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|&p| self.dims(p).0).ok_or_else(|| Error::ShapeMismatch {
            op: "concat_cols",
            lhs: vec![],
            rhs: vec![],
        })?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(self.mismatch("concat_cols", parts[0], p));
            }
            total += pc;
        }
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for &p in parts {
            let (_, pc) = self.dims(p);
            let pv = self.value(p);
            for i in 0..r {
                out[i * total + off..i * total + off + pc].copy_from_slice(&pv[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Cow::Owned(out),
            vec![r, total],
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::InvalidShape {
                shape,
                len: self.value(x).len(),
            });
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), shape, Op::Reshape { x }, rg))
    }

    /// Row-wise cosine similarity of `a[n,d]` and `b[n,d]`, returned as `[1,n]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(self.mismatch("cosine_rows", a, b));
        }
        let (n, d) = self.dims(a);
        let av = self.value(a);
        let bv = self.value(b);
        let out = (0..n)
            .map(|i| kernels::cosine_similarity(&av[i * d..(i + 1) * d], &bv[i * d..(i + 1) * d]))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), vec![1, n], Op::CosineRows { a, b }, rg))
    }

    /// Softmax cross-entropy against a target distribution (one-hot for
    /// single-label data). Classes outside `allowed` are excluded from the
    /// softmax and receive no gradient.
    pub fn cross_entropy(&mut self, logits: Var, target: &[f64], allowed: Option<&[bool]>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != target.len() || allowed.is_some_and(|m| m.len() != lv.len()) {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![target.len()],
            });
        }
        let keep = |i: usize| allowed.is_none_or(|m| m[i]);
        if target.iter().enumerate().any(|(i, &t)| t != 0.0 && !keep(i)) {
            return Err(Error::Sample("cross-entropy target on an excluded class".into()));
        }
        let max = (0..lv.len()).filter(|&i| keep(i)).map(|i| lv[i]).fold(f64::NEG_INFINITY, f64::max);
        let mut probs = vec![0.0; lv.len()];
        let mut z = 0.0;
        for i in (0..lv.len()).filter(|&i| keep(i)) {
            probs[i] = (lv[i] - max).exp();
            z += probs[i];
        }
        probs.iter_mut().for_each(|p| *p /= z);
        let log_z = z.ln() + max;
        let loss: f64 = target
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != 0.0)
            .map(|(i, &t)| -t * (lv[i] - log_z))
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(
            Cow::Owned(vec![loss]),
            vec![1],
            Op::CrossEntropy {
                logits,
                probs,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy over sigmoid outputs.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != target.len() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![target.len()],
            });
        }
        let n = lv.len() as f64;
        let loss = lv
            .iter()
            .zip(target)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.rg(logits);
        Ok(self.push(
            Cow::Owned(vec![loss]),
            vec![1],
            Op::Bce {
                logits,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(self.mismatch("mse", a, b));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let loss = av.iter().zip(bv.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / av.len() as f64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(vec![loss]), vec![1], Op::Mse { a, b }, rg))
    }

    /// Row lookup into an embedding table `[vocab, d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::TokenOutOfRange {
                id: bad as u32,
                vocab: v,
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Cow::Owned(out),
            vec![ids.len(), d],
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let (lo, _) = grads.split_at_mut(i);
            let mut sink = Sink {
                grads: lo,
                nodes: &self.nodes,
            };
            match &node.op {
                Op::Leaf { key } => {
                    if let Some(k) = key {
                        let e = out.by_key.entry(*k).or_insert_with(|| vec![0.0; g.len()]);
                        e.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                }
                Op::Binary { kind, a, b } => {
                    let scalar_b = self.shape(*a) != self.shape(*b);
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    if let Some(ga) = sink.slot(*a) {
                        match kind {
                            BinaryOp::Add | BinaryOp::Sub => ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
                            BinaryOp::Mul => {
                                if scalar_b {
                                    ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y * bv[0]);
                                } else {
                                    ga.iter_mut().zip(g.iter().zip(bv.iter())).for_each(|(x, (y, w))| *x += y * w);
                                }
                            }
                        }
                    }
                    if let Some(gb) = sink.slot(*b) {
                        let sign = if *kind == BinaryOp::Sub { -1.0 } else { 1.0 };
                        match (kind, scalar_b) {
                            (BinaryOp::Mul, true) => gb[0] += g.iter().zip(av.iter()).map(|(y, x)| y * x).sum::<f64>(),
                            (BinaryOp::Mul, false) => {
                                gb.iter_mut().zip(g.iter().zip(av.iter())).for_each(|(x, (y, w))| *x += y * w)
                            }
                            (_, true) => gb[0] += sign * g.iter().sum::<f64>(),
                            (_, false) => gb.iter_mut().zip(&g).for_each(|(x, y)| *x += sign * y),
                        }
                    }
                }
                Op::Scale { x, c } => {
                    if let Some(gx) = sink.slot(*x) {
                        gx.iter_mut().zip(&g).for_each(|(a, b)| *a += c * b);
                    }
                }
                Op::AddRow { x, row } | Op::MulRow { x, row } => {
                    let mul = matches!(node.op, Op::MulRow { .. });
                    let (_, c) = self.dims(*x);
                    let xv = self.value(*x);
                    let rv = self.value(*row);
                    if let Some(gx) = sink.slot(*x) {
                        for (gi, (gr, _)) in gx.chunks_mut(c).zip(g.chunks(c).zip(xv.chunks(c))) {
                            for j in 0..c {
                                gi[j] += if mul { gr[j] * rv[j] } else { gr[j] };
                            }
                        }
                    }
                    if let Some(grow) = sink.slot(*row) {
                        for (gr, xr) in g.chunks(c).zip(xv.chunks(c)) {
                            for j in 0..c {
                                grow[j] += if mul { gr[j] * xr[j] } else { gr[j] };
                            }
                        }
                    }
                }
                Op::MatMul { a, b, trans_b } => {
                    let (m, k) = self.dims(*a);
                    let n = node.shape[1];
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    if let Some(ga) = sink.slot(*a) {
                        // dA = dC · op(B)ᵀ
                        gemm(false, !*trans_b, m, n, k, &g, bv, 1.0, ga);
                    }
                    if let Some(gb) = sink.slot(*b) {
                        if *trans_b {
                            // B is n×k: dB = dCᵀ · A
                            gemm(true, false, n, m, k, &g, av, 1.0, gb);
                        } else {
                            gemm(true, false, k, m, n, av, &g, 1.0, gb);
                        }
                    }
                }
                Op::Transpose { x } => {
                    let (r, c) = self.dims(*x);
                    if let Some(gx) = sink.slot(*x) {
                        for i in 0..r {
                            for j in 0..c {
                                gx[i * c + j] += g[j * r + i];
                            }
                        }
                    }
                }
                Op::SoftmaxRows { x } => {
                    let (_, c) = self.dims(*x);
                    let y = &node.value;
                    if let Some(gx) = sink.slot(*x) {
                        for ((gxr, gr), yr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                            let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                gxr[j] += yr[j] * (gr[j] - s);
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (r, c) = self.dims(*x);
                    let gv = self.value(*gamma);
                    if let Some(gg) = sink.slot(*gamma) {
                        for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                gg[j] += gr[j] * hr[j];
                            }
                        }
                    }
                    if let Some(gbeta) = sink.slot(*beta) {
                        for gr in g.chunks(c) {
                            for j in 0..c {
                                gbeta[j] += gr[j];
                            }
                        }
                    }
                    if let Some(gx) = sink.slot(*x) {
                        let cf = c as f64;
                        for i in 0..r {
                            let gr = &g[i * c..(i + 1) * c];
                            let hr = &xhat[i * c..(i + 1) * c];
                            let mut sum_d = 0.0;
                            let mut sum_dh = 0.0;
                            for j in 0..c {
                                let d = gr[j] * gv[j];
                                sum_d += d;
                                sum_dh += d * hr[j];
                            }
                            for j in 0..c {
                                let d = gr[j] * gv[j];
                                gx[i * c + j] += rstd[i] / cf * (cf * d - sum_d - hr[j] * sum_dh);
                            }
                        }
                    }
                }
                Op::Gelu { x } => {
                    let xv = self.value(*x);
                    if let Some(gx) = sink.slot(*x) {
                        for j in 0..gx.len() {
                            gx[j] += g[j] * kernels::gelu_grad(xv[j]);
                        }
                    }
                }
                Op::Sum { x } => {
                    if let Some(gx) = sink.slot(*x) {
                        gx.iter_mut().for_each(|v| *v += g[0]);
                    }
                }
                Op::SumSquares { x } => {
                    let xv = self.value(*x);
                    if let Some(gx) = sink.slot(*x) {
                        gx.iter_mut().zip(xv.iter()).for_each(|(a, v)| *a += 2.0 * v * g[0]);
                    }
                }
                Op::SliceRows { x, start } => {
                    let (_, c) = self.dims(*x);
                    if let Some(gx) = sink.slot(*x) {
                        gx[start * c..start * c + g.len()].iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                }
                Op::SliceCols { x, start } => {
                    let (r, c) = self.dims(*x);
                    let len = node.shape[1];
                    if let Some(gx) = sink.slot(*x) {
                        for i in 0..r {
                            for j in 0..len {
                                gx[i * c + start + j] += g[i * len + j];
                            }
                        }
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if let Some(gp) = sink.slot(p) {
                            gp.iter_mut().zip(&g[off..off + len]).for_each(|(a, b)| *a += b);
                        }
                        off += len;
                    }
                }
                Op::ConcatCols { parts } => {
                    let total = node.shape[1];
                    let mut off = 0;
                    for &p in parts {
                        let (r, pc) = self.dims(p);
                        if let Some(gp) = sink.slot(p) {
                            for i in 0..r {
                                for j in 0..pc {
                                    gp[i * pc + j] += g[i * total + off + j];
                                }
                            }
                        }
                        off += pc;
                    }
                }
                Op::Reshape { x } => {
                    if let Some(gx) = sink.slot(*x) {
                        gx.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                }
                Op::CosineRows { a, b } => {
                    let (n, d) = self.dims(*a);
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let mut da = vec![0.0; n * d];
                    let mut db = vec![0.0; n * d];
                    for i in 0..n {
                        let ar = &av[i * d..(i + 1) * d];
                        let br = &bv[i * d..(i + 1) * d];
                        let dot = kernels::dot(ar, br);
                        let na = kernels::norm(ar);
                        let nb = kernels::norm(br);
                        let den = na * nb + COSINE_EPS;
                        let gi = g[i];
                        let ca = if na > 0.0 { dot * nb / (na * den * den) } else { 0.0 };
                        let cb = if nb > 0.0 { dot * na / (nb * den * den) } else { 0.0 };
                        for j in 0..d {
                            da[i * d + j] = gi * (br[j] / den - ca * ar[j]);
                            db[i * d + j] = gi * (ar[j] / den - cb * br[j]);
                        }
                    }
                    if let Some(ga) = sink.slot(*a) {
                        ga.iter_mut().zip(&da).for_each(|(x, y)| *x += y);
                    }
                    if let Some(gb) = sink.slot(*b) {
                        gb.iter_mut().zip(&db).for_each(|(x, y)| *x += y);
                    }
                }
                Op::CrossEntropy { logits, probs, target } => {
                    if let Some(gl) = sink.slot(*logits) {
                        let mass: f64 = target.iter().sum();
                        for j in 0..gl.len() {
                            gl[j] += g[0] * (mass * probs[j] - target[j]);
                        }
                    }
                }
                Op::Bce { logits, target } => {
                    let lv = self.value(*logits);
                    let n = lv.len() as f64;
                    if let Some(gl) = sink.slot(*logits) {
                        for j in 0..gl.len() {
                            gl[j] += g[0] * (kernels::sigmoid(lv[j]) - target[j]) / n;
                        }
                    }
                }
                Op::Mse { a, b } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let n = av.len() as f64;
                    if let Some(ga) = sink.slot(*a) {
                        for j in 0..ga.len() {
                            ga[j] += g[0] * 2.0 * (av[j] - bv[j]) / n;
                        }
                    }
                    if let Some(gb) = sink.slot(*b) {
                        for j in 0..gb.len() {
                            gb[j] -= g[0] * 2.0 * (av[j] - bv[j]) / n;
                        }
                    }
                }
                Op::Gather { table, ids } => {
                    let (_, d) = self.dims(*table);
                    if let Some(gt) = sink.slot(*table) {
                        for (r, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                gt[id * d + j] += g[r * d + j];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

struct Sink<'g, 'n, 'a> {
    grads: &'g mut [Option<Vec<f64>>],
    nodes: &'n [Node<'a>],
}

impl Sink<'_, '_, '_> {
    /// Gradient accumulator for `v`, or `None` when `v` needs no gradient.
    fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }
}
