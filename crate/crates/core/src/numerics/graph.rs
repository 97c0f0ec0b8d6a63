//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its nodes in creation
//! order, so the node list is already topologically sorted. [`Graph::backward`]
//! walks it in reverse and accumulates vector-Jacobian products.
//!
//! ```
//! use notecoder_core::numerics::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(g.value(y).data()[0], 9.0);
//! assert_eq!(grads.get(x).unwrap()[0], 6.0);
//! ```

use rand::Rng;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow { x: NodeId, bias: NodeId },
    Scale { x: NodeId, k: F },
    Gelu(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<F>, inv_std: Vec<F> },
    Dropout { x: NodeId, mask: Vec<F> },
    Gather { table: NodeId, ids: Vec<usize> },
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize },
    ConcatRows(Vec<NodeId>),
    Transpose(NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    BceWithLogits { logits: NodeId, targets: Vec<F> },
    CrossEntropy { logits: NodeId, probs: Vec<F>, rows: Vec<(usize, usize)> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: NodeId) -> Option<&[F]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<F>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn gelu<F: Scalar>(x: F) -> F {
    F::lit(0.5) * x * (F::one() + (x * F::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let cdf = F::lit(0.5) * (F::one() + (x * F::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * F::lit(0.5)).exp() * F::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn softmax_row<F: Scalar>(src: &[F], mask: Option<&[bool]>, dst: &mut [F]) {
    let keep = |j: usize| mask.map_or(true, |m| m[j]);
    let max = src
        .iter()
        .enumerate()
        .filter(|&(j, _)| keep(j))
        .fold(F::neg_infinity(), |m, (_, &v)| m.max(v));
    if max == F::neg_infinity() {
        dst.iter_mut().for_each(|d| *d = F::zero());
        return;
    }
    let mut sum = F::zero();
    for (j, (d, &s)) in dst.iter_mut().zip(src).enumerate() {
        *d = if keep(j) { (s - max).exp() } else { F::zero() };
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn wants(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id.0].value;
        (v.rows(), v.cols())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (m, k) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape(format!(
                "matmul inner dims: {m}x{k} and {kb}x{n}"
            )));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            F::one(),
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            F::zero(),
            &mut out,
        );
        let ng = self.wants(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, trans_b },
            ng,
        ))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip(&mut self, a: NodeId, b: NodeId, op: Op<F>, f: impl Fn(F, F) -> F) -> NodeId {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let ng = self.wants(&[a, b]);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a length-`c` vector to every row of an `r x c` tensor.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let c = self.value(x).cols();
        if self.value(bias).len() != c {
            return Err(Error::shape(format!(
                "add_row: bias of {} for {c} columns",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data().to_vec();
        let vx = self.value(x);
        let data = vx
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(&b).map(|(&v, &w)| v + w))
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let ng = self.wants(&[x, bias]);
        Ok(self.push(out, Op::AddRow { x, bias }, ng))
    }

    pub fn scale(&mut self, x: NodeId, k: F) -> NodeId {
        let out = self.value(x).map(|v| v * k);
        let ng = self.wants(&[x]);
        self.push(out, Op::Scale { x, k }, ng)
    }

    fn unary(&mut self, x: NodeId, op: Op<F>, f: impl Fn(F) -> F) -> NodeId {
        let out = self.value(x).map(f);
        let ng = self.wants(&[x]);
        self.push(out, op, ng)
    }

    /// Exact `x * Phi(x)` form.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Gelu(x), gelu)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Relu(x), |v| v.max(F::zero()))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Tanh(x), F::tanh)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.softmax_masked(x, None).expect("unmasked softmax")
    }

    /// Softmax over `axis` of a 2-D node.
    pub fn softmax_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        match (self.value(x).shape().len(), axis) {
            (_, a) if a + 1 == self.value(x).shape().len() => Ok(self.softmax(x)),
            (2, 0) => {
                let t = self.transpose(x);
                let s = self.softmax(t);
                Ok(self.transpose(s))
            }
            (rank, _) => Err(Error::shape(format!("softmax axis {axis} for rank {rank}"))),
        }
    }

    /// Softmax over the last axis with columns where `key_mask[j]` is false
    /// excluded (their weight is exactly zero). A row with every column
    /// masked comes out all zero.
    pub fn softmax_masked(&mut self, x: NodeId, key_mask: Option<&[bool]>) -> Result<NodeId> {
        let vx = self.value(x);
        let c = vx.cols();
        if let Some(m) = key_mask {
            if m.len() != c {
                return Err(Error::shape(format!("mask of {} for {c} columns", m.len())));
            }
        }
        let mut data = vec![F::zero(); vx.len()];
        for (src, dst) in vx.data().chunks(c).zip(data.chunks_mut(c)) {
            softmax_row(src, key_mask, dst);
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let ng = self.wants(&[x]);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    /// Standardizes each row over the last axis then applies `gain`, `bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: F) -> Result<NodeId> {
        let vx = self.value(x);
        let d = vx.cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape(format!("layer_norm: affine params for width {d}")));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = vx.rows();
        let mut xhat = vec![F::zero(); vx.len()];
        let mut inv_std = vec![F::zero(); rows];
        let mut out = vec![F::zero(); vx.len()];
        let df = F::from_usize(d).unwrap();
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let is = F::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        let ng = self.wants(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Inverted dropout: in training, zeroes each entry with probability
    /// `rate` and scales survivors by `1/(1-rate)`. Identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: NodeId,
        rate: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::OutOfRange(format!("dropout rate {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = F::lit(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let vx = self.value(x);
        let data = vx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let ng = self.wants(&[x]);
        Ok(self.push(out, Op::Dropout { x, mask }, ng))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        let (r, c) = (vt.rows(), vt.cols());
        if ids.is_empty() {
            return Err(Error::Empty("gather ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= r {
                return Err(Error::OutOfRange(format!("row {i} of {r}")));
            }
            data.extend_from_slice(vt.row(i));
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        let ng = self.wants(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > c {
            return Err(Error::OutOfRange(format!("columns {start}..{} of {c}", start + len)));
        }
        let vx = self.value(x);
        let data = (0..r)
            .flat_map(|i| vx.row(i)[start..start + len].iter().copied())
            .collect();
        let out = Tensor::new(vec![r, len], data)?;
        let ng = self.wants(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| Error::Empty("concat".into()))?;
        let r = self.dims(first).0;
        if parts.iter().any(|&p| self.dims(p).0 != r) {
            return Err(Error::shape("concat_cols: row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![r, total], data)?;
        let ng = self.wants(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > r {
            return Err(Error::OutOfRange(format!("rows {start}..{} of {r}", start + len)));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new(vec![len, c], data)?;
        let ng = self.wants(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| Error::Empty("concat".into()))?;
        let c = self.dims(first).1;
        if parts.iter().any(|&p| self.dims(p).1 != c) {
            return Err(Error::shape("concat_rows: column counts differ"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let r = data.len() / c;
        let out = Tensor::new(vec![r, c], data)?;
        let ng = self.wants(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).transpose();
        let ng = self.wants(&[x]);
        self.push(out, Op::Transpose(x), ng)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.wants(&[x]);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().copied().sum();
        let ng = self.wants(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<F>() / F::from_usize(v.len()).unwrap();
        let ng = self.wants(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`,
    /// evaluated as `max(z,0) - z*t + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[F]) -> Result<NodeId> {
        let vz = self.value(logits);
        if vz.len() != targets.len() {
            return Err(Error::shape(format!(
                "bce: {} logits vs {} targets",
                vz.len(),
                targets.len()
            )));
        }
        let n = F::from_usize(targets.len()).unwrap();
        let total: F = vz
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(F::zero()) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let ng = self.wants(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Mean token cross-entropy over rows where `mask` is set; `targets[i]`
    /// is the class of row `i`.
    pub fn masked_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<NodeId> {
        let (n, v) = self.dims(logits);
        if targets.len() != n || mask.len() != n {
            return Err(Error::shape(format!(
                "cross entropy: {n} rows, {} targets, {} mask",
                targets.len(),
                mask.len()
            )));
        }
        let rows: Vec<(usize, usize)> = (0..n)
            .filter(|&i| mask[i])
            .map(|i| (i, targets[i]))
            .collect();
        if rows.is_empty() {
            return Err(Error::NoMlmTargets);
        }
        let vz = self.value(logits);
        let mut probs = vec![F::zero(); rows.len() * v];
        let mut total = F::zero();
        for (k, &(i, t)) in rows.iter().enumerate() {
            if t >= v {
                return Err(Error::OutOfRange(format!("target {t} of {v} classes")));
            }
            let dst = &mut probs[k * v..(k + 1) * v];
            softmax_row(vz.row(i), None, dst);
            let row = vz.row(i);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<F>().ln();
            total += lse - row[t];
        }
        let loss = total / F::from_usize(rows.len()).unwrap();
        let ng = self.wants(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                rows,
            },
            ng,
        ))
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<F>>], id: NodeId) -> Option<&'g mut [F]> {
        if !self.needs(id) {
            return None;
        }
        let n = self.nodes[id.0].value.len();
        Some(grads[id.0].get_or_insert_with(|| vec![F::zero(); n]).as_mut_slice())
    }

    fn propagate(&self, node: &Node<F>, dy: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.dims(a);
                let n = node.value.cols();
                let va = self.value(a).data();
                let vb = self.value(b).data();
                if let Some(ga) = self.acc(grads, a) {
                    // dA = dC * op(B)^T
                    F::gemm(m, n, k, F::one(), dy, false, vb, !trans_b, F::one(), ga);
                }
                if let Some(gb) = self.acc(grads, b) {
                    if trans_b {
                        // B is n x k: dB = dC^T * A
                        F::gemm(n, m, k, F::one(), dy, true, va, false, F::one(), gb);
                    } else {
                        // dB = A^T * dC
                        F::gemm(k, m, n, F::one(), va, true, dy, false, F::one(), gb);
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
                if let Some(gb) = self.acc(grads, b) {
                    gb.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
                if let Some(gb) = self.acc(grads, b) {
                    gb.iter_mut().zip(dy).for_each(|(g, &d)| *g -= d);
                }
            }
            &Op::Mul(a, b) => {
                let va = self.value(a).data();
                let vb = self.value(b).data();
                if let Some(ga) = self.acc(grads, a) {
                    for ((g, &d), &w) in ga.iter_mut().zip(dy).zip(vb) {
                        *g += d * w;
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for ((g, &d), &w) in gb.iter_mut().zip(dy).zip(va) {
                        *g += d * w;
                    }
                }
            }
            &Op::AddRow { x, bias } => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
                let c = node.value.cols();
                if let Some(gb) = self.acc(grads, bias) {
                    for row in dy.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            &Op::Scale { x, k } => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().zip(dy).for_each(|(g, &d)| *g += d * k);
                }
            }
            &Op::Gelu(x) => {
                let vx = self.value(x).data();
                if let Some(gx) = self.acc(grads, x) {
                    for ((g, &d), &v) in gx.iter_mut().zip(dy).zip(vx) {
                        *g += d * gelu_grad(v);
                    }
                }
            }
            &Op::Relu(x) => {
                let vx = self.value(x).data();
                if let Some(gx) = self.acc(grads, x) {
                    for ((g, &d), &v) in gx.iter_mut().zip(dy).zip(vx) {
                        if v > F::zero() {
                            *g += d;
                        }
                    }
                }
            }
            &Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, x) {
                    for ((g, &d), &s) in gx.iter_mut().zip(dy).zip(y) {
                        *g += d * s * (F::one() - s);
                    }
                }
            }
            &Op::Tanh(x) => {
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, x) {
                    for ((g, &d), &t) in gx.iter_mut().zip(dy).zip(y) {
                        *g += d * (F::one() - t * t);
                    }
                }
            }
            &Op::Softmax(x) => {
                let c = node.value.cols();
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, x) {
                    for ((gr, dr), yr) in gx.chunks_mut(c).zip(dy.chunks(c)).zip(y.chunks(c)) {
                        let dot: F = dr.iter().zip(yr).map(|(&d, &s)| d * s).sum();
                        for ((g, &d), &s) in gr.iter_mut().zip(dr).zip(yr) {
                            *g += s * (d - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let df = F::from_usize(d).unwrap();
                let gv = self.value(*gain).data();
                if let Some(gg) = self.acc(grads, *gain) {
                    for (dr, hr) in dy.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += dr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for dr in dy.chunks(d) {
                        gb.iter_mut().zip(dr).for_each(|(g, &v)| *g += v);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, (dr, hr)) in dy.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let dh: Vec<F> = dr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let mean_dh = dh.iter().copied().sum::<F>() / df;
                        let mean_dh_h = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<F>() / df;
                        for j in 0..d {
                            gx[r * d + j] += inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((g, &d), &m) in gx.iter_mut().zip(dy).zip(mask) {
                        *g += d * m;
                    }
                }
            }
            Op::Gather { table, ids } => {
                let c = node.value.cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (&i, dr) in ids.iter().zip(dy.chunks(c)) {
                        gt[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(dr)
                            .for_each(|(g, &d)| *g += d);
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                let len = node.value.cols();
                let c = self.value(x).cols();
                if let Some(gx) = self.acc(grads, x) {
                    for (i, dr) in dy.chunks(len).enumerate() {
                        gx[i * c + start..i * c + start + len]
                            .iter_mut()
                            .zip(dr)
                            .for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(gp) = self.acc(grads, p) {
                        for (i, gr) in gp.chunks_mut(w).enumerate() {
                            gr.iter_mut()
                                .zip(&dy[i * total + offset..i * total + offset + w])
                                .for_each(|(g, &d)| *g += d);
                        }
                    }
                    offset += w;
                }
            }
            &Op::SliceRows { x, start } => {
                let c = node.value.cols();
                if let Some(gx) = self.acc(grads, x) {
                    gx[start * c..start * c + dy.len()]
                        .iter_mut()
                        .zip(dy)
                        .for_each(|(g, &d)| *g += d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.iter_mut()
                            .zip(&dy[offset..offset + n])
                            .for_each(|(g, &d)| *g += d);
                    }
                    offset += n;
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = self.dims(x);
                if let Some(gx) = self.acc(grads, x) {
                    // dy is c x r
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += dy[j * r + i];
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().for_each(|g| *g += dy[0]);
                }
            }
            &Op::Mean(x) => {
                let n = F::from_usize(self.value(x).len()).unwrap();
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().for_each(|g| *g += dy[0] / n);
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let vz = self.value(*logits).data();
                let n = F::from_usize(targets.len()).unwrap();
                if let Some(gz) = self.acc(grads, *logits) {
                    for ((g, &z), &t) in gz.iter_mut().zip(vz).zip(targets) {
                        *g += dy[0] * (sigmoid(z) - t) / n;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                rows,
            } => {
                let v = self.value(*logits).cols();
                let n = F::from_usize(rows.len()).unwrap();
                if let Some(gz) = self.acc(grads, *logits) {
                    for (k, &(i, t)) in rows.iter().enumerate() {
                        let p = &probs[k * v..(k + 1) * v];
                        let gr = &mut gz[i * v..(i + 1) * v];
                        for j in 0..v {
                            let onehot = if j == t { F::one() } else { F::zero() };
                            gr[j] += dy[0] * (p[j] - onehot) / n;
                        }
                    }
                }
            }
        }
    }
}
