//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Every operation appends a node; node ids are therefore already in
//! topological order and `backward` walks them in reverse.

use std::cell::RefCell;

use super::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MulRow(usize, usize),
    ScaleRows(usize, usize),
    Softmax(usize),
    LayerNorm { x: usize, inv_std: Vec<f64> },
    Gelu(usize),
    Embedding { table: usize, ids: Vec<usize> },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    MaskFill { x: usize, mask: Vec<bool> },
    Sum(usize),
    CrossEntropy { logits: usize, targets: Vec<usize>, pad: Option<usize>, probs: Vec<f64>, count: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
///
/// A tape is confined to a single thread; independent tapes can be driven
/// from different threads at the same time.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_rows"));
        }
        let (value, ids) = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].id].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let v = &nodes[p.id].value;
                if v.cols() != cols {
                    return Err(Error::shape("concat_rows", nodes[parts[0].id].value.shape(), v.shape()));
                }
                rows += v.rows();
                data.extend_from_slice(v.data());
            }
            (Tensor::matrix(rows, cols, data)?, parts.iter().map(|p| p.id).collect::<Vec<_>>())
        };
        let rg = self.requires(&ids);
        Ok(self.push(value, Op::ConcatRows(ids), rg))
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_cols"));
        }
        let (value, ids) = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].id].value.rows();
            for p in parts {
                let v = &nodes[p.id].value;
                if v.rows() != rows {
                    return Err(Error::shape("concat_cols", nodes[parts[0].id].value.shape(), v.shape()));
                }
            }
            let total: usize = parts.iter().map(|p| nodes[p.id].value.cols()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(nodes[p.id].value.row(r));
                }
            }
            (Tensor::matrix(rows, total, data)?, parts.iter().map(|p| p.id).collect::<Vec<_>>())
        };
        let rg = self.requires(&ids);
        Ok(self.push(value, Op::ConcatCols(ids), rg))
    }

    /// Row lookup `table[ids]`.
    pub fn embedding<'t>(&'t self, table: Var<'t>, ids: &[usize]) -> Result<Var<'t>> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.id].value;
            let n = t.rows();
            let mut data = Vec::with_capacity(ids.len() * t.cols());
            for &i in ids {
                if i >= n {
                    return Err(Error::InvalidArgument(format!("embedding index {i} out of range {n}")));
                }
                data.extend_from_slice(t.row(i));
            }
            Tensor::matrix(ids.len(), t.cols(), data)?
        };
        let rg = self.requires(&[table.id]);
        Ok(self.push(value, Op::Embedding { table: table.id, ids: ids.to_vec() }, rg))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.requires(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    fn with<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn with2<R>(&self, other: &Var<'t>, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.id].value, &nodes[other.id].value)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let value = self.with2(other, |a, b| {
            if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut out = vec![0.0; m * n];
            gemm_acc(a.data(), b.data(), &mut out, m, k, n);
            Tensor::matrix(m, n, out)
        })?;
        Ok(self.binary(other, value, Op::MatMul(self.id, other.id)))
    }

    pub fn t(&self) -> Result<Var<'t>> {
        let value = self.with(|a| {
            if a.shape().len() != 2 {
                return Err(Error::shape("transpose", a.shape(), &[]));
            }
            let (m, n) = (a.rows(), a.cols());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = a.data()[i * n + j];
                }
            }
            Tensor::matrix(n, m, out)
        })?;
        Ok(self.unary(value, Op::Transpose(self.id)))
    }

    fn zip(&self, other: &Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.with2(other, |a, b| {
            if a.shape() != b.shape() {
                return Err(Error::shape(name, a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)
        })
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    /// Element-wise product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let v = self.with(|a| a.map(|x| x * s));
        self.unary(v, Op::Scale(self.id, s))
    }

    fn row_broadcast(&self, vec: &Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.with2(vec, |a, b| {
            if b.len() != a.cols() || b.shape().len() > 1 && b.rows() != 1 {
                return Err(Error::shape(name, a.shape(), b.shape()));
            }
            let c = a.cols();
            let data = a.data().iter().enumerate().map(|(i, &x)| f(x, b.data()[i % c])).collect();
            Tensor::new(a.shape().to_vec(), data)
        })
    }

    /// Adds a `[cols]` vector to every row.
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let v = self.row_broadcast(bias, "add_row", |x, y| x + y)?;
        Ok(self.binary(bias, v, Op::AddRow(self.id, bias.id)))
    }

    /// Multiplies every row element-wise by a `[cols]` vector.
    pub fn mul_row(&self, gain: &Var<'t>) -> Result<Var<'t>> {
        let v = self.row_broadcast(gain, "mul_row", |x, y| x * y)?;
        Ok(self.binary(gain, v, Op::MulRow(self.id, gain.id)))
    }

    /// Multiplies row `k` by `weights[k]`.
    pub fn scale_rows(&self, weights: &Var<'t>) -> Result<Var<'t>> {
        let v = self.with2(weights, |a, w| {
            if w.len() != a.rows() {
                return Err(Error::shape("scale_rows", a.shape(), w.shape()));
            }
            let c = a.cols();
            let data = a.data().iter().enumerate().map(|(i, &x)| x * w.data()[i / c]).collect();
            Tensor::new(a.shape().to_vec(), data)
        })?;
        Ok(self.binary(weights, v, Op::ScaleRows(self.id, weights.id)))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&self) -> Var<'t> {
        let v = self.with(|a| {
            let c = a.cols();
            let mut out = a.data().to_vec();
            for row in out.chunks_mut(c.max(1)) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for x in row.iter_mut() {
                    *x = if m == f64::NEG_INFINITY { 1.0 } else { (*x - m).exp() };
                    z += *x;
                }
                for x in row.iter_mut() {
                    *x /= z;
                }
            }
            Tensor::new(a.shape().to_vec(), out).expect("same shape")
        });
        self.unary(v, Op::Softmax(self.id))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self, eps: f64) -> Var<'t> {
        let (v, inv_std) = self.with(|a| {
            let c = a.cols();
            let mut out = a.data().to_vec();
            let mut inv = Vec::with_capacity(a.rows());
            for row in out.chunks_mut(c.max(1)) {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                let is = 1.0 / (var + eps).sqrt();
                for x in row.iter_mut() {
                    *x = (*x - mean) * is;
                }
                inv.push(is);
            }
            (Tensor::new(a.shape().to_vec(), out).expect("same shape"), inv)
        });
        self.unary(v, Op::LayerNorm { x: self.id, inv_std })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t> {
        let v = self.with(|a| a.map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())));
        self.unary(v, Op::Gelu(self.id))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.with(|a| {
            if start >= end || end > a.rows() {
                return Err(Error::InvalidArgument(format!("row slice {start}..{end} of {:?}", a.shape())));
            }
            let c = a.cols();
            Tensor::matrix(end - start, c, a.data()[start * c..end * c].to_vec())
        })?;
        Ok(self.unary(v, Op::SliceRows { x: self.id, start }))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.with(|a| {
            if start >= end || end > a.cols() {
                return Err(Error::InvalidArgument(format!("column slice {start}..{end} of {:?}", a.shape())));
            }
            let mut data = Vec::with_capacity(a.rows() * (end - start));
            for r in 0..a.rows() {
                data.extend_from_slice(&a.row(r)[start..end]);
            }
            Tensor::matrix(a.rows(), end - start, data)
        })?;
        Ok(self.unary(v, Op::SliceCols { x: self.id, start }))
    }

    /// Replaces entries where `mask` is true with `fill`.
    pub fn mask_fill(&self, mask: &[bool], fill: f64) -> Result<Var<'t>> {
        let v = self.with(|a| {
            if mask.len() != a.len() {
                return Err(Error::shape("mask_fill", a.shape(), &[mask.len()]));
            }
            let data = a.data().iter().zip(mask).map(|(&x, &m)| if m { fill } else { x }).collect();
            Tensor::new(a.shape().to_vec(), data)
        })?;
        Ok(self.unary(v, Op::MaskFill { x: self.id, mask: mask.to_vec() }))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = self.with(|a| Tensor::scalar(a.data().iter().sum()));
        self.unary(v, Op::Sum(self.id))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `self`, skipping positions whose target equals `pad`.
    pub fn cross_entropy(&self, targets: &[usize], pad: Option<usize>) -> Result<Var<'t>> {
        let (loss, probs, count) = self.with(|a| {
            if a.shape().len() != 2 || a.rows() != targets.len() {
                return Err(Error::shape("cross_entropy", a.shape(), &[targets.len()]));
            }
            let v = a.cols();
            let mut probs = vec![0.0; a.len()];
            let mut total = 0.0;
            let mut count = 0;
            for (r, &t) in targets.iter().enumerate() {
                if t >= v {
                    return Err(Error::InvalidArgument(format!("target {t} out of vocab range {v}")));
                }
                let row = a.row(r);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
                let lz = m + z.ln();
                for (j, x) in row.iter().enumerate() {
                    probs[r * v + j] = (x - lz).exp();
                }
                if Some(t) != pad {
                    total += lz - row[t];
                    count += 1;
                }
            }
            if count == 0 {
                return Err(Error::Empty("cross_entropy: every target is padding"));
            }
            Ok((total / count as f64, probs, count))
        })?;
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                pad,
                probs,
                count,
            },
        ))
    }

    /// Reverse sweep from this scalar node.
    pub fn backward(&self) -> Result<Gradients> {
        let nodes = self.tape.nodes.borrow();
        let root = &nodes[self.id].value;
        if root.len() != 1 {
            return Err(Error::shape("backward (needs scalar)", root.shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[self.id] = Some(vec![1.0]);

        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let out = &node.value;
            {
                let mut acc = |target: usize, f: &mut dyn FnMut(&mut [f64])| {
                    if !nodes[target].requires_grad {
                        return;
                    }
                    let slot = grads[target].get_or_insert_with(|| vec![0.0; nodes[target].value.len()]);
                    f(slot);
                };
                match &node.op {
                    Op::Leaf => {}
                    Op::MatMul(a, b) => {
                        let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                        acc(*a, &mut |s| gemm_nt_acc(&g, bv.data(), s, m, k, n));
                        acc(*b, &mut |s| gemm_tn_acc(av.data(), &g, s, m, k, n));
                    }
                    Op::Transpose(a) => {
                        let (m, n) = (out.rows(), out.cols());
                        acc(*a, &mut |s| {
                            for i in 0..m {
                                for j in 0..n {
                                    s[j * m + i] += g[i * n + j];
                                }
                            }
                        });
                    }
                    Op::Add(a, b) => {
                        acc(*a, &mut |s| add_into(s, &g));
                        acc(*b, &mut |s| add_into(s, &g));
                    }
                    Op::Sub(a, b) => {
                        acc(*a, &mut |s| add_into(s, &g));
                        acc(*b, &mut |s| s.iter_mut().zip(&g).for_each(|(x, y)| *x -= y));
                    }
                    Op::Mul(a, b) => {
                        let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                        acc(*a, &mut |s| s.iter_mut().zip(&g).zip(bv).for_each(|((x, y), z)| *x += y * z));
                        acc(*b, &mut |s| s.iter_mut().zip(&g).zip(av).for_each(|((x, y), z)| *x += y * z));
                    }
                    Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += c * y)),
                    Op::AddRow(a, b) => {
                        let c = out.cols();
                        acc(*a, &mut |s| add_into(s, &g));
                        acc(*b, &mut |s| g.iter().enumerate().for_each(|(i, y)| s[i % c] += y));
                    }
                    Op::MulRow(a, b) => {
                        let c = out.cols();
                        let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                        acc(*a, &mut |s| g.iter().enumerate().for_each(|(i, y)| s[i] += y * bv[i % c]));
                        acc(*b, &mut |s| g.iter().enumerate().for_each(|(i, y)| s[i % c] += y * av[i]));
                    }
                    Op::ScaleRows(a, w) => {
                        let c = out.cols();
                        let (av, wv) = (nodes[*a].value.data(), nodes[*w].value.data());
                        acc(*a, &mut |s| g.iter().enumerate().for_each(|(i, y)| s[i] += y * wv[i / c]));
                        acc(*w, &mut |s| g.iter().enumerate().for_each(|(i, y)| s[i / c] += y * av[i]));
                    }
                    Op::Softmax(a) => {
                        let c = out.cols().max(1);
                        let y = out.data();
                        acc(*a, &mut |s| {
                            for (r, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                                let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                                for j in 0..c {
                                    s[r * c + j] += yr[j] * (gr[j] - dot);
                                }
                            }
                        });
                    }
                    Op::LayerNorm { x, inv_std } => {
                        let c = out.cols().max(1);
                        let y = out.data();
                        let n = c as f64;
                        acc(*x, &mut |s| {
                            for (r, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                                let sg: f64 = gr.iter().sum();
                                let sgy: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                                for j in 0..c {
                                    s[r * c + j] += inv_std[r] / n * (n * gr[j] - sg - yr[j] * sgy);
                                }
                            }
                        });
                    }
                    Op::Gelu(a) => {
                        let xv = nodes[*a].value.data();
                        acc(*a, &mut |s| {
                            for ((sv, &gv), &x) in s.iter_mut().zip(&g).zip(xv) {
                                let u = GELU_C * (x + GELU_A * x * x * x);
                                let th = u.tanh();
                                let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                                *sv += gv * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
                            }
                        });
                    }
                    Op::Embedding { table, ids } => {
                        let c = out.cols();
                        acc(*table, &mut |s| {
                            for (r, &i) in ids.iter().enumerate() {
                                add_into(&mut s[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                            }
                        });
                    }
                    Op::ConcatRows(parts) => {
                        let mut offset = 0;
                        for &p in parts {
                            let len = nodes[p].value.len();
                            acc(p, &mut |s| add_into(s, &g[offset..offset + len]));
                            offset += len;
                        }
                    }
                    Op::ConcatCols(parts) => {
                        let total = out.cols();
                        let rows = out.rows();
                        let mut offset = 0;
                        for &p in parts {
                            let c = nodes[p].value.cols();
                            acc(p, &mut |s| {
                                for r in 0..rows {
                                    add_into(&mut s[r * c..(r + 1) * c], &g[r * total + offset..r * total + offset + c]);
                                }
                            });
                            offset += c;
                        }
                    }
                    Op::SliceRows { x, start } => {
                        let c = out.cols();
                        let off = start * c;
                        acc(*x, &mut |s| add_into(&mut s[off..off + g.len()], &g));
                    }
                    Op::SliceCols { x, start } => {
                        let (rows, w) = (out.rows(), out.cols());
                        let c = nodes[*x].value.cols();
                        acc(*x, &mut |s| {
                            for r in 0..rows {
                                add_into(&mut s[r * c + start..r * c + start + w], &g[r * w..(r + 1) * w]);
                            }
                        });
                    }
                    Op::MaskFill { x, mask } => {
                        acc(*x, &mut |s| {
                            for ((sv, &gv), &m) in s.iter_mut().zip(&g).zip(mask) {
                                if !m {
                                    *sv += gv;
                                }
                            }
                        });
                    }
                    Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
                    Op::CrossEntropy {
                        logits,
                        targets,
                        pad,
                        probs,
                        count,
                    } => {
                        let v = nodes[*logits].value.cols();
                        let scale = g[0] / *count as f64;
                        acc(*logits, &mut |s| {
                            for (r, &t) in targets.iter().enumerate() {
                                if Some(t) == *pad {
                                    continue;
                                }
                                for j in 0..v {
                                    s[r * v + j] += scale * probs[r * v + j];
                                }
                                s[r * v + t] -= scale;
                            }
                        });
                    }
                }
            }
            // keep gradients of leaves for the caller
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&nodes[i].op, g) {
                (Op::Leaf, Some(g)) => Some(Tensor::new(nodes[i].value.shape().to_vec(), g).expect("grad shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Leaf gradients produced by [`Var::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `∂loss/∂leaf`, or `None` when the leaf does not influence the loss.
    pub fn wrt(&self, leaf: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(leaf.id).and_then(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_small_cases() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        assert_eq!(x.softmax().value().data(), &[0.5, 0.5]);
        let y = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).softmax().value();
        // exp(k)/sum exp for k=1..3, evaluated independently
        let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
        let expected: Vec<f64> = (1..=3).map(|k| (k as f64).exp() / z).collect();
        for (a, b) in y.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((y.data()[0] - 0.09003).abs() < 1e-5);
        assert!((y.data()[1] - 0.24473).abs() < 1e-5);
        assert!((y.data()[2] - 0.66524).abs() < 1e-5);
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let tape = Tape::new();
        let y = tape.constant(t(2, 3, &[1e4, 1e4 - 1.0, -1e4, -800.0, -801.0, 1e-3])).softmax().value();
        for r in 0..2 {
            let s: f64 = y.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(y.row(r).iter().all(|p| p.is_finite() && *p >= 0.0));
        }
    }

    #[test]
    fn matmul_identity_and_shape_error() {
        let tape = Tape::new();
        let a = tape.constant(t(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let i = tape.constant(Tensor::identity(2));
        assert_eq!(i.matmul(&a).unwrap().value(), a.value());
        let err = a.matmul(&a).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn linear_and_quadratic_grads() {
        let tape = Tape::new();
        let x = tape.leaf(t(2, 2, &[1.0, -2.0, 3.0, 0.5]));
        let g = x.sum().backward().unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[1.0; 4]);

        let tape = Tape::new();
        let x = tape.leaf(t(2, 2, &[1.0, -2.0, 3.0, 0.5]));
        let g = x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[2.0, -4.0, 6.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[1.0, 2.0]));
        assert!(x.backward().is_err());
    }

    #[test]
    fn cross_entropy_limits() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[3, 4]));
        let l = logits.cross_entropy(&[0, 1, 3], None).unwrap().value().item();
        assert!((l - 4f64.ln()).abs() < 1e-15);

        let big = tape.constant(t(1, 3, &[50.0, 0.0, 0.0]));
        assert!(big.cross_entropy(&[0], None).unwrap().value().item() < 1e-20);
        assert!(big.cross_entropy(&[0], Some(0)).is_err());
    }

    #[test]
    fn cross_entropy_ignores_pad_positions() {
        let tape = Tape::new();
        let logits = tape.leaf(t(2, 3, &[0.1, 0.2, 0.3, 5.0, -1.0, 2.0]));
        let full = logits.cross_entropy(&[2, 0], Some(0)).unwrap();
        let only = tape.constant(t(1, 3, &[0.1, 0.2, 0.3])).cross_entropy(&[2], None).unwrap();
        assert_eq!(full.value().item(), only.value().item());
        let g = full.backward().unwrap();
        assert!(g.wrt(&logits).unwrap().row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let a = tape.constant(t(1, 2, &[1.0, 2.0]));
        let b = tape.leaf(t(1, 2, &[3.0, 4.0]));
        let g = a.mul(&b).unwrap().sum().backward().unwrap();
        assert!(g.wrt(&a).is_none());
        assert_eq!(g.wrt(&b).unwrap().data(), &[1.0, 2.0]);
    }
}
