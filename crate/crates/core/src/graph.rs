//! Reverse-accumulation gradient engine over an explicit operation tape.
//!
//! Every forward computation in the crate is recorded on a [`Graph`]: nodes are
//! appended in execution order, so the tape is topologically sorted by
//! construction and [`Graph::backward`] is a single reverse sweep. Parameters
//! enter the tape as named leaves; [`Gradients::named`] maps the accumulated
//! adjoints back onto those names.

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::nn::ParamSet;
use crate::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Min(NodeId, NodeId),
    Max(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Abs(NodeId),
    Relu(NodeId),
    Square(NodeId),
    Pow(NodeId, f64),
    SoftmaxRows(NodeId),
    SoftmaxCols(NodeId),
    LogSoftmaxRows(NodeId),
    Sum(NodeId),
    MeanRows(NodeId),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    GatherElems(NodeId, Vec<(usize, usize)>),
    Reshape(NodeId),
    OuterAdd(NodeId, NodeId),
    MixSlots(NodeId, NodeId),
    NormalizeRowsSum(NodeId),
    CosineRows(NodeId, NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation tape. Values are immutable once recorded.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
    param_index: HashMap<String, NodeId>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// A differentiable leaf not bound to a parameter name.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Const, false)
    }

    /// Binds the named parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_index.get(name) {
            return Ok(id);
        }
        let value = params.get(name)?.clone();
        let id = self.push(value, Op::Leaf, true);
        self.params.push((name.to_string(), id));
        self.param_index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Copy of a value with no gradient path back to its source.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let value = self.value(id).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (va.rows(), va.cols(), vb.rows(), vb.cols());
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} by {k2}x{n}")));
        }
        let out = Tensor::from_parts(vec![m, n], matmul_raw(va.data(), vb.data(), m, k, n));
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, n, k2) = (va.rows(), va.cols(), vb.rows(), vb.cols());
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("{m}x{k} by ({n}x{k2})^T")));
        }
        let out = Tensor::from_parts(vec![m, n], matmul_nt_raw(va.data(), vb.data(), m, k, n));
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMulNT(a, b), ng))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).transpose();
        let ng = self.needs(&[a]);
        self.push(out, Op::Transpose(a), ng)
    }

    fn binary(&mut self, name: &'static str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<NodeId> {
        same_shape(name, self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), f)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("min", a, b, f64::min, Op::Min(a, b))
    }

    pub fn max(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("max", a, b, f64::max, Op::Max(a, b))
    }

    /// `a [m,n] + row [1,n]` broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        let n = va.cols();
        if vr.len() != n {
            return Err(shape_err("add_row", format!("{:?} + {:?}", va.shape(), vr.shape())));
        }
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, b) in chunk.iter_mut().zip(vr.data()) {
                *x += b;
            }
        }
        let out = Tensor::from_parts(vec![va.rows(), n], data);
        let ng = self.needs(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    /// `a [m,n] * col [m,1]` broadcast over columns.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (va, vc) = (self.value(a), self.value(col));
        let (m, n) = (va.rows(), va.cols());
        if vc.len() != m {
            return Err(shape_err("mul_col", format!("{:?} * {:?}", va.shape(), vc.shape())));
        }
        let mut data = va.data().to_vec();
        for (r, chunk) in data.chunks_mut(n).enumerate() {
            let s = vc.data()[r];
            chunk.iter_mut().for_each(|x| *x *= s);
        }
        let out = Tensor::from_parts(vec![m, n], data);
        let ng = self.needs(&[a, col]);
        Ok(self.push(out, Op::MulCol(a, col), ng))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let out = self.value(a).map(f);
        let ng = self.needs(&[a]);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn offset(&mut self, a: NodeId, s: f64) -> NodeId {
        self.unary(a, |x| x + s, Op::Offset(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// `x^e` for nonnegative `x`.
    pub fn pow(&mut self, a: NodeId, e: f64) -> NodeId {
        self.unary(a, |x| x.powf(e), Op::Pow(a, e))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let n = va.cols();
        let mut data = va.data().to_vec();
        data.chunks_mut(n).for_each(softmax_in_place);
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.needs(&[a]);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Softmax down each column (normalizes across rows).
    pub fn softmax_cols(&mut self, a: NodeId) -> NodeId {
        let out = {
            let t = self.value(a).transpose();
            let n = t.cols();
            let mut data = t.into_data();
            data.chunks_mut(n).for_each(softmax_in_place);
            let rows = self.value(a).cols();
            Tensor::from_parts(vec![rows, n], data).transpose()
        };
        let ng = self.needs(&[a]);
        self.push(out, Op::SoftmaxCols(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let n = va.cols();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.needs(&[a]);
        self.push(out, Op::LogSoftmaxRows(a), ng)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(&[a]);
        self.push(out, Op::Sum(a), ng)
    }

    /// Column means, `[m,n] -> [1,n]`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (m, n) = (va.rows(), va.cols());
        if m == 0 {
            return Err(Error::Empty("mean_rows"));
        }
        let mut out = vec![0.0; n];
        for row in va.data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor::from_parts(vec![1, n], out), Op::MeanRows(a), ng))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        let n = va.cols();
        if start + len > va.rows() {
            return Err(shape_err("slice_rows", format!("{start}+{len} > {}", va.rows())));
        }
        let out = Tensor::from_parts(vec![len, n], va.data()[start * n..(start + len) * n].to_vec());
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::SliceRows(a, start), ng))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        let (m, n) = (va.rows(), va.cols());
        if start + len > n {
            return Err(shape_err("slice_cols", format!("{start}+{len} > {n}")));
        }
        let mut data = Vec::with_capacity(m * len);
        for row in va.data().chunks(n) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor::from_parts(vec![m, len], data), Op::SliceCols(a, start), ng))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or(Error::Empty("concat_rows"))?;
        let n = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != n {
                return Err(shape_err("concat_rows", format!("{} vs {n} columns", v.cols())));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ng = self.needs(parts);
        Ok(self.push(Tensor::from_parts(vec![rows, n], data), Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let va = self.value(a);
        let n = va.cols();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= va.rows() {
                return Err(shape_err("gather_rows", format!("row {i} of {}", va.rows())));
            }
            data.extend_from_slice(va.row_slice(i));
        }
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor::from_parts(vec![idx.len(), n], data), Op::GatherRows(a, idx.to_vec()), ng))
    }

    /// Picks `(row, col)` entries into a column vector `[len,1]`.
    pub fn gather_elems(&mut self, a: NodeId, idx: &[(usize, usize)]) -> Result<NodeId> {
        let va = self.value(a);
        let mut data = Vec::with_capacity(idx.len());
        for &(r, c) in idx {
            if r >= va.rows() || c >= va.cols() {
                return Err(shape_err("gather_elems", format!("({r},{c}) of {:?}", va.shape())));
            }
            data.push(va.get(r, c));
        }
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor::from_parts(vec![idx.len(), 1], data), Op::GatherElems(a, idx.to_vec()), ng))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(a).clone().reshaped(shape)?;
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// `out[k*N + i] = a[k] + b[i]` for `a [K,h]`, `b [N,h]`.
    pub fn outer_add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let h = va.cols();
        if vb.cols() != h {
            return Err(shape_err("outer_add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let (k, n) = (va.rows(), vb.rows());
        let mut data = Vec::with_capacity(k * n * h);
        for kk in 0..k {
            let ar = va.row_slice(kk);
            for i in 0..n {
                data.extend(ar.iter().zip(vb.row_slice(i)).map(|(x, y)| x + y));
            }
        }
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![k * n, h], data), Op::OuterAdd(a, b), ng))
    }

    /// `out[i] = sum_k masks[k,i] * recon[k*N + i]` for `recon [K*N,d]`, `masks [K,N]`.
    pub fn mix_slots(&mut self, recon: NodeId, masks: NodeId) -> Result<NodeId> {
        let (vr, vm) = (self.value(recon), self.value(masks));
        let (k, n) = (vm.rows(), vm.cols());
        let d = vr.cols();
        if vr.rows() != k * n {
            return Err(shape_err("mix_slots", format!("{:?} with masks {:?}", vr.shape(), vm.shape())));
        }
        let mut out = vec![0.0; n * d];
        for kk in 0..k {
            for i in 0..n {
                let m = vm.get(kk, i);
                let src = vr.row_slice(kk * n + i);
                for (o, s) in out[i * d..(i + 1) * d].iter_mut().zip(src) {
                    *o += m * s;
                }
            }
        }
        let ng = self.needs(&[recon, masks]);
        Ok(self.push(Tensor::from_parts(vec![n, d], out), Op::MixSlots(recon, masks), ng))
    }

    /// Divides each row by its sum; rows must have positive sums.
    pub fn normalize_rows_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let n = va.cols();
        let mut data = va.data().to_vec();
        for (r, row) in data.chunks_mut(n).enumerate() {
            let s: f64 = row.iter().sum();
            if !(s > 0.0) {
                return Err(Error::NotStochastic { row: r, sum: s });
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor::from_parts(va.shape().to_vec(), data), Op::NormalizeRowsSum(a), ng))
    }

    /// Pairwise cosine similarities between rows, `[K,d] x [M,d] -> [K,M]`.
    /// Pairs involving a zero-norm row evaluate to 0 and carry no gradient.
    pub fn cosine_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(shape_err("cosine_rows", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let (k, m) = (va.rows(), vb.rows());
        let na = row_norms(va);
        let nb = row_norms(vb);
        let dots = matmul_nt_raw(va.data(), vb.data(), k, va.cols(), m);
        let mut out = vec![0.0; k * m];
        for i in 0..k {
            for j in 0..m {
                let den = na[i] * nb[j];
                if den > 0.0 {
                    out[i * m + j] = dots[i * m + j] / den;
                }
            }
        }
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![k, m], out), Op::CosineRows(a, b), ng))
    }

    /// Named leaves bound by [`Graph::param`], in binding order.
    pub fn bound_params(&self) -> &[(String, NodeId)] {
        &self.params
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out_shape = self.value(output).shape().to_vec();
        if self.value(output).len() != 1 {
            return Err(Error::NonScalarOutput(out_shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::filled(&out_shape, 1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = None;
                continue;
            }
            let g = match &grads[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.propagate(idx, &g, &mut grads);
        }
        let mut leaf = HashMap::new();
        for (idx, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &self.nodes[idx].op) {
                leaf.insert(NodeId(idx), g);
            }
        }
        Ok(Gradients { leaf })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[idx].value;
        let val = |id: NodeId| &self.nodes[id.0].value;
        let shaped = |like: &Tensor, data: Vec<f64>| Tensor::from_parts(like.shape().to_vec(), data);
        let elementwise = |a: &Tensor, f: &dyn Fn(usize) -> f64| shaped(a, (0..a.len()).map(f).collect());
        match &self.nodes[idx].op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                // dA = G B^T, dB = A^T G
                let da = matmul_nt_raw(g.data(), vb.data(), m, n, k);
                let db = matmul_tn_raw(va.data(), g.data(), m, k, n);
                self.accumulate(grads, *a, shaped(va, da));
                self.accumulate(grads, *b, shaped(vb, db));
            }
            Op::MatMulNT(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                // C = A B^T: dA = G B, dB = G^T A
                let da = matmul_raw(g.data(), vb.data(), m, n, k);
                let db = matmul_tn_raw(g.data(), va.data(), m, n, k);
                self.accumulate(grads, *a, shaped(va, da));
                self.accumulate(grads, *b, shaped(vb, db));
            }
            Op::Transpose(a) => {
                let t = g.transpose();
                self.accumulate(grads, *a, shaped(val(*a), t.into_data()));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let gd = g.data();
                self.accumulate(grads, *a, elementwise(va, &|i| gd[i] * vb.data()[i]));
                self.accumulate(grads, *b, elementwise(vb, &|i| gd[i] * va.data()[i]));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let gd = g.data();
                self.accumulate(grads, *a, elementwise(va, &|i| gd[i] / vb.data()[i]));
                self.accumulate(grads, *b, elementwise(vb, &|i| -gd[i] * va.data()[i] / (vb.data()[i] * vb.data()[i])));
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let is_min = matches!(self.nodes[idx].op, Op::Min(..));
                let (va, vb) = (val(*a), val(*b));
                let gd = g.data();
                let pick_a = |i: usize| {
                    let (x, y) = (va.data()[i], vb.data()[i]);
                    if is_min {
                        x <= y
                    } else {
                        x >= y
                    }
                };
                self.accumulate(grads, *a, elementwise(va, &|i| if pick_a(i) { gd[i] } else { 0.0 }));
                self.accumulate(grads, *b, elementwise(vb, &|i| if pick_a(i) { 0.0 } else { gd[i] }));
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                let n = g.cols();
                let mut dr = vec![0.0; n];
                for chunk in g.data().chunks(n) {
                    for (d, x) in dr.iter_mut().zip(chunk) {
                        *d += x;
                    }
                }
                self.accumulate(grads, *row, shaped(val(*row), dr));
            }
            Op::MulCol(a, col) => {
                let (va, vc) = (val(*a), val(*col));
                let n = va.cols();
                let mut da = g.data().to_vec();
                let mut dc = vec![0.0; vc.len()];
                for (r, chunk) in da.chunks_mut(n).enumerate() {
                    let s = vc.data()[r];
                    dc[r] = chunk.iter().zip(va.row_slice(r)).map(|(x, y)| x * y).sum();
                    chunk.iter_mut().for_each(|x| *x *= s);
                }
                self.accumulate(grads, *a, shaped(va, da));
                self.accumulate(grads, *col, shaped(vc, dc));
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::Offset(a) | Op::Reshape(a) => self.accumulate(grads, *a, shaped(val(*a), g.data().to_vec())),
            Op::Tanh(a) => {
                let d = elementwise(out, &|i| g.data()[i] * (1.0 - out.data()[i] * out.data()[i]));
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = elementwise(out, &|i| {
                    let s = out.data()[i];
                    g.data()[i] * s * (1.0 - s)
                });
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = elementwise(out, &|i| g.data()[i] * out.data()[i]);
                self.accumulate(grads, *a, d);
            }
            Op::Log(a) => {
                let va = val(*a);
                let d = elementwise(va, &|i| g.data()[i] / va.data()[i]);
                self.accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let va = val(*a);
                let d = elementwise(va, &|i| g.data()[i] * va.data()[i].signum());
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let va = val(*a);
                let d = elementwise(va, &|i| if va.data()[i] > 0.0 { g.data()[i] } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let va = val(*a);
                let d = elementwise(va, &|i| 2.0 * g.data()[i] * va.data()[i]);
                self.accumulate(grads, *a, d);
            }
            Op::Pow(a, e) => {
                let va = val(*a);
                let d = elementwise(va, &|i| {
                    let x = va.data()[i];
                    if x == 0.0 && *e < 1.0 {
                        0.0
                    } else {
                        g.data()[i] * e * x.powf(e - 1.0)
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                let mut d = vec![0.0; out.len()];
                for r in 0..out.rows() {
                    let y = &out.data()[r * n..(r + 1) * n];
                    let gy = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[r * n + j] = y[j] * (gy[j] - dot);
                    }
                }
                self.accumulate(grads, *a, shaped(out, d));
            }
            Op::SoftmaxCols(a) => {
                let (m, n) = (out.rows(), out.cols());
                let mut d = vec![0.0; out.len()];
                for c in 0..n {
                    let dot: f64 = (0..m).map(|r| out.get(r, c) * g.get(r, c)).sum();
                    for r in 0..m {
                        d[r * n + c] = out.get(r, c) * (g.get(r, c) - dot);
                    }
                }
                self.accumulate(grads, *a, shaped(out, d));
            }
            Op::LogSoftmaxRows(a) => {
                let n = out.cols();
                let mut d = vec![0.0; out.len()];
                for r in 0..out.rows() {
                    let y = &out.data()[r * n..(r + 1) * n];
                    let gy = &g.data()[r * n..(r + 1) * n];
                    let total: f64 = gy.iter().sum();
                    for j in 0..n {
                        d[r * n + j] = gy[j] - y[j].exp() * total;
                    }
                }
                self.accumulate(grads, *a, shaped(out, d));
            }
            Op::Sum(a) => {
                let va = val(*a);
                self.accumulate(grads, *a, Tensor::filled(va.shape(), g.item()));
            }
            Op::MeanRows(a) => {
                let va = val(*a);
                let m = va.rows() as f64;
                let n = va.cols();
                let d = elementwise(va, &|i| g.data()[i % n] / m);
                self.accumulate(grads, *a, d);
            }
            Op::SliceRows(a, start) => {
                let va = val(*a);
                let n = va.cols();
                let mut d = vec![0.0; va.len()];
                d[start * n..start * n + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, shaped(va, d));
            }
            Op::SliceCols(a, start) => {
                let va = val(*a);
                let (n, len) = (va.cols(), g.cols());
                let mut d = vec![0.0; va.len()];
                for r in 0..va.rows() {
                    d[r * n + start..r * n + start + len].copy_from_slice(g.row_slice(r));
                }
                self.accumulate(grads, *a, shaped(va, d));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let vp = val(*p);
                    let d = g.data()[offset..offset + vp.len()].to_vec();
                    offset += vp.len();
                    self.accumulate(grads, *p, shaped(vp, d));
                }
            }
            Op::GatherRows(a, idx_list) => {
                let va = val(*a);
                let n = va.cols();
                let mut d = vec![0.0; va.len()];
                for (j, &i) in idx_list.iter().enumerate() {
                    for (x, y) in d[i * n..(i + 1) * n].iter_mut().zip(g.row_slice(j)) {
                        *x += y;
                    }
                }
                self.accumulate(grads, *a, shaped(va, d));
            }
            Op::GatherElems(a, idx_list) => {
                let va = val(*a);
                let n = va.cols();
                let mut d = vec![0.0; va.len()];
                for (j, &(r, c)) in idx_list.iter().enumerate() {
                    d[r * n + c] += g.data()[j];
                }
                self.accumulate(grads, *a, shaped(va, d));
            }
            Op::OuterAdd(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (k, n, h) = (va.rows(), vb.rows(), va.cols());
                let mut da = vec![0.0; va.len()];
                let mut db = vec![0.0; vb.len()];
                for kk in 0..k {
                    for i in 0..n {
                        let gr = g.row_slice(kk * n + i);
                        for c in 0..h {
                            da[kk * h + c] += gr[c];
                            db[i * h + c] += gr[c];
                        }
                    }
                }
                self.accumulate(grads, *a, shaped(va, da));
                self.accumulate(grads, *b, shaped(vb, db));
            }
            Op::MixSlots(recon, masks) => {
                let (vr, vm) = (val(*recon), val(*masks));
                let (k, n) = (vm.rows(), vm.cols());
                let d = vr.cols();
                let mut dr = vec![0.0; vr.len()];
                let mut dm = vec![0.0; vm.len()];
                for kk in 0..k {
                    for i in 0..n {
                        let gi = g.row_slice(i);
                        let m = vm.get(kk, i);
                        let row = kk * n + i;
                        let src = vr.row_slice(row);
                        let mut acc = 0.0;
                        for c in 0..d {
                            dr[row * d + c] = m * gi[c];
                            acc += gi[c] * src[c];
                        }
                        dm[kk * n + i] = acc;
                    }
                }
                self.accumulate(grads, *recon, shaped(vr, dr));
                self.accumulate(grads, *masks, shaped(vm, dm));
            }
            Op::NormalizeRowsSum(a) => {
                let va = val(*a);
                let n = va.cols();
                let mut d = vec![0.0; va.len()];
                for r in 0..va.rows() {
                    let s: f64 = va.row_slice(r).iter().sum();
                    let y = out.row_slice(r);
                    let gy = g.row_slice(r);
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[r * n + j] = (gy[j] - dot) / s;
                    }
                }
                self.accumulate(grads, *a, shaped(va, d));
            }
            Op::CosineRows(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (k, m, dim) = (va.rows(), vb.rows(), va.cols());
                let na = row_norms(va);
                let nb = row_norms(vb);
                let mut da = vec![0.0; va.len()];
                let mut db = vec![0.0; vb.len()];
                for i in 0..k {
                    for j in 0..m {
                        if na[i] == 0.0 || nb[j] == 0.0 {
                            continue;
                        }
                        let gij = g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        let s = out.get(i, j);
                        let (ar, br) = (va.row_slice(i), vb.row_slice(j));
                        let inv = 1.0 / (na[i] * nb[j]);
                        for c in 0..dim {
                            da[i * dim + c] += gij * (br[c] * inv - s * ar[c] / (na[i] * na[i]));
                            db[j * dim + c] += gij * (ar[c] * inv - s * br[c] / (nb[j] * nb[j]));
                        }
                    }
                }
                self.accumulate(grads, *a, shaped(va, da));
                self.accumulate(grads, *b, shaped(vb, db));
            }
        }
    }
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    (0..t.rows()).map(|r| t.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

/// Adjoints of the leaves reached by a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    leaf: HashMap<NodeId, Tensor>,
}

impl Gradients {
    /// Gradient of a leaf; `None` when the output does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.leaf.get(&id)
    }

    /// Gradient with zeros filled in for unreached leaves.
    pub fn wrt(&self, graph: &Graph, id: NodeId) -> Tensor {
        self.leaf.get(&id).cloned().unwrap_or_else(|| Tensor::zeros(graph.value(id).shape()))
    }

    /// Gradients keyed by parameter name, for every parameter bound on the tape.
    pub fn named(&self, graph: &Graph) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, id) in graph.bound_params() {
            out.insert(name, self.wrt(graph, *id));
        }
        out
    }
}
