//! Reverse-mode automatic differentiation over per-point feature matrices.
//!
//! A [`Graph`] is a tape: nodes are appended in construction order and
//! `backward` walks them in reverse, so evaluation and accumulation order are
//! fixed by the order in which the model builds its layers. Nothing inside a
//! graph runs in parallel.

mod adam;

use std::sync::Arc;

pub use adam::{adam_step, learning_rate, AdamConfig};

use crate::error::{Error, Result};
use crate::matrix::{gemm, Matrix};
use crate::nn::KernelMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    /// Adam first moment.
    pub m: Matrix,
    /// Adam second moment.
    pub v: Matrix,
    pub t: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let (r, c) = value.shape();
        Parameter {
            name: name.into(),
            value,
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
            t: 0,
        }
    }
}

/// Ordered collection of trainable parameters. `ParamId`s index into it.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Element-wise partial derivatives of a row-local custom op.
///
/// Output entry `(r, j)` depends on input entries `(r, c)` with
/// `owner[c] == j`; `partials[(r, c)]` is `∂out[r, owner[c]] / ∂in[r, c]`.
#[derive(Debug, Clone)]
pub struct RowLocalGrad {
    pub partials: Matrix,
    pub owner: Arc<Vec<usize>>,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Affine(NodeId, NodeId, NodeId),
    Relu(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Gather(NodeId, Arc<Vec<usize>>),
    ScatterAdd(NodeId, Arc<Vec<usize>>),
    MaxOf(Vec<NodeId>, Vec<u32>),
    SegmentMax(NodeId, Vec<u32>),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Log(NodeId),
    SoftmaxRows(NodeId),
    SliceCols(NodeId, usize),
    ConcatCols(NodeId, NodeId),
    Sum(NodeId),
    SparseConv {
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        map: Arc<KernelMap>,
    },
    RowLocal {
        input: NodeId,
        grad: RowLocalGrad,
        aux: Option<(NodeId, Matrix)>,
    },
}

#[derive(Debug)]
enum Value {
    Owned(Matrix),
    Param(ParamId),
}

#[derive(Debug)]
struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Computation tape bound to a parameter set.
pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Matrix> {
        self.nodes[id.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params[id.0].as_ref()
    }

    /// Parameter gradients with unreached parameters filled by zeros.
    pub fn into_param_grads(self, params: &ParamSet) -> Vec<Matrix> {
        self.params
            .into_iter()
            .zip(params.iter())
            .map(|(g, p)| g.unwrap_or_else(|| Matrix::zeros(p.value.rows(), p.value.cols())))
            .collect()
    }
}

fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::ShapeMismatch(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        match &self.nodes[id.0].value {
            Value::Owned(m) => m,
            Value::Param(p) => self.params.value(*p),
        }
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).shape()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Leaf whose gradient is tracked (used for gradient checks on inputs).
    pub fn variable(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.1 != ws.0 {
            return Err(shape_err("matmul", xs, ws));
        }
        let v = self.value(x).matmul(self.value(w));
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(v, Op::MatMul(x, w), ng))
    }

    /// `x · w + b` with `b` a single row broadcast over rows.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.1 != ws.0 {
            return Err(shape_err("affine weight", xs, ws));
        }
        if bs != (1, ws.1) {
            return Err(shape_err("affine bias", bs, (1, ws.1)));
        }
        let mut v = Matrix::zeros(xs.0, ws.1);
        let brow = self.value(b).row(0).to_vec();
        for r in 0..xs.0 {
            v.row_mut(r).copy_from_slice(&brow);
        }
        gemm(
            xs.0,
            xs.1,
            ws.1,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            v.data_mut(),
            1.0,
        );
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(v, Op::Affine(x, w, b), ng))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.max(0.0));
        let ng = self.ng(x);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let v = self.value(x).map(|a| a * k);
        let ng = self.ng(x);
        self.push(v, Op::Scale(x, k), ng)
    }

    /// Row `i` of the output is row `idx[i]` of `x`.
    pub fn gather_rows(&mut self, x: NodeId, idx: Arc<Vec<usize>>) -> Result<NodeId> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::ShapeMismatch(format!(
                "gather index {bad} out of {} rows",
                xv.rows()
            )));
        }
        let mut v = Matrix::zeros(idx.len(), xv.cols());
        for (dst, &src) in idx.iter().enumerate() {
            v.row_mut(dst).copy_from_slice(xv.row(src));
        }
        let ng = self.ng(x);
        Ok(self.push(v, Op::Gather(x, idx), ng))
    }

    /// Output row `j` is the sum of the input rows `i` with `idx[i] == j`.
    pub fn scatter_add_rows(
        &mut self,
        x: NodeId,
        idx: Arc<Vec<usize>>,
        n_out: usize,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        if idx.len() != xv.rows() {
            return Err(Error::ShapeMismatch(format!(
                "scatter index length {} for {} rows",
                idx.len(),
                xv.rows()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= n_out) {
            return Err(Error::ShapeMismatch(format!(
                "scatter target {bad} out of {n_out} rows"
            )));
        }
        let mut v = Matrix::zeros(n_out, xv.cols());
        for (src, &dst) in idx.iter().enumerate() {
            for (o, i) in v.row_mut(dst).iter_mut().zip(xv.row(src)) {
                *o += i;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(v, Op::ScatterAdd(x, idx), ng))
    }

    /// Element-wise maximum across same-shape nodes; ties go to the earliest node.
    pub fn rowwise_max(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::ShapeMismatch("rowwise_max of nothing".into()))?;
        let shape = self.shape(first);
        for &x in xs {
            if self.shape(x) != shape {
                return Err(shape_err("rowwise_max", shape, self.shape(x)));
            }
        }
        let mut v = self.value(first).clone();
        let mut arg = vec![0u32; v.data().len()];
        for (k, &x) in xs.iter().enumerate().skip(1) {
            for (e, &cand) in self.value(x).data().iter().enumerate() {
                if cand > v.data()[e] {
                    v.data_mut()[e] = cand;
                    arg[e] = k as u32;
                }
            }
        }
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(v, Op::MaxOf(xs.to_vec(), arg), ng))
    }

    /// Channel-wise max over the input rows assigned to each output row by
    /// `segment`. Ties resolve to the lowest input row. Every output row must
    /// receive at least one input row.
    pub fn segment_max(&mut self, x: NodeId, segment: &[usize], n_out: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if segment.len() != xv.rows() {
            return Err(Error::ShapeMismatch(format!(
                "segment length {} for {} rows",
                segment.len(),
                xv.rows()
            )));
        }
        let cols = xv.cols();
        let mut v = Matrix::filled(n_out, cols, f64::NEG_INFINITY);
        let mut arg = vec![u32::MAX; n_out * cols];
        for (i, &j) in segment.iter().enumerate() {
            if j >= n_out {
                return Err(Error::ShapeMismatch(format!("segment {j} out of {n_out}")));
            }
            let src = xv.row(i);
            for c in 0..cols {
                let e = j * cols + c;
                if arg[e] == u32::MAX || src[c] > v.data()[e] {
                    v.data_mut()[e] = src[c];
                    arg[e] = i as u32;
                }
            }
        }
        if arg.iter().any(|&a| a == u32::MAX) && cols > 0 {
            return Err(Error::ShapeMismatch(
                "segment_max output row without inputs".into(),
            ));
        }
        let ng = self.ng(x);
        Ok(self.push(v, Op::SegmentMax(x, arg), ng))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(v, Op::Sigmoid(x), ng)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(softplus);
        let ng = self.ng(x);
        self.push(v, Op::Softplus(x), ng)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::ln);
        let ng = self.ng(x);
        self.push(v, Op::Log(x), ng)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut v = xv.clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for a in row.iter_mut() {
                *a = (*a - max).exp();
                total += *a;
            }
            for a in row.iter_mut() {
                *a /= total;
            }
        }
        let ng = self.ng(x);
        self.push(v, Op::SoftmaxRows(x), ng)
    }

    pub fn slice_cols(&mut self, x: NodeId, range: std::ops::Range<usize>) -> Result<NodeId> {
        let xv = self.value(x);
        if range.start > range.end || range.end > xv.cols() {
            return Err(Error::ShapeMismatch(format!(
                "slice {range:?} of {} columns",
                xv.cols()
            )));
        }
        let w = range.end - range.start;
        let mut v = Matrix::zeros(xv.rows(), w);
        for r in 0..xv.rows() {
            v.row_mut(r).copy_from_slice(&xv.row(r)[range.clone()]);
        }
        let ng = self.ng(x);
        Ok(self.push(v, Op::SliceCols(x, range.start), ng))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(shape_err("concat_cols", av.shape(), bv.shape()));
        }
        let (ca, cb) = (av.cols(), bv.cols());
        let mut v = Matrix::zeros(av.rows(), ca + cb);
        for r in 0..av.rows() {
            let row = v.row_mut(r);
            row[..ca].copy_from_slice(av.row(r));
            row[ca..].copy_from_slice(bv.row(r));
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::ConcatCols(a, b), ng))
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Matrix::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(v, Op::Sum(x), ng)
    }

    /// Generalized sparse convolution. `weight` stacks one `c_in × c_out`
    /// block per kernel offset; `bias` is `1 × c_out`.
    ///
    /// Equivalent to summing `scatter_add_rows(gather_rows(x, in) · W_o, out)`
    /// over offsets, without materializing the per-offset outputs.
    pub fn sparse_conv(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        map: Arc<KernelMap>,
    ) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(weight), self.value(bias));
        let c_in = xv.cols();
        let c_out = wv.cols();
        if xv.rows() != map.n_in() {
            return Err(Error::ShapeMismatch(format!(
                "conv input has {} rows, kernel map expects {}",
                xv.rows(),
                map.n_in()
            )));
        }
        if wv.rows() != map.num_offsets() * c_in {
            return Err(shape_err(
                "conv weight",
                wv.shape(),
                (map.num_offsets() * c_in, c_out),
            ));
        }
        if bv.shape() != (1, c_out) {
            return Err(shape_err("conv bias", bv.shape(), (1, c_out)));
        }
        let mut out = Matrix::zeros(map.n_out(), c_out);
        for r in 0..map.n_out() {
            out.row_mut(r).copy_from_slice(bv.row(0));
        }
        let mut gathered = Vec::new();
        let mut product = Vec::new();
        for o in 0..map.num_offsets() {
            let (ins, outs) = map.pairs(o);
            let p = ins.len();
            if p == 0 {
                continue;
            }
            gather_into(xv, ins, &mut gathered);
            product.clear();
            product.resize(p * c_out, 0.0);
            let w_o = &wv.data()[o * c_in * c_out..(o + 1) * c_in * c_out];
            gemm(
                p,
                c_in,
                c_out,
                &gathered,
                false,
                w_o,
                false,
                &mut product,
                0.0,
            );
            scatter_add_into(&product, c_out, outs, &mut out);
        }
        let ng = self.ng(x) || self.ng(weight) || self.ng(bias);
        Ok(self.push(
            out,
            Op::SparseConv {
                x,
                weight,
                bias,
                map,
            },
            ng,
        ))
    }

    /// Row-local custom operation with precomputed partial derivatives.
    ///
    /// `aux` optionally adds a second input of the same shape as the output
    /// whose entries affect only the matching output entry, with the given
    /// element-wise partials.
    pub fn row_local(
        &mut self,
        input: NodeId,
        value: Matrix,
        grad: RowLocalGrad,
        aux: Option<(NodeId, Matrix)>,
    ) -> Result<NodeId> {
        let is = self.shape(input);
        if grad.partials.shape() != is || grad.owner.len() != is.1 || value.rows() != is.0 {
            return Err(shape_err("row_local partials", grad.partials.shape(), is));
        }
        if let Some(&bad) = grad.owner.iter().find(|&&j| j >= value.cols()) {
            return Err(Error::ShapeMismatch(format!("row_local owner {bad}")));
        }
        if let Some((a, p)) = &aux {
            if self.shape(*a) != value.shape() || p.shape() != value.shape() {
                return Err(shape_err("row_local aux", self.shape(*a), value.shape()));
            }
        }
        let ng = self.ng(input) || aux.as_ref().is_some_and(|(a, _)| self.ng(*a));
        Ok(self.push(value, Op::RowLocal { input, grad, aux }, ng))
    }

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(up) = grads[id].take() else {
                continue;
            };
            self.propagate(&node.op, &up, &mut grads);
            grads[id] = Some(up);
        }
        let mut params: Vec<Option<Matrix>> = (0..self.params.len()).map(|_| None).collect();
        for (id, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(p), Some(g)) = (&node.op, &grads[id]) {
                accumulate(&mut params[p.0], g.clone());
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn propagate(&self, op: &Op, up: &Matrix, grads: &mut [Option<Matrix>]) {
        match op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(x, w) => {
                if self.ng(*x) {
                    let g = matmul_bt(up, self.value(*w));
                    accumulate(&mut grads[x.0], g);
                }
                if self.ng(*w) {
                    let g = matmul_at(self.value(*x), up);
                    accumulate(&mut grads[w.0], g);
                }
            }
            Op::Affine(x, w, b) => {
                if self.ng(*x) {
                    let g = matmul_bt(up, self.value(*w));
                    accumulate(&mut grads[x.0], g);
                }
                if self.ng(*w) {
                    let g = matmul_at(self.value(*x), up);
                    accumulate(&mut grads[w.0], g);
                }
                if self.ng(*b) {
                    accumulate(&mut grads[b.0], column_sums(up));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut g = up.clone();
                for (gi, &xi) in g.data_mut().iter_mut().zip(xv.data()) {
                    if xi <= 0.0 {
                        *gi = 0.0;
                    }
                }
                accumulate(&mut grads[x.0], g);
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(&mut grads[a.0], up.clone());
                }
                if self.ng(*b) {
                    accumulate(&mut grads[b.0], up.clone());
                }
            }
            Op::Scale(x, k) => accumulate(&mut grads[x.0], up.map(|v| v * k)),
            Op::Gather(x, idx) => {
                let (rows, cols) = self.shape(*x);
                let mut g = Matrix::zeros(rows, cols);
                scatter_add_into(up.data(), cols, idx, &mut g);
                accumulate(&mut grads[x.0], g);
            }
            Op::ScatterAdd(x, idx) => {
                let mut buf = Vec::new();
                gather_into(up, idx, &mut buf);
                let g = Matrix::from_vec(idx.len(), up.cols(), buf);
                accumulate(&mut grads[x.0], g);
            }
            Op::MaxOf(xs, arg) => {
                for (k, &x) in xs.iter().enumerate() {
                    if !self.ng(x) {
                        continue;
                    }
                    let mut g = up.clone();
                    for (gi, &a) in g.data_mut().iter_mut().zip(arg) {
                        if a as usize != k {
                            *gi = 0.0;
                        }
                    }
                    accumulate(&mut grads[x.0], g);
                }
            }
            Op::SegmentMax(x, arg) => {
                let (rows, cols) = self.shape(*x);
                let mut g = Matrix::zeros(rows, cols);
                for (e, &src) in arg.iter().enumerate() {
                    let c = e % cols;
                    g[(src as usize, c)] += up.data()[e];
                }
                accumulate(&mut grads[x.0], g);
            }
            Op::Sigmoid(x) => {
                let xv = self.value(*x);
                let mut g = up.clone();
                for (gi, &xi) in g.data_mut().iter_mut().zip(xv.data()) {
                    let s = sigmoid(xi);
                    *gi *= s * (1.0 - s);
                }
                accumulate(&mut grads[x.0], g);
            }
            Op::Softplus(x) => {
                let xv = self.value(*x);
                let mut g = up.clone();
                for (gi, &xi) in g.data_mut().iter_mut().zip(xv.data()) {
                    *gi *= sigmoid(xi);
                }
                accumulate(&mut grads[x.0], g);
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                let mut g = up.clone();
                for (gi, &xi) in g.data_mut().iter_mut().zip(xv.data()) {
                    *gi /= xi;
                }
                accumulate(&mut grads[x.0], g);
            }
            Op::SoftmaxRows(x) => {
                let xv = self.value(*x);
                let mut g = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let y = softmax_row(xv.row(r));
                    let u = up.row(r);
                    let dot: f64 = y.iter().zip(u).map(|(a, b)| a * b).sum();
                    for (c, gi) in g.row_mut(r).iter_mut().enumerate() {
                        *gi = y[c] * (u[c] - dot);
                    }
                }
                accumulate(&mut grads[x.0], g);
            }
            Op::SliceCols(x, start) => {
                let (rows, cols) = self.shape(*x);
                let mut g = Matrix::zeros(rows, cols);
                let w = up.cols();
                for r in 0..rows {
                    g.row_mut(r)[*start..*start + w].copy_from_slice(up.row(r));
                }
                accumulate(&mut grads[x.0], g);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a).1;
                let cb = self.shape(*b).1;
                let rows = up.rows();
                if self.ng(*a) {
                    let mut g = Matrix::zeros(rows, ca);
                    for r in 0..rows {
                        g.row_mut(r).copy_from_slice(&up.row(r)[..ca]);
                    }
                    accumulate(&mut grads[a.0], g);
                }
                if self.ng(*b) {
                    let mut g = Matrix::zeros(rows, cb);
                    for r in 0..rows {
                        g.row_mut(r).copy_from_slice(&up.row(r)[ca..]);
                    }
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::Sum(x) => {
                let (rows, cols) = self.shape(*x);
                accumulate(&mut grads[x.0], Matrix::filled(rows, cols, up[(0, 0)]));
            }
            Op::SparseConv {
                x,
                weight,
                bias,
                map,
            } => self.sparse_conv_backward(*x, *weight, *bias, map, up, grads),
            Op::RowLocal { input, grad, aux } => {
                if self.ng(*input) {
                    let mut g = grad.partials.clone();
                    let cols = g.cols();
                    for r in 0..g.rows() {
                        let urow = up.row(r);
                        for (c, gi) in g.row_mut(r).iter_mut().enumerate().take(cols) {
                            *gi *= urow[grad.owner[c]];
                        }
                    }
                    accumulate(&mut grads[input.0], g);
                }
                if let Some((a, partials)) = aux {
                    if self.ng(*a) {
                        let mut g = partials.clone();
                        for (gi, &u) in g.data_mut().iter_mut().zip(up.data()) {
                            *gi *= u;
                        }
                        accumulate(&mut grads[a.0], g);
                    }
                }
            }
        }
    }

    fn sparse_conv_backward(
        &self,
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        map: &KernelMap,
        up: &Matrix,
        grads: &mut [Option<Matrix>],
    ) {
        let xv = self.value(x);
        let wv = self.value(weight);
        let c_in = xv.cols();
        let c_out = wv.cols();
        let want_x = self.ng(x);
        let want_w = self.ng(weight);
        let mut gx = want_x.then(|| Matrix::zeros(xv.rows(), c_in));
        let mut gw = want_w.then(|| Matrix::zeros(wv.rows(), c_out));
        let mut up_g = Vec::new();
        let mut x_g = Vec::new();
        let mut dx_g = Vec::new();
        for o in 0..map.num_offsets() {
            let (ins, outs) = map.pairs(o);
            let p = ins.len();
            if p == 0 {
                continue;
            }
            gather_into(up, outs, &mut up_g);
            if let Some(gw) = gw.as_mut() {
                gather_into(xv, ins, &mut x_g);
                let block = &mut gw.data_mut()[o * c_in * c_out..(o + 1) * c_in * c_out];
                gemm(c_in, p, c_out, &x_g, true, &up_g, false, block, 0.0);
            }
            if let Some(gx) = gx.as_mut() {
                let w_o = &wv.data()[o * c_in * c_out..(o + 1) * c_in * c_out];
                dx_g.clear();
                dx_g.resize(p * c_in, 0.0);
                gemm(p, c_out, c_in, &up_g, false, w_o, true, &mut dx_g, 0.0);
                scatter_add_into(&dx_g, c_in, ins, gx);
            }
        }
        if let Some(g) = gx {
            accumulate(&mut grads[x.0], g);
        }
        if let Some(g) = gw {
            accumulate(&mut grads[weight.0], g);
        }
        if self.ng(bias) {
            accumulate(&mut grads[bias.0], column_sums(up));
        }
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut y: Vec<f64> = row.iter().map(|&a| (a - max).exp()).collect();
    let total: f64 = y.iter().sum();
    for v in &mut y {
        *v /= total;
    }
    y
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut s = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (a, b) in s.data_mut().iter_mut().zip(m.row(r)) {
            *a += b;
        }
    }
    s
}

/// `a · bᵀ`
fn matmul_bt(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.rows());
    gemm(
        a.rows(),
        a.cols(),
        b.rows(),
        a.data(),
        false,
        b.data(),
        true,
        out.data_mut(),
        0.0,
    );
    out
}

/// `aᵀ · b`
fn matmul_at(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.cols(), b.cols());
    gemm(
        a.cols(),
        a.rows(),
        b.cols(),
        a.data(),
        true,
        b.data(),
        false,
        out.data_mut(),
        0.0,
    );
    out
}

pub(crate) fn gather_into(src: &Matrix, idx: &[usize], buf: &mut Vec<f64>) {
    let cols = src.cols();
    buf.clear();
    buf.reserve(idx.len() * cols);
    for &i in idx {
        buf.extend_from_slice(src.row(i));
    }
}

pub(crate) fn scatter_add_into(rows: &[f64], cols: usize, idx: &[usize], dst: &mut Matrix) {
    for (k, &j) in idx.iter().enumerate() {
        let src = &rows[k * cols..(k + 1) * cols];
        for (d, s) in dst.row_mut(j).iter_mut().zip(src) {
            *d += s;
        }
    }
}
