use std::collections::HashMap;
use std::sync::Arc;

use super::tensor::{as_matrix, gemm};
use super::{DiffError, Gradients, ParamSet, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Input(String),
    Param(String),
    Const(Arc<Tensor<T>>),
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Softmax(NodeId),
    CausalSoftmax(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Embedding { table: NodeId, ids: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize, end: usize },
    SelectRows { x: NodeId, rows: Vec<usize> },
    Sum(NodeId),
    CrossEntropy { logits: NodeId, targets: Vec<Option<usize>> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::CausalSoftmax(_) => "causal_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::SelectRows { .. } => "select_rows",
            Op::Sum(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Softmax(a)
            | Op::CausalSoftmax(a)
            | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
            Op::SliceCols { x, .. } | Op::SelectRows { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// Named tensors bound to a graph's `input` nodes.
pub type Bindings<T> = HashMap<String, Tensor<T>>;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

/// Static computation graph. Nodes are appended in topological order, so
/// node `i` only ever reads nodes `< i`.
///
/// Build the graph once, [`Graph::evaluate`] it against a parameter set
/// and input bindings, then call [`Graph::backward`] from a scalar node.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Op<T>>,
    outputs: Vec<(String, NodeId)>,
    values: Vec<Option<Arc<Tensor<T>>>>,
    aux: Vec<Option<Vec<T>>>,
    param_slots: Vec<Option<usize>>,
    requires_grad: Vec<bool>,
    evaluated: bool,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            outputs: Vec::new(),
            values: Vec::new(),
            aux: Vec::new(),
            param_slots: Vec::new(),
            requires_grad: Vec::new(),
            evaluated: false,
        }
    }

    fn push(&mut self, op: Op<T>) -> NodeId {
        self.evaluated = false;
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Input(name.into()))
    }

    pub fn param(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Param(name.into()))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Const(Arc::new(value)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul { a, b, trans_b: false })
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul { a, b, trans_b: true })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    /// Adds a 1-d `bias` to every row of `a` (broadcast over the last axis).
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias(a, bias))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.push(Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Gelu(a))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }

    /// Row softmax of a square score matrix where row `i` only sees columns
    /// `0..=i`. Masked entries come out as exact zeros.
    pub fn causal_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::CausalSoftmax(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        self.push(Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn embedding(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        self.push(Op::Embedding { table, ids })
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        self.push(Op::ConcatRows(parts))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        self.push(Op::ConcatCols(parts))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        self.push(Op::SliceCols { x, start, end })
    }

    pub fn select_rows(&mut self, x: NodeId, rows: Vec<usize>) -> NodeId {
        self.push(Op::SelectRows { x, rows })
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    /// Mean cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<Option<usize>>) -> NodeId {
        self.push(Op::CrossEntropy { logits, targets })
    }

    /// Names a node so [`Graph::evaluate`] returns its value.
    pub fn mark_output(&mut self, name: impl Into<String>, id: NodeId) {
        self.outputs.push((name.into(), id));
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.values.get(id.0).and_then(|v| v.as_deref())
    }

    pub fn is_evaluated(&self) -> bool {
        self.evaluated
    }

    /// Runs every node in order. Returns the marked outputs by name.
    pub fn evaluate(
        &mut self,
        params: &ParamSet<T>,
        inputs: &Bindings<T>,
    ) -> Result<HashMap<String, Arc<Tensor<T>>>, DiffError> {
        self.evaluated = false;
        let n = self.nodes.len();
        self.values = vec![None; n];
        self.aux = vec![None; n];
        self.param_slots = vec![None; n];
        self.requires_grad = vec![false; n];

        for i in 0..n {
            let (value, aux, rg, slot) = self.eval_node(i, params, inputs)?;
            if !value.all_finite() {
                return Err(DiffError::NonFinite { op: self.nodes[i].name(), node: i });
            }
            self.values[i] = Some(value);
            self.aux[i] = aux;
            self.requires_grad[i] = rg;
            self.param_slots[i] = slot;
        }
        self.evaluated = true;
        Ok(self
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), Arc::clone(self.values[id.0].as_ref().expect("evaluated"))))
            .collect())
    }

    fn val(&self, id: NodeId) -> &Tensor<T> {
        self.values[id.0].as_deref().expect("inputs precede their consumers")
    }

    #[allow(clippy::type_complexity)]
    fn eval_node(
        &self,
        i: usize,
        params: &ParamSet<T>,
        inputs: &Bindings<T>,
    ) -> Result<(Arc<Tensor<T>>, Option<Vec<T>>, bool, Option<usize>), DiffError> {
        let op = &self.nodes[i];
        let name = op.name();
        let shape_err = |detail: String| DiffError::Shape { op: name, detail };
        let rg = op.inputs().iter().any(|id| self.requires_grad[id.0]);

        let out: Tensor<T> = match op {
            Op::Input(key) => {
                let t = inputs.get(key).ok_or_else(|| DiffError::UnboundInput(key.clone()))?;
                return Ok((Arc::new(t.clone()), None, false, None));
            }
            Op::Param(key) => {
                let idx = params.index_of(key).ok_or_else(|| DiffError::UnknownParam(key.clone()))?;
                let entry = params.entry(idx);
                return Ok((Arc::clone(&entry.value), None, entry.trainable, Some(idx)));
            }
            Op::Const(t) => return Ok((Arc::clone(t), None, false, None)),
            Op::MatMul { a, b, trans_b } => {
                let (a, b) = (self.val(*a), self.val(*b));
                let (m, k) = as_matrix(a, name)?;
                let (br, bc) = as_matrix(b, name)?;
                let (k2, n) = if *trans_b { (bc, br) } else { (br, bc) };
                if k != k2 {
                    return Err(shape_err(format!("inner dims differ: {:?} x {:?}", a.shape(), b.shape())));
                }
                let mut out = vec![T::zero(); m * n];
                gemm(false, *trans_b, m, k, n, a.data(), b.data(), &mut out, false);
                Tensor::new(vec![m, n], out)?
            }
            Op::Add(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.shape() != b.shape() {
                    return Err(shape_err(format!("{:?} vs {:?}", a.shape(), b.shape())));
                }
                let data = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::AddBias(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                let d = a.last_dim();
                if b.shape() != [d] {
                    return Err(shape_err(format!("bias {:?} does not match last axis of {:?}", b.shape(), a.shape())));
                }
                let mut data = a.data().to_vec();
                for row in data.chunks_mut(d) {
                    for (x, y) in row.iter_mut().zip(b.data()) {
                        *x += *y;
                    }
                }
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::Mul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.shape() != b.shape() {
                    return Err(shape_err(format!("{:?} vs {:?}", a.shape(), b.shape())));
                }
                let data = a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::Scale(a, s) => {
                let a = self.val(*a);
                let s = T::lit(*s);
                Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| *x * s).collect())?
            }
            Op::Tanh(a) => map_unary(self.val(*a), |x| x.tanh()),
            Op::Relu(a) => map_unary(self.val(*a), |x| if x > T::zero() { x } else { T::zero() }),
            Op::Gelu(a) => {
                let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(0.5));
                map_unary(self.val(*a), |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
            }
            Op::Softmax(a) => {
                let a = self.val(*a);
                let d = a.last_dim();
                let mut data = a.data().to_vec();
                for row in data.chunks_mut(d.max(1)) {
                    softmax_in_place(row);
                }
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::CausalSoftmax(a) => {
                let a = self.val(*a);
                let (r, c) = as_matrix(a, name)?;
                if r != c {
                    return Err(shape_err(format!("causal softmax needs a square matrix, got {:?}", a.shape())));
                }
                let mut data = a.data().to_vec();
                for (i, row) in data.chunks_mut(c.max(1)).enumerate() {
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].iter_mut().for_each(|v| *v = T::zero());
                }
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (x, g, b) = (self.val(*x), self.val(*gamma), self.val(*beta));
                let d = x.last_dim();
                if g.shape() != [d] || b.shape() != [d] {
                    return Err(shape_err(format!(
                        "gain {:?} / shift {:?} vs last axis of {:?}",
                        g.shape(),
                        b.shape(),
                        x.shape()
                    )));
                }
                let rows = x.rows();
                let eps = T::lit(*eps);
                let dn = T::from_usize(d).expect("dim");
                let mut out = vec![T::zero(); x.numel()];
                // aux layout: normalized values, then one inverse std per row
                let mut aux = vec![T::zero(); x.numel() + rows];
                for r in 0..rows {
                    let row = x.row(r);
                    let mean = row.iter().copied().sum::<T>() / dn;
                    let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dn;
                    let rstd = T::one() / (var + eps).sqrt();
                    for j in 0..d {
                        let xh = (row[j] - mean) * rstd;
                        aux[r * d + j] = xh;
                        out[r * d + j] = xh * g.data()[j] + b.data()[j];
                    }
                    aux[x.numel() + r] = rstd;
                }
                let t = Tensor::new(x.shape().to_vec(), out)?;
                return Ok((Arc::new(t), Some(aux), rg, None));
            }
            Op::Embedding { table, ids } => {
                let table = self.val(*table);
                let (v, d) = as_matrix(table, name)?;
                let mut out = Vec::with_capacity(ids.len() * d);
                for &id in ids {
                    if id >= v {
                        return Err(DiffError::IndexOutOfRange { op: name, index: id, len: v });
                    }
                    out.extend_from_slice(table.row(id));
                }
                Tensor::new(vec![ids.len(), d], out)?
            }
            Op::ConcatRows(parts) => {
                if parts.is_empty() {
                    return Err(shape_err("nothing to concatenate".into()));
                }
                let d = as_matrix(self.val(parts[0]), name)?.1;
                let mut out = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let t = self.val(*p);
                    let (r, c) = as_matrix(t, name)?;
                    if c != d {
                        return Err(shape_err(format!("column count {c} differs from {d}")));
                    }
                    rows += r;
                    out.extend_from_slice(t.data());
                }
                Tensor::new(vec![rows, d], out)?
            }
            Op::ConcatCols(parts) => {
                if parts.is_empty() {
                    return Err(shape_err("nothing to concatenate".into()));
                }
                let rows = as_matrix(self.val(parts[0]), name)?.0;
                let mut widths = Vec::with_capacity(parts.len());
                for p in parts {
                    let (r, c) = as_matrix(self.val(*p), name)?;
                    if r != rows {
                        return Err(shape_err(format!("row count {r} differs from {rows}")));
                    }
                    widths.push(c);
                }
                let total: usize = widths.iter().sum();
                let mut out = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for p in parts {
                        out.extend_from_slice(self.val(*p).row(r));
                    }
                }
                Tensor::new(vec![rows, total], out)?
            }
            Op::SliceCols { x, start, end } => {
                let x = self.val(*x);
                let (r, c) = as_matrix(x, name)?;
                if start >= end || *end > c {
                    return Err(shape_err(format!("columns {start}..{end} of {c}")));
                }
                let mut out = Vec::with_capacity(r * (end - start));
                for i in 0..r {
                    out.extend_from_slice(&x.row(i)[*start..*end]);
                }
                Tensor::new(vec![r, end - start], out)?
            }
            Op::SelectRows { x, rows } => {
                let x = self.val(*x);
                let (r, c) = as_matrix(x, name)?;
                let mut out = Vec::with_capacity(rows.len() * c);
                for &i in rows {
                    if i >= r {
                        return Err(DiffError::IndexOutOfRange { op: name, index: i, len: r });
                    }
                    out.extend_from_slice(x.row(i));
                }
                Tensor::new(vec![rows.len(), c], out)?
            }
            Op::Sum(a) => Tensor::scalar(self.val(*a).data().iter().copied().sum()),
            Op::CrossEntropy { logits, targets } => {
                let l = self.val(*logits);
                let (r, v) = as_matrix(l, name)?;
                if targets.len() != r {
                    return Err(shape_err(format!("{} targets for {} rows", targets.len(), r)));
                }
                let count = targets.iter().filter(|t| t.is_some()).count();
                if count == 0 {
                    return Err(DiffError::EmptyMask);
                }
                let mut probs = vec![T::zero(); r * v];
                let mut total = T::zero();
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    if t >= v {
                        return Err(DiffError::IndexOutOfRange { op: name, index: t, len: v });
                    }
                    let row = l.row(i);
                    let p = &mut probs[i * v..(i + 1) * v];
                    p.copy_from_slice(row);
                    let lse = log_softmax_lse(p);
                    total += lse - row[t];
                }
                let loss = total / T::from_usize(count).expect("count");
                let t = Tensor::scalar(loss);
                return Ok((Arc::new(t), Some(probs), rg, None));
            }
        };
        Ok((Arc::new(out), None, rg, None))
    }

    /// Reverse-mode accumulation from the scalar node `loss` into `grads`.
    ///
    /// Gradients add onto whatever `grads` already holds.
    pub fn backward(&self, loss: NodeId, grads: &mut Gradients<T>) -> Result<(), DiffError> {
        if !self.evaluated {
            return Err(DiffError::NotEvaluated);
        }
        let lv = self.val(loss);
        if !lv.is_scalar() {
            return Err(DiffError::NotScalar(lv.shape().to_vec()));
        }
        let mut g: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        g[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.requires_grad[i] {
                continue;
            }
            let Some(dy) = g[i].take() else { continue };
            self.backward_node(i, &dy, &mut g, grads);
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.requires_grad[id.0]
    }

    fn grad_buf<'a>(&self, g: &'a mut [Option<Vec<T>>], id: NodeId) -> &'a mut Vec<T> {
        let n = self.val(id).numel();
        g[id.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn backward_node(&self, i: usize, dy: &[T], g: &mut [Option<Vec<T>>], grads: &mut Gradients<T>) {
        let y = self.values[i].as_deref().expect("evaluated");
        match &self.nodes[i] {
            Op::Input(_) | Op::Const(_) => {}
            Op::Param(_) => {
                if let Some(buf) = self.param_slots[i].and_then(|idx| grads.buf_mut(idx)) {
                    for (a, b) in buf.iter_mut().zip(dy) {
                        *a += *b;
                    }
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = y.shape()[1];
                if self.wants(*a) {
                    let da = self.grad_buf(g, *a);
                    // dA = dY · Bᵀ
                    gemm(false, !*trans_b, m, n, k, dy, bv.data(), da, true);
                }
                if self.wants(*b) {
                    let db = self.grad_buf(g, *b);
                    if *trans_b {
                        // B stored (n, k): dB = dYᵀ · A
                        gemm(true, false, n, m, k, dy, av.data(), db, true);
                    } else {
                        // dB = Aᵀ · dY
                        gemm(true, false, k, m, n, av.data(), dy, db, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if self.wants(id) {
                        add_into(self.grad_buf(g, id), dy);
                    }
                }
            }
            Op::AddBias(a, b) => {
                if self.wants(*a) {
                    add_into(self.grad_buf(g, *a), dy);
                }
                if self.wants(*b) {
                    let d = y.last_dim();
                    let db = self.grad_buf(g, *b);
                    for row in dy.chunks(d) {
                        add_into(db, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    let da = self.grad_buf(g, *a);
                    for ((d, g_), o) in da.iter_mut().zip(dy).zip(bv.data()) {
                        *d += *g_ * *o;
                    }
                }
                if self.wants(*b) {
                    let db = self.grad_buf(g, *b);
                    for ((d, g_), o) in db.iter_mut().zip(dy).zip(av.data()) {
                        *d += *g_ * *o;
                    }
                }
            }
            Op::Scale(a, s) => {
                let s = T::lit(*s);
                let da = self.grad_buf(g, *a);
                for (d, g_) in da.iter_mut().zip(dy) {
                    *d += *g_ * s;
                }
            }
            Op::Tanh(a) => {
                let da = self.grad_buf(g, *a);
                for ((d, g_), yv) in da.iter_mut().zip(dy).zip(y.data()) {
                    *d += *g_ * (T::one() - *yv * *yv);
                }
            }
            Op::Relu(a) => {
                let x = self.val(*a);
                let da = self.grad_buf(g, *a);
                for ((d, g_), xv) in da.iter_mut().zip(dy).zip(x.data()) {
                    if *xv > T::zero() {
                        *d += *g_;
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.val(*a);
                let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(0.5));
                let three_k = T::lit(3.0 * GELU_K);
                let da = self.grad_buf(g, *a);
                for ((d, g_), xv) in da.iter_mut().zip(dy).zip(x.data()) {
                    let x = *xv;
                    let t = (c * (x + k * x * x * x)).tanh();
                    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three_k * x * x);
                    *d += *g_ * deriv;
                }
            }
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                let d = y.last_dim();
                let da = self.grad_buf(g, *a);
                for ((dx, dyr), yr) in da.chunks_mut(d).zip(dy.chunks(d)).zip(y.data().chunks(d)) {
                    let dot: T = dyr.iter().zip(yr).map(|(p, q)| *p * *q).sum();
                    for ((o, gy), yv) in dx.iter_mut().zip(dyr).zip(yr) {
                        *o += *yv * (*gy - dot);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, .. } => {
                let aux = self.aux[i].as_ref().expect("layer norm cache");
                let xv = self.val(*x);
                let d = xv.last_dim();
                let rows = xv.rows();
                let (xhat, rstd) = aux.split_at(xv.numel());
                let gv = self.val(*gamma).data().to_vec();
                if self.wants(*gamma) {
                    let dg = self.grad_buf(g, *gamma);
                    for (dyr, xr) in dy.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += dyr[j] * xr[j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let db = self.grad_buf(g, *beta);
                    for dyr in dy.chunks(d) {
                        add_into(db, dyr);
                    }
                }
                if self.wants(*x) {
                    let dn = T::from_usize(d).expect("dim");
                    let dx = self.grad_buf(g, *x);
                    let mut dxh = vec![T::zero(); d];
                    for r in 0..rows {
                        let dyr = &dy[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxh[j] = dyr[j] * gv[j];
                        }
                        let mean_dxh = dxh.iter().copied().sum::<T>() / dn;
                        let mean_dxh_xh = dxh.iter().zip(xr).map(|(p, q)| *p * *q).sum::<T>() / dn;
                        for j in 0..d {
                            dx[r * d + j] += rstd[r] * (dxh[j] - mean_dxh - xr[j] * mean_dxh_xh);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = y.last_dim();
                let dt = self.grad_buf(g, *table);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * d..(id + 1) * d], &dy[r * d..(r + 1) * d]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.val(*p).numel();
                    if self.wants(*p) {
                        add_into(self.grad_buf(g, *p), &dy[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.last_dim();
                let rows = y.rows();
                let mut col = 0;
                for p in parts {
                    let w = self.val(*p).last_dim();
                    if self.wants(*p) {
                        let dp = self.grad_buf(g, *p);
                        for r in 0..rows {
                            add_into(&mut dp[r * w..(r + 1) * w], &dy[r * total + col..r * total + col + w]);
                        }
                    }
                    col += w;
                }
            }
            Op::SliceCols { x, start, end } => {
                let c = self.val(*x).last_dim();
                let w = end - start;
                let dx = self.grad_buf(g, *x);
                for r in 0..y.rows() {
                    add_into(&mut dx[r * c + start..r * c + end], &dy[r * w..(r + 1) * w]);
                }
            }
            Op::SelectRows { x, rows } => {
                let c = y.last_dim();
                let dx = self.grad_buf(g, *x);
                for (k, &r) in rows.iter().enumerate() {
                    add_into(&mut dx[r * c..(r + 1) * c], &dy[k * c..(k + 1) * c]);
                }
            }
            Op::Sum(a) => {
                let s = dy[0];
                let da = self.grad_buf(g, *a);
                da.iter_mut().for_each(|d| *d += s);
            }
            Op::CrossEntropy { logits, targets } => {
                let probs = self.aux[i].as_ref().expect("cross entropy cache");
                let v = self.val(*logits).last_dim();
                let count = targets.iter().filter(|t| t.is_some()).count();
                let s = dy[0] / T::from_usize(count).expect("count");
                let dl = self.grad_buf(g, *logits);
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..v {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        dl[r * v + j] += s * (probs[r * v + j] - onehot);
                    }
                }
            }
        }
    }
}

fn map_unary<T: Scalar>(a: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| f(*x)).collect()).expect("same shape")
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += *b;
    }
}

/// Numerically stable in-place softmax of one row.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Replaces `row` with its softmax and returns log-sum-exp of the original.
fn log_softmax_lse<T: Scalar>(row: &mut [T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
    max + sum.ln()
}
