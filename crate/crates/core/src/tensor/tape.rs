//! Dynamic recording tape. A forward pass appends nodes; `backward` walks
//! them in reverse and accumulates vector-Jacobian products. A tape belongs to
//! one thread; data parallelism uses one tape per shard.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use super::kernels::gemm;
use super::Tensor;
use crate::error::{LmError, Result};

pub type NodeId = usize;

/// Block layout for the fused multi-head attention node. Rows of Q, K and V
/// are split into consecutive segments (one per sequence); positions attend
/// only within their own segment.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub heads: usize,
    /// Per-head width of the query/key projections.
    pub key_dim: usize,
    /// Per-head width of the value projection.
    pub value_dim: usize,
    pub segments: Vec<usize>,
    pub causal: bool,
}

impl AttentionSpec {
    pub(crate) fn prob_offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.segments.len() + 1);
        let mut acc = 0;
        off.push(0);
        for &len in &self.segments {
            acc += self.heads * len * len;
            off.push(acc);
        }
        off
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, b_t: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRow { a: NodeId, bias: NodeId },
    Relu(NodeId),
    Abs(NodeId),
    Sum(NodeId),
    RowSum(NodeId),
    Gather { table: NodeId, ids: Vec<usize> },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols { a: NodeId, start: usize },
    SoftmaxRows { a: NodeId, beta: f64 },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        divisor: f64,
        probs: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
    LayerNorm { a: NodeId, normed: Vec<f64>, inv_std: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Gradients for the requested parameter nodes, each shaped like its node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> &Tensor {
        &self.grads[&v.id]
    }

    pub fn by_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, v: Var<'_>) -> Tensor {
        self.grads.remove(&v.id).expect("gradient requested for a node not passed to backward")
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { tape: self, id }
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn value(&self, id: NodeId) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Attention weights stored by an attention node: the spec and the
    /// row-stochastic blocks, laid out segment by segment, head by head.
    pub fn attention_weights(&self, v: Var<'_>) -> Option<(AttentionSpec, Vec<f64>)> {
        let nodes = self.nodes.borrow();
        match &nodes[v.id].op {
            Op::Attention { spec, probs, .. } => Some((spec.clone(), probs.clone())),
            _ => None,
        }
    }

    /// Reverse-mode sweep from a scalar `loss`. Parameters not reachable from
    /// the loss receive zero gradients.
    pub fn backward(&self, loss: Var<'_>, params: &[Var<'_>]) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(LmError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut out = HashMap::new();
        for p in params {
            let shape = nodes[p.id].value.shape().to_vec();
            let g = grads
                .get_mut(p.id)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(&shape));
            out.insert(p.id, g);
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: NodeId, delta: Tensor) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn accumulate_with(
    grads: &mut [Option<Tensor>],
    nodes: &[Node],
    id: NodeId,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = &mut grads[id];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(nodes[id].value.shape()));
    }
    f(slot.as_mut().expect("slot filled above").data_mut());
}

fn propagate(nodes: &[Node], id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[id];
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, b_t } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = node.value.shape()[1];
            if *b_t {
                // C = A B^T with B stored n x k.
                accumulate_with(grads, nodes, *a, |da| {
                    gemm(m, n, k, gd, false, bv.data(), false, da, true)
                });
                accumulate_with(grads, nodes, *b, |db| {
                    gemm(n, m, k, gd, true, av.data(), false, db, true)
                });
            } else {
                accumulate_with(grads, nodes, *a, |da| {
                    gemm(m, n, k, gd, false, bv.data(), true, da, true)
                });
                accumulate_with(grads, nodes, *b, |db| {
                    gemm(k, m, n, av.data(), true, gd, false, db, true)
                });
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            accumulate_with(grads, nodes, *a, |da| {
                for ((d, &gi), &bi) in da.iter_mut().zip(gd).zip(bv.data()) {
                    *d += gi * bi;
                }
            });
            accumulate_with(grads, nodes, *b, |db| {
                for ((d, &gi), &ai) in db.iter_mut().zip(gd).zip(av.data()) {
                    *d += gi * ai;
                }
            });
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, g.map(|x| x * c)),
        Op::AddRow { a, bias } => {
            accumulate(grads, nodes, *a, g.clone());
            let cols = g.cols();
            accumulate_with(grads, nodes, *bias, |db| {
                for row in gd.chunks_exact(cols) {
                    for (d, &x) in db.iter_mut().zip(row) {
                        *d += x;
                    }
                }
            });
        }
        Op::Relu(a) => {
            let av = &nodes[*a].value;
            accumulate_with(grads, nodes, *a, |da| {
                for ((d, &gi), &x) in da.iter_mut().zip(gd).zip(av.data()) {
                    if x > 0.0 {
                        *d += gi;
                    }
                }
            });
        }
        Op::Abs(a) => {
            let av = &nodes[*a].value;
            accumulate_with(grads, nodes, *a, |da| {
                for ((d, &gi), &x) in da.iter_mut().zip(gd).zip(av.data()) {
                    if x > 0.0 {
                        *d += gi;
                    } else if x < 0.0 {
                        *d -= gi;
                    }
                }
            });
        }
        Op::Sum(a) => {
            let s = gd[0];
            accumulate_with(grads, nodes, *a, |da| da.iter_mut().for_each(|d| *d += s));
        }
        Op::RowSum(a) => {
            let cols = nodes[*a].value.cols();
            accumulate_with(grads, nodes, *a, |da| {
                for (row, &gi) in da.chunks_exact_mut(cols).zip(gd) {
                    row.iter_mut().for_each(|d| *d += gi);
                }
            });
        }
        Op::Gather { table, ids } => {
            let cols = nodes[*table].value.cols();
            accumulate_with(grads, nodes, *table, |dt| {
                for (r, &tok) in ids.iter().enumerate() {
                    let src = &gd[r * cols..(r + 1) * cols];
                    for (d, &x) in dt[tok * cols..(tok + 1) * cols].iter_mut().zip(src) {
                        *d += x;
                    }
                }
            });
        }
        Op::ConcatCols(parts) => {
            let total = g.cols();
            let rows = g.rows();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                accumulate_with(grads, nodes, p, |dp| {
                    for r in 0..rows {
                        let src = &gd[r * total + offset..r * total + offset + w];
                        for (d, &x) in dp[r * w..(r + 1) * w].iter_mut().zip(src) {
                            *d += x;
                        }
                    }
                });
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                accumulate_with(grads, nodes, p, |dp| {
                    for (d, &x) in dp.iter_mut().zip(&gd[offset..offset + n]) {
                        *d += x;
                    }
                });
                offset += n;
            }
        }
        Op::SliceCols { a, start } => {
            let total = nodes[*a].value.cols();
            let w = g.cols();
            let rows = g.rows();
            accumulate_with(grads, nodes, *a, |da| {
                for r in 0..rows {
                    for (d, &x) in da[r * total + start..r * total + start + w]
                        .iter_mut()
                        .zip(&gd[r * w..(r + 1) * w])
                    {
                        *d += x;
                    }
                }
            });
        }
        Op::SoftmaxRows { a, beta } => {
            let y = &node.value;
            let cols = y.cols();
            accumulate_with(grads, nodes, *a, |da| {
                for ((drow, grow), yrow) in da
                    .chunks_exact_mut(cols)
                    .zip(gd.chunks_exact(cols))
                    .zip(y.data().chunks_exact(cols))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((d, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += beta * yi * (gi - dot);
                    }
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            divisor,
            probs,
        } => {
            let cols = nodes[*logits].value.cols();
            let scale = gd[0] / divisor;
            accumulate_with(grads, nodes, *logits, |dl| {
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let prow = &probs[r * cols..(r + 1) * cols];
                    let drow = &mut dl[r * cols..(r + 1) * cols];
                    for (d, &p) in drow.iter_mut().zip(prow) {
                        *d += scale * p;
                    }
                    drow[t] -= scale;
                }
            });
        }
        Op::Attention {
            q,
            k,
            v,
            spec,
            probs,
        } => attention_backward(nodes, grads, gd, *q, *k, *v, spec, probs),
        Op::LayerNorm {
            a,
            normed,
            inv_std,
        } => {
            let cols = node.value.cols();
            let n = cols as f64;
            accumulate_with(grads, nodes, *a, |da| {
                for (r, &inv) in inv_std.iter().enumerate() {
                    let grow = &gd[r * cols..(r + 1) * cols];
                    let xhat = &normed[r * cols..(r + 1) * cols];
                    let sum_g: f64 = grow.iter().sum();
                    let sum_gx: f64 = grow.iter().zip(xhat).map(|(g, x)| g * x).sum();
                    for ((d, &gi), &xi) in da[r * cols..(r + 1) * cols].iter_mut().zip(grow).zip(xhat)
                    {
                        *d += inv / n * (n * gi - sum_g - xi * sum_gx);
                    }
                }
            });
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
    gd: &[f64],
    q: NodeId,
    k: NodeId,
    v: NodeId,
    spec: &AttentionSpec,
    probs: &[f64],
) {
    let (h_n, dk, dv) = (spec.heads, spec.key_dim, spec.value_dim);
    let qw = h_n * dk;
    let vw = h_n * dv;
    let qv = nodes[q].value.data();
    let kv = nodes[k].value.data();
    let vv = nodes[v].value.data();
    let rows: usize = spec.segments.iter().sum();
    let mut dq = vec![0.0; rows * qw];
    let mut dk_buf = vec![0.0; rows * qw];
    let mut dv_buf = vec![0.0; rows * vw];
    let offsets = spec.prob_offsets();
    let mut r0 = 0;
    for (s, &len) in spec.segments.iter().enumerate() {
        for h in 0..h_n {
            let p = &probs[offsets[s] + h * len * len..offsets[s] + (h + 1) * len * len];
            let mut dp = vec![0.0; len];
            for i in 0..len {
                let jmax = if spec.causal { i + 1 } else { len };
                let go = &gd[(r0 + i) * vw + h * dv..(r0 + i) * vw + (h + 1) * dv];
                for j in 0..jmax {
                    let vj = &vv[(r0 + j) * vw + h * dv..(r0 + j) * vw + (h + 1) * dv];
                    dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                    let pij = p[i * len + j];
                    let dvj = &mut dv_buf[(r0 + j) * vw + h * dv..(r0 + j) * vw + (h + 1) * dv];
                    for (d, &x) in dvj.iter_mut().zip(go) {
                        *d += pij * x;
                    }
                }
                let dot: f64 = (0..jmax).map(|j| p[i * len + j] * dp[j]).sum();
                let qi = &qv[(r0 + i) * qw + h * dk..(r0 + i) * qw + (h + 1) * dk];
                for j in 0..jmax {
                    let ds = p[i * len + j] * (dp[j] - dot);
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &kv[(r0 + j) * qw + h * dk..(r0 + j) * qw + (h + 1) * dk];
                    let dqi = &mut dq[(r0 + i) * qw + h * dk..(r0 + i) * qw + (h + 1) * dk];
                    for (d, &x) in dqi.iter_mut().zip(kj) {
                        *d += ds * x;
                    }
                    let dkj = &mut dk_buf[(r0 + j) * qw + h * dk..(r0 + j) * qw + (h + 1) * dk];
                    for (d, &x) in dkj.iter_mut().zip(qi) {
                        *d += ds * x;
                    }
                }
            }
        }
        r0 += len;
    }
    accumulate(grads, nodes, q, Tensor::matrix(rows, qw, dq));
    accumulate(grads, nodes, k, Tensor::matrix(rows, qw, dk_buf));
    accumulate(grads, nodes, v, Tensor::matrix(rows, vw, dv_buf));
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.value(self.id).item()
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(LmError::dim(op, &a, &b));
        }
        Ok(())
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'t> {
        let value = f(&self.tape.value(self.id));
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, op, needs)
    }

    fn binary(
        &self,
        other: &Var<'t>,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Tensor,
    ) -> Var<'t> {
        let value = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            f(&a, &b)
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        self.tape.push(value, op, needs)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false)
    }

    /// `self * other^T`, with `other` stored untransposed.
    pub fn matmul_t(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: &Var<'t>, b_t: bool) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        let inner_b = if b_t { sb.get(1) } else { sb.first() };
        if sa.len() != 2 || sb.len() != 2 || Some(&sa[1]) != inner_b {
            return Err(LmError::dim(if b_t { "matmul_t" } else { "matmul" }, &sa, &sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let n = if b_t { sb[0] } else { sb[1] };
        let op = Op::MatMul {
            a: self.id,
            b: other.id,
            b_t,
        };
        Ok(self.binary(other, op, |a, b| {
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), b_t, &mut out, false);
            Tensor::matrix(m, n, out)
        }))
    }

    fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "add")?;
        Ok(self.binary(other, Op::Add(self.id, other.id), |a, b| {
            Self::zip_with(a, b, |x, y| x + y)
        }))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "sub")?;
        Ok(self.binary(other, Op::Sub(self.id, other.id), |a, b| {
            Self::zip_with(a, b, |x, y| x - y)
        }))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "mul")?;
        Ok(self.binary(other, Op::Mul(self.id, other.id), |a, b| {
            Self::zip_with(a, b, |x, y| x * y)
        }))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |a| a.map(|x| x * c))
    }

    /// Adds `bias` (length = columns) to every row.
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), bias.shape());
        let cols = if sa.len() == 2 { sa[1] } else { usize::MAX };
        let blen: usize = sb.iter().product();
        if sa.len() != 2 || blen != cols || sb.len() > 2 || (sb.len() == 2 && sb[0] != 1) {
            return Err(LmError::dim("add_row", &sa, &sb));
        }
        let op = Op::AddRow {
            a: self.id,
            bias: bias.id,
        };
        Ok(self.binary(bias, op, |a, b| {
            let mut out = a.clone();
            for row in out.data_mut().chunks_exact_mut(cols) {
                for (x, &y) in row.iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            out
        }))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |a| a.map(|x| if x > 0.0 { x } else { 0.0 }))
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(Op::Abs(self.id), |a| a.map(f64::abs))
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |a| Tensor::scalar(a.sum()))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.tape.value(self.id).len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums each row, giving a `rows x 1` column.
    pub fn row_sum(&self) -> Var<'t> {
        self.unary(Op::RowSum(self.id), |a| {
            let c = a.cols();
            let rows = a.rows();
            let data = (0..rows).map(|r| a.data()[r * c..(r + 1) * c].iter().sum()).collect();
            Tensor::matrix(rows, 1, data)
        })
    }

    /// Row lookup into an embedding table.
    pub fn gather(&self, ids: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(LmError::Contract(format!("gather needs a table, got {shape:?}")));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= shape[0]) {
            return Err(LmError::Contract(format!(
                "token id {bad} out of range for table with {} rows",
                shape[0]
            )));
        }
        let op = Op::Gather {
            table: self.id,
            ids: ids.to_vec(),
        };
        let cols = shape[1];
        Ok(self.unary(op, |t| {
            let mut data = Vec::with_capacity(ids.len() * cols);
            for &i in ids {
                data.extend_from_slice(t.row(i));
            }
            Tensor::matrix(ids.len(), cols, data)
        }))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| LmError::Contract("concat of zero tensors".into()))?;
        let tape = first.tape;
        let rows = first.shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != 2 || s[0] != rows {
                return Err(LmError::dim("concat_cols", &first.shape(), &s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        {
            let nodes = tape.nodes.borrow();
            let mut offset = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let src = nodes[p.id].value.data();
                for r in 0..rows {
                    data[r * total + offset..r * total + offset + w]
                        .copy_from_slice(&src[r * w..(r + 1) * w]);
                }
                offset += w;
            }
        }
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        let needs = tape.needs(&ids);
        Ok(tape.push(Tensor::matrix(rows, total, data), Op::ConcatCols(ids), needs))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| LmError::Contract("concat of zero tensors".into()))?;
        let tape = first.tape;
        let cols = first.shape()[1];
        let mut rows = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != 2 || s[1] != cols {
                return Err(LmError::dim("concat_rows", &first.shape(), &s));
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * cols);
        {
            let nodes = tape.nodes.borrow();
            for p in parts {
                data.extend_from_slice(nodes[p.id].value.data());
            }
        }
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        let needs = tape.needs(&ids);
        Ok(tape.push(Tensor::matrix(rows, cols, data), Op::ConcatRows(ids), needs))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 || start > end || end > s[1] {
            return Err(LmError::Contract(format!(
                "column slice {start}..{end} out of range for {s:?}"
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        let w = end - start;
        Ok(self.unary(Op::SliceCols { a: self.id, start }, |a| {
            let mut data = Vec::with_capacity(rows * w);
            for r in 0..rows {
                data.extend_from_slice(&a.data()[r * cols + start..r * cols + end]);
            }
            Tensor::matrix(rows, w, data)
        }))
    }

    /// Row-wise `softmax(beta * x)`.
    pub fn softmax_rows(&self, beta: f64) -> Var<'t> {
        self.unary(Op::SoftmaxRows { a: self.id, beta }, |a| {
            let c = a.cols();
            let mut out = Vec::with_capacity(a.len());
            for row in a.data().chunks_exact(c.max(1)) {
                out.extend(super::softmax(row, beta));
            }
            Tensor::new(a.shape().to_vec(), out).expect("same shape")
        })
    }

    /// `sum_r -ln softmax(logits_r)[target_r] / divisor` over rows with a
    /// target. Stabilized by log-sum-exp.
    pub fn cross_entropy(&self, targets: &[Option<usize>], divisor: f64) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(LmError::dim("cross_entropy", &s, &[targets.len()]));
        }
        let cols = s[1];
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= cols) {
            return Err(LmError::Contract(format!("target {bad} out of range for {cols} classes")));
        }
        let (value, probs) = {
            let a = self.tape.value(self.id);
            let mut probs = vec![0.0; a.len()];
            let mut total = 0.0;
            for (r, t) in targets.iter().enumerate() {
                let Some(t) = *t else { continue };
                let row = a.row(r);
                let lp = super::log_softmax(row, 1.0);
                total -= lp[t];
                for (p, l) in probs[r * cols..(r + 1) * cols].iter_mut().zip(&lp) {
                    *p = l.exp();
                }
            }
            (total / divisor, probs)
        };
        let op = Op::CrossEntropy {
            logits: self.id,
            targets: targets.to_vec(),
            divisor,
            probs,
        };
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(Tensor::scalar(value), op, needs))
    }

    /// Fused multi-head attention: per head `c = softmax(q_i . k_j)` over the
    /// allowed `j`, output `sum_j c_ij v_j`; heads are concatenated.
    pub fn attention(q: &Var<'t>, k: &Var<'t>, v: &Var<'t>, spec: AttentionSpec) -> Result<Var<'t>> {
        let rows: usize = spec.segments.iter().sum();
        let qw = spec.heads * spec.key_dim;
        let vw = spec.heads * spec.value_dim;
        let (sq, sk, sv) = (q.shape(), k.shape(), v.shape());
        if sq != [rows, qw] || sk != [rows, qw] {
            return Err(LmError::dim("attention(q,k)", &sq, &sk));
        }
        if sv != [rows, vw] {
            return Err(LmError::dim("attention(v)", &sv, &[rows, vw]));
        }
        let tape = q.tape;
        let (out, probs) = {
            let qv = tape.value(q.id);
            let kv = tape.value(k.id);
            let vv = tape.value(v.id);
            attention_forward(qv.data(), kv.data(), vv.data(), &spec)
        };
        let needs = tape.needs(&[q.id, k.id, v.id]);
        let op = Op::Attention {
            q: q.id,
            k: k.id,
            v: v.id,
            spec,
            probs,
        };
        Ok(tape.push(Tensor::matrix(rows, vw, out), op, needs))
    }

    /// Row-wise standardization without gain or bias.
    pub fn layer_norm(&self, eps: f64) -> Var<'t> {
        let (value, normed, inv_std) = {
            let a = self.tape.value(self.id);
            let c = a.cols();
            let mut normed = Vec::with_capacity(a.len());
            let mut inv_std = Vec::with_capacity(a.rows());
            for row in a.data().chunks_exact(c.max(1)) {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std.push(inv);
                normed.extend(row.iter().map(|x| (x - mean) * inv));
            }
            (
                Tensor::new(a.shape().to_vec(), normed.clone()).expect("same shape"),
                normed,
                inv_std,
            )
        };
        let op = Op::LayerNorm {
            a: self.id,
            normed,
            inv_std,
        };
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, op, needs)
    }
}

fn attention_forward(q: &[f64], k: &[f64], v: &[f64], spec: &AttentionSpec) -> (Vec<f64>, Vec<f64>) {
    let (h_n, dk, dv) = (spec.heads, spec.key_dim, spec.value_dim);
    let qw = h_n * dk;
    let vw = h_n * dv;
    let rows: usize = spec.segments.iter().sum();
    let offsets = spec.prob_offsets();
    let mut out = vec![0.0; rows * vw];
    let mut probs = vec![0.0; *offsets.last().unwrap_or(&0)];
    let mut r0 = 0;
    let mut scores = Vec::new();
    for (s, &len) in spec.segments.iter().enumerate() {
        for h in 0..h_n {
            let base = offsets[s] + h * len * len;
            for i in 0..len {
                let jmax = if spec.causal { i + 1 } else { len };
                let qi = &q[(r0 + i) * qw + h * dk..(r0 + i) * qw + (h + 1) * dk];
                scores.clear();
                for j in 0..jmax {
                    let kj = &k[(r0 + j) * qw + h * dk..(r0 + j) * qw + (h + 1) * dk];
                    scores.push(qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>());
                }
                let c = super::softmax(&scores, 1.0);
                probs[base + i * len..base + i * len + jmax].copy_from_slice(&c);
                let oi = &mut out[(r0 + i) * vw + h * dv..(r0 + i) * vw + (h + 1) * dv];
                for (j, &cij) in c.iter().enumerate() {
                    let vj = &v[(r0 + j) * vw + h * dv..(r0 + j) * vw + (h + 1) * dv];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o += cij * x;
                    }
                }
            }
        }
        r0 += len;
    }
    (out, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = x.mul(&x).unwrap();
        let g = tape.backward(y, &[x]).unwrap();
        assert_eq!(g.get(x).item(), 6.0);
    }

    #[test]
    fn product_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.param(Tensor::scalar(5.0));
        let f = x.mul(&y).unwrap();
        let g = tape.backward(f, &[x, y]).unwrap();
        assert_eq!(g.get(x).item(), 5.0);
        assert_eq!(g.get(y).item(), 2.0);
    }

    #[test]
    fn relu_values_and_indicator_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
        let neg = tape.param(Tensor::vector(vec![-3.0, -0.5]));
        assert_eq!(neg.relu().value().data(), &[0.0, 0.0]);
        let z = tape.param(Tensor::vector(vec![-1.0, 3.0]));
        let s = z.relu().sum();
        let g = tape.backward(s, &[z]).unwrap();
        assert_eq!(g.get(z).data(), &[0.0, 1.0]);
        // subgradient at exactly zero
        let t2 = Tape::new();
        let zero = t2.param(Tensor::vector(vec![0.0]));
        let g0 = t2.backward(zero.relu().sum(), &[zero]).unwrap();
        assert_eq!(g0.get(zero).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x, &[x]), Err(LmError::Contract(_))));
    }

    #[test]
    fn unreached_param_gets_zeros() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0));
        let unused = tape.param(Tensor::zeros(&[2, 3]));
        let g = tape.backward(x.scale(2.0), &[x, unused]).unwrap();
        assert_eq!(g.get(unused), &Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn matmul_var_shape_error() {
        let tape = Tape::new();
        let a = tape.param(Tensor::zeros(&[2, 3]));
        let b = tape.param(Tensor::zeros(&[2, 3]));
        let err = a.matmul(&b).unwrap_err();
        assert!(matches!(err, LmError::Dimension { .. }));
    }

    #[test]
    fn single_position_attention_is_identity_weighting() {
        let tape = Tape::new();
        let q = tape.param(Tensor::matrix(1, 2, vec![3.0, -1.0]));
        let k = tape.param(Tensor::matrix(1, 2, vec![0.5, 2.0]));
        let v = tape.param(Tensor::matrix(1, 2, vec![7.0, 8.0]));
        let spec = AttentionSpec {
            heads: 1,
            key_dim: 2,
            value_dim: 2,
            segments: vec![1],
            causal: true,
        };
        let o = Var::attention(&q, &k, &v, spec).unwrap();
        assert_eq!(o.value().data(), &[7.0, 8.0]);
        let (_, probs) = tape.attention_weights(o).unwrap();
        assert_eq!(probs, vec![1.0]);
    }

    #[test]
    fn concat_rows_routes_gradients() {
        let tape = Tape::new();
        let a = tape.param(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let b = tape.param(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]));
        let c = Var::concat_rows(&[a, b]).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = tape.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let loss = c.mul(&w).unwrap().sum();
        let g = tape.backward(loss, &[a, b]).unwrap();
        assert_eq!(g.get(a).data(), &[1.0, 2.0]);
        assert_eq!(g.get(b).data(), &[3.0, 4.0, 5.0, 6.0]);
    }
}
