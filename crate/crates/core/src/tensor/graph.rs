use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::{axis_split, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

enum Op {
    Leaf,
    Param,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Matrix plus a row vector broadcast over rows.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Relu(NodeId),
    Softmax(NodeId, usize),
    LogSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    MeanRows {
        x: NodeId,
        rows: usize,
    },
    Sum(NodeId),
    Transpose(NodeId),
    /// Scalar-valued op whose local gradients were computed in the forward pass.
    ScalarFn {
        inputs: Vec<NodeId>,
        local: Vec<Tensor>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A tape of differentiable operations.
///
/// A graph is built for one forward pass, differentiated once and dropped.
/// Dropout is active only on graphs created with [`Graph::training`].
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, NodeId>>,
    rng: RefCell<Option<ChaCha8Rng>>,
    fault: Cell<Option<&'static str>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Result of [`Graph::backward`]: gradients of the loss for every node.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, NodeId)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.nodes.get(v.id).and_then(Option::as_ref)
    }

    /// Parameter gradients, in the order parameters entered the graph.
    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(pid, nid)| self.nodes[*nid].as_ref().map(|g| (pid, g)))
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Inference graph: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            rng: RefCell::new(None),
            fault: Cell::new(None),
        }
    }

    /// Training graph whose dropout masks are drawn from a generator seeded with `seed`.
    pub fn training(seed: u64) -> Self {
        let g = Self::new();
        *g.rng.borrow_mut() = Some(ChaCha8Rng::seed_from_u64(seed));
        g
    }

    pub fn is_training(&self) -> bool {
        self.rng.borrow().is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input that is not a registered parameter.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        self.push_raw(Arc::new(t), Op::Leaf, true)
    }

    /// A constant: no gradient is computed for it.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push_raw(Arc::new(t), Op::Leaf, false)
    }

    /// Brings a parameter into the graph. Repeated calls return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&nid) = self.params.borrow().get(&id) {
            return Var { graph: self, id: nid };
        }
        let v = self.push_raw(Arc::clone(store.value(id)), Op::Param, true);
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    pub fn concat_cols<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::usage("concat_cols of zero tensors"))?;
        let rows = first.value().rows();
        let vals: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        for v in &vals {
            if v.ndim() != 2 || v.rows() != rows {
                return Err(Error::dim("concat_cols", first.value().shape(), v.shape()));
            }
        }
        let total: usize = vals.iter().map(|v| v.cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &vals {
                out.extend_from_slice(v.row(r));
            }
        }
        let t = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), "concat_cols"))
    }

    /// A scalar node with caller-supplied value and local gradients `d out / d input`.
    pub fn scalar_fn<'g>(
        &'g self,
        inputs: &[Var<'g>],
        value: f64,
        local: Vec<Tensor>,
        name: &'static str,
    ) -> Result<Var<'g>> {
        if inputs.len() != local.len() {
            return Err(Error::usage("scalar_fn: one local gradient per input"));
        }
        for (i, l) in inputs.iter().zip(&local) {
            if i.value().shape() != l.shape() {
                return Err(Error::dim(name, i.value().shape(), l.shape()));
            }
        }
        let op = Op::ScalarFn {
            inputs: inputs.iter().map(|v| v.id).collect(),
            local,
        };
        Ok(self.push(Tensor::scalar(value), op, name))
    }

    fn node(&self, id: NodeId) -> Ref<'_, Node> {
        Ref::map(self.nodes.borrow(), |n| &n[id])
    }

    fn push_raw(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { graph: self, id }
    }

    fn push(&self, value: Tensor, op: Op, name: &'static str) -> Var<'_> {
        if self.fault.get().is_none() && !value.is_finite() {
            self.fault.set(Some(name));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs_of(&op).iter().any(|&i| nodes[i].requires_grad)
        };
        self.push_raw(Arc::new(value), op, requires_grad)
    }

    /// First operation that produced a non-finite value, if any.
    pub fn fault(&self) -> Option<&'static str> {
        self.fault.get()
    }

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if let Some(op) = self.fault.get() {
            return Err(Error::NonFinite { op });
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, node, &dy, &mut grads);
            }
            grads[id] = Some(dy);
        }

        let params = self
            .params
            .borrow()
            .iter()
            .map(|(&p, &n)| (p, n))
            .collect::<Vec<_>>();
        let mut params = params;
        params.sort_unstable();
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }
}

fn inputs_of(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf | Op::Param => vec![],
        Op::MatMul(a, b)
        | Op::MatMulT(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddRow(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::AddConst(a)
        | Op::Relu(a)
        | Op::Softmax(a, _)
        | Op::LogSoftmax(a)
        | Op::Sum(a)
        | Op::Transpose(a) => vec![*a],
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::Gather { table, .. } => vec![*table],
        Op::Dropout { x, .. } | Op::SliceCols { x, .. } | Op::MeanRows { x, .. } => vec![*x],
        Op::ConcatCols(parts) => parts.clone(),
        Op::ScalarFn { inputs, .. } => inputs.clone(),
    }
}

/// Gradient buffer for `id`, allocated as zeros on first use.
fn slot<'a>(grads: &'a mut [Option<Tensor>], nodes: &[Node], id: NodeId) -> Option<&'a mut [f64]> {
    if !nodes[id].requires_grad {
        return None;
    }
    let g = grads[id].get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape()));
    Some(g.data_mut())
}

fn propagate(nodes: &[Node], node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
    let dyv = dy.data();
    match &node.op {
        Op::Leaf | Op::Param => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if let Some(ga) = slot(grads, nodes, *a) {
                kernels::matmul_nt(dyv, bv.data(), ga, m, n, k);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                kernels::matmul_tn(av.data(), dyv, gb, m, k, n);
            }
        }
        Op::MatMulT(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
            if let Some(ga) = slot(grads, nodes, *a) {
                kernels::matmul_nn(dyv, bv.data(), ga, m, n, k);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                kernels::matmul_tn(dyv, av.data(), gb, m, n, k);
            }
        }
        Op::Add(a, b) => {
            for id in [*a, *b] {
                if let Some(g) = slot(grads, nodes, id) {
                    g.iter_mut().zip(dyv).for_each(|(g, d)| *g += d);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(g) = slot(grads, nodes, *a) {
                g.iter_mut().zip(dyv).for_each(|(g, d)| *g += d);
            }
            if let Some(g) = slot(grads, nodes, *b) {
                g.iter_mut().zip(dyv).for_each(|(g, d)| *g -= d);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (Arc::clone(&nodes[*a].value), Arc::clone(&nodes[*b].value));
            if let Some(g) = slot(grads, nodes, *a) {
                for ((g, d), y) in g.iter_mut().zip(dyv).zip(bv.data()) {
                    *g += d * y;
                }
            }
            if let Some(g) = slot(grads, nodes, *b) {
                for ((g, d), x) in g.iter_mut().zip(dyv).zip(av.data()) {
                    *g += d * x;
                }
            }
        }
        Op::AddRow(a, b) => {
            if let Some(g) = slot(grads, nodes, *a) {
                g.iter_mut().zip(dyv).for_each(|(g, d)| *g += d);
            }
            let n = nodes[*b].value.numel();
            if let Some(g) = slot(grads, nodes, *b) {
                for row in dyv.chunks_exact(n.max(1)) {
                    g.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(g) = slot(grads, nodes, *a) {
                g.iter_mut().zip(dyv).for_each(|(g, d)| *g += s * d);
            }
        }
        Op::AddConst(a) => {
            if let Some(g) = slot(grads, nodes, *a) {
                g.iter_mut().zip(dyv).for_each(|(g, d)| *g += d);
            }
        }
        Op::Relu(a) => {
            let x = Arc::clone(&nodes[*a].value);
            if let Some(g) = slot(grads, nodes, *a) {
                for ((g, d), x) in g.iter_mut().zip(dyv).zip(x.data()) {
                    if *x > 0.0 {
                        *g += d;
                    }
                }
            }
        }
        Op::Softmax(a, axis) => {
            let y = &node.value;
            let (outer, len, inner) =
                axis_split(y.shape(), *axis).expect("axis validated in forward");
            if let Some(g) = slot(grads, nodes, *a) {
                let yv = y.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let dot: f64 = (0..len).map(|k| dyv[at(k)] * yv[at(k)]).sum();
                        for k in 0..len {
                            g[at(k)] += yv[at(k)] * (dyv[at(k)] - dot);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            let y = &node.value;
            let c = y.cols();
            if let Some(g) = slot(grads, nodes, *a) {
                for ((grow, drow), yrow) in g
                    .chunks_exact_mut(c)
                    .zip(dyv.chunks_exact(c))
                    .zip(y.data().chunks_exact(c))
                {
                    let total: f64 = drow.iter().sum();
                    for ((g, d), y) in grow.iter_mut().zip(drow).zip(yrow) {
                        *g += d - y.exp() * total;
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
            let gv = Arc::clone(&nodes[*gain].value);
            if let Some(gg) = slot(grads, nodes, *gain) {
                for (drow, hrow) in dyv.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for ((g, dy), h) in gg.iter_mut().zip(drow).zip(hrow) {
                        *g += dy * h;
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, *bias) {
                for drow in dyv.chunks_exact(d) {
                    gb.iter_mut().zip(drow).for_each(|(g, dy)| *g += dy);
                }
            }
            if let Some(gx) = slot(grads, nodes, *x) {
                let mut dxhat = vec![0.0; d];
                for (r, ((grow, drow), hrow)) in gx
                    .chunks_exact_mut(d)
                    .zip(dyv.chunks_exact(d))
                    .zip(xhat.chunks_exact(d))
                    .enumerate()
                {
                    for ((dh, dy), g) in dxhat.iter_mut().zip(drow).zip(gv.data()) {
                        *dh = dy * g;
                    }
                    let mean_dh = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dhh =
                        dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for ((g, dh), h) in grow.iter_mut().zip(&dxhat).zip(hrow) {
                        *g += inv_std[r] * (dh - mean_dh - h * mean_dhh);
                    }
                }
            }
        }
        Op::Gather { table, ids } => {
            let d = nodes[*table].value.cols();
            if let Some(g) = slot(grads, nodes, *table) {
                for (&id, drow) in ids.iter().zip(dyv.chunks_exact(d)) {
                    g[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(drow)
                        .for_each(|(g, dy)| *g += dy);
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(g) = slot(grads, nodes, *x) {
                for ((g, d), m) in g.iter_mut().zip(dyv).zip(mask) {
                    *g += d * m;
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let mut offset = 0;
            for &p in parts {
                let c = nodes[p].value.cols();
                if let Some(g) = slot(grads, nodes, p) {
                    for (grow, drow) in g.chunks_exact_mut(c).zip(dyv.chunks_exact(total)) {
                        grow.iter_mut()
                            .zip(&drow[offset..offset + c])
                            .for_each(|(g, d)| *g += d);
                    }
                }
                offset += c;
            }
        }
        Op::SliceCols { x, start } => {
            let c = node.value.cols();
            let total = nodes[*x].value.cols();
            if let Some(g) = slot(grads, nodes, *x) {
                for (grow, drow) in g.chunks_exact_mut(total).zip(dyv.chunks_exact(c)) {
                    grow[*start..start + c]
                        .iter_mut()
                        .zip(drow)
                        .for_each(|(g, d)| *g += d);
                }
            }
        }
        Op::MeanRows { x, rows } => {
            let c = node.value.numel();
            let inv = 1.0 / *rows as f64;
            if let Some(g) = slot(grads, nodes, *x) {
                for grow in g.chunks_exact_mut(c).take(*rows) {
                    grow.iter_mut().zip(dyv).for_each(|(g, d)| *g += d * inv);
                }
            }
        }
        Op::Sum(a) => {
            let d = dyv[0];
            if let Some(g) = slot(grads, nodes, *a) {
                g.iter_mut().for_each(|g| *g += d);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
            if let Some(g) = slot(grads, nodes, *a) {
                for i in 0..r {
                    for j in 0..c {
                        g[j * r + i] += dyv[i * c + j];
                    }
                }
            }
        }
        Op::ScalarFn { inputs, local } => {
            let d = dyv[0];
            for (&i, l) in inputs.iter().zip(local) {
                if let Some(g) = slot(grads, nodes, i) {
                    g.iter_mut().zip(l.data()).for_each(|(g, l)| *g += d * l);
                }
            }
        }
    }
}

fn require_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn require_matrix(op: &'static str, a: &Tensor) -> Result<()> {
    if a.ndim() != 2 {
        return Err(Error::dim(op, a.shape(), &[]));
    }
    Ok(())
}

impl<'g> Var<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor> {
        Arc::clone(&self.graph.node(self.id).value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.node(self.id).value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.graph.node(self.id).value.item()
    }

    fn unary(&self, value: Tensor, op: Op, name: &'static str) -> Var<'g> {
        self.graph.push(value, op, name)
    }

    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::dim("matmul", a.shape(), b.shape()));
        }
        let out = a.matmul(&b)?;
        Ok(self.unary(out, Op::MatMul(self.id, other.id), "matmul"))
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[1] {
            return Err(Error::dim("matmul_t", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(a.data(), b.data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.unary(t, Op::MatMulT(self.id, other.id), "matmul_t"))
    }

    fn zip_with(
        &self,
        other: &Var<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        require_same(name, &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.unary(t, op, name))
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.zip_with(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.zip_with(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.zip_with(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&self, bias: &Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), bias.value());
        if b.ndim() != 1 || a.cols() != b.numel() {
            return Err(Error::dim("add_row", a.shape(), b.shape()));
        }
        let mut data = a.data().to_vec();
        for row in data.chunks_exact_mut(b.numel().max(1)) {
            row.iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        }
        let t = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.unary(t, Op::AddRow(self.id, bias.id), "add_row"))
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        let a = self.value();
        let data = a.data().iter().map(|x| x * s).collect();
        let t = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.unary(t, Op::Scale(self.id, s), "scale")
    }

    /// Adds a constant tensor (e.g. an attention mask); no gradient flows to it.
    pub fn add_const(&self, c: &Tensor) -> Result<Var<'g>> {
        let a = self.value();
        require_same("add_const", &a, c)?;
        let data = a.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.unary(t, Op::AddConst(self.id), "add_const"))
    }

    pub fn relu(&self) -> Var<'g> {
        let a = self.value();
        let data = a.data().iter().map(|x| x.max(0.0)).collect();
        let t = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.unary(t, Op::Relu(self.id), "relu")
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'g>> {
        let t = self.value().softmax(axis)?;
        Ok(self.unary(t, Op::Softmax(self.id, axis), "softmax"))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Var<'g> {
        let a = self.value();
        let mut data = a.data().to_vec();
        for row in data.chunks_exact_mut(a.cols().max(1)) {
            kernels::log_softmax_row(row);
        }
        let t = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.unary(t, Op::LogSoftmax(self.id), "log_softmax")
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Var<'g>, bias: &Var<'g>, eps: f64) -> Result<Var<'g>> {
        let a = self.value();
        let d = a.cols();
        let (gv, bv) = (gain.value(), bias.value());
        if d == 0 || gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::dim("layer_norm", a.shape(), gv.shape()));
        }
        let rows = a.rows();
        let mut xhat = Vec::with_capacity(a.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(a.numel());
        for row in a.data().chunks_exact(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for ((x, g), b) in row.iter().zip(gv.data()).zip(bv.data()) {
                let h = (x - mean) * is;
                xhat.push(h);
                out.push(h * g + b);
            }
        }
        let t = Tensor::new(a.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            xhat,
            inv_std,
        };
        Ok(self.unary(t, op, "layer_norm"))
    }

    /// Selects rows of a `V×D` table.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'g>> {
        let table = self.value();
        require_matrix("gather_rows", &table)?;
        let (v, d) = (table.shape()[0], table.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::usage(format!("gather_rows: id {id} >= table size {v}")));
            }
            data.extend_from_slice(table.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.unary(
            t,
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
            "gather_rows",
        ))
    }

    /// Inverted dropout. Identity at rate 0 and on inference graphs.
    pub fn dropout(&self, rate: f64) -> Result<Var<'g>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::usage(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 || !self.graph.is_training() {
            return Ok(*self);
        }
        let a = self.value();
        let keep = 1.0 - rate;
        let mask: Vec<f64> = {
            let mut rng = self.graph.rng.borrow_mut();
            let rng = rng.as_mut().expect("training graph");
            (0..a.numel())
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect()
        };
        let data = a.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.unary(t, Op::Dropout { x: self.id, mask }, "dropout"))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'g>> {
        let a = self.value();
        require_matrix("slice_cols", &a)?;
        let c = a.cols();
        if start + len > c {
            return Err(Error::dim("slice_cols", a.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(a.rows() * len);
        for row in a.data().chunks_exact(c.max(1)) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let t = Tensor::new(vec![a.rows(), len], data)?;
        Ok(self.unary(t, Op::SliceCols { x: self.id, start }, "slice_cols"))
    }

    /// Mean of the first `rows` rows, as a vector over columns.
    pub fn mean_rows(&self, rows: usize) -> Result<Var<'g>> {
        let a = self.value();
        require_matrix("mean_rows", &a)?;
        if rows == 0 || rows > a.rows() {
            return Err(Error::dim("mean_rows", a.shape(), &[rows]));
        }
        let c = a.cols();
        let mut out = vec![0.0; c];
        for row in a.data().chunks_exact(c.max(1)).take(rows) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        Ok(self.unary(Tensor::vector(out), Op::MeanRows { x: self.id, rows }, "mean_rows"))
    }

    pub fn sum(&self) -> Var<'g> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id), "sum")
    }

    pub fn transpose(&self) -> Result<Var<'g>> {
        let a = self.value();
        require_matrix("transpose", &a)?;
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = a.data()[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], data)?;
        Ok(self.unary(t, Op::Transpose(self.id), "transpose"))
    }
}
