use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use super::kernels;
use super::{matmul_dims, ParamId, ParamStore, Scalar, Tensor};

/// A fused operation whose forward pass is computed outside the graph.
///
/// `backward` receives the input values, the forward output, the upstream
/// gradient and which inputs need a gradient, and returns one optional
/// gradient per input.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&[T]],
        output: &[T],
        grad_out: &[T],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Param,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Relu(usize),
    Silu(usize),
    Softplus(usize),
    Exp(usize),
    Clamp(usize, T, T),
    Sum(usize),
    Mean(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        stats: Vec<(T, T)>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    Reshape(usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations on [`Var`]s for reverse-mode differentiation.
///
/// An inference graph (see [`Graph::inference`]) evaluates the same ops but
/// keeps no backward state.
pub struct Graph<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, usize>>,
    record: bool,
    training: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.borrow().len())
            .field("record", &self.record)
            .field("training", &self.training)
            .finish()
    }
}

/// Handle to a value on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar = f32> {
    id: usize,
    g: &'g Graph<T>,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

impl<T: Scalar> Graph<T> {
    /// Recording graph in training mode (dropout active).
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            record: true,
            training: true,
        }
    }

    /// Recording graph with dropout disabled; used for gradient checks.
    pub fn new_eval() -> Self {
        Self {
            training: false,
            ..Self::new()
        }
    }

    /// Non-recording graph in evaluation mode.
    pub fn inference() -> Self {
        Self {
            record: false,
            training: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        let (op, requires_grad) = if self.record {
            (op, requires_grad)
        } else {
            (Op::Leaf, false)
        };
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            id: nodes.len() - 1,
            g: self,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// A value that never receives gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// An input that receives gradient (readable via [`Gradients::wrt`]).
    pub fn leaf(&self, t: Tensor<T>) -> Var<'_, T> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// Places parameter `id` on the graph; repeated calls share one node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { id: node, g: self };
        }
        let t = store.get(id);
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Param,
            t.requires_grad,
        );
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    pub fn concat_cols<'g>(&'g self, parts: &[Var<'g, T>]) -> Var<'g, T> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let rows = nodes[ids[0]].value.len() / nodes[ids[0]].shape.last().unwrap();
            let widths: Vec<usize> = ids.iter().map(|&i| *nodes[i].shape.last().unwrap()).collect();
            for &i in &ids {
                assert_eq!(
                    nodes[i].value.len() / nodes[i].shape.last().unwrap(),
                    rows,
                    "concat_cols: row counts differ ({:?} vs {:?})",
                    nodes[ids[0]].shape,
                    nodes[i].shape
                );
            }
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (&i, &w) in ids.iter().zip(&widths) {
                    out.extend_from_slice(&nodes[i].value[r * w..(r + 1) * w]);
                }
            }
            (vec![rows, total], out)
        };
        let rg = self.rg(&ids);
        self.push(shape, value, Op::ConcatCols(ids), rg)
    }

    pub fn concat_rows<'g>(&'g self, parts: &[Var<'g, T>]) -> Var<'g, T> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let cols = *nodes[ids[0]].shape.last().unwrap();
            let mut out = Vec::new();
            for &i in &ids {
                assert_eq!(
                    *nodes[i].shape.last().unwrap(),
                    cols,
                    "concat_rows: widths differ ({:?} vs {:?})",
                    nodes[ids[0]].shape,
                    nodes[i].shape
                );
                out.extend_from_slice(&nodes[i].value);
            }
            (vec![out.len() / cols, cols], out)
        };
        let rg = self.rg(&ids);
        self.push(shape, value, Op::ConcatRows(ids), rg)
    }

    /// Runs a fused forward `f` over the input values and records `f`'s
    /// backward rule. `f` returns `(shape, value, op)`.
    pub fn custom<'g, F>(&'g self, inputs: &[Var<'g, T>], f: F) -> Var<'g, T>
    where
        F: FnOnce(&[&[T]], &[Vec<usize>]) -> (Vec<usize>, Vec<T>, Box<dyn CustomOp<T>>),
    {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let (shape, value, op) = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&[T]> = ids.iter().map(|&i| nodes[i].value.as_slice()).collect();
            let shapes: Vec<Vec<usize>> = ids.iter().map(|&i| nodes[i].shape.clone()).collect();
            f(&vals, &shapes)
        };
        let rg = self.rg(&ids);
        self.push(shape, value, Op::Custom { inputs: ids, op }, rg)
    }

    /// Reverse pass from scalar `loss`.
    ///
    /// # Panics
    /// If `loss` is not a single-element tensor or the graph is not recording.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        assert!(self.record, "backward on an inference graph");
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.len(),
            1,
            "backward needs a scalar loss, got shape {:?}",
            nodes[loss.id].shape
        );
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, node, &g, &mut grads);
            }
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[id] = Some(g);
            }
        }

        let params = self
            .params
            .borrow()
            .iter()
            .map(|(&p, &n)| (p, n))
            .collect();
        Gradients { grads, params }
    }
}

/// Gradients produced by one [`Graph::backward`] call.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf or parameter node, if it was reached.
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into `store` (grads accumulate until zeroed).
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(pid, node) in &self.params {
            let Some(g) = self.grads[node].as_ref() else { continue };
            let t = store.get_mut(pid);
            if !t.requires_grad {
                continue;
            }
            let dst = t.grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
            for (d, &s) in dst.iter_mut().zip(g) {
                *d += s;
            }
        }
    }
}

fn slot<'a, T: Scalar>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    idx: usize,
) -> Option<&'a mut Vec<T>> {
    if !nodes[idx].requires_grad {
        return None;
    }
    let len = nodes[idx].value.len();
    Some(grads[idx].get_or_insert_with(|| vec![T::zero(); len]))
}

fn add_into<T: Scalar>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], idx: usize, g: &[T]) {
    if let Some(dst) = slot(grads, nodes, idx) {
        for (d, &s) in dst.iter_mut().zip(g) {
            *d += s;
        }
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap()
}

fn propagate<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |i: usize| nodes[i].value.as_slice();
    match &node.op {
        Op::Leaf | Op::Param => {}
        &Op::MatMul(a, b) => {
            let (m, k, n) = matmul_dims(&nodes[a].shape, &nodes[b].shape).unwrap();
            if let Some(ga) = slot(grads, nodes, a) {
                T::gemm(m, n, k, g, false, val(b), true, ga, true);
            }
            if let Some(gb) = slot(grads, nodes, b) {
                T::gemm(k, m, n, val(a), true, g, false, gb, true);
            }
        }
        &Op::Add(a, b) => {
            add_into(grads, nodes, a, g);
            add_into(grads, nodes, b, g);
        }
        &Op::Sub(a, b) => {
            add_into(grads, nodes, a, g);
            if let Some(gb) = slot(grads, nodes, b) {
                for (d, &s) in gb.iter_mut().zip(g) {
                    *d -= s;
                }
            }
        }
        &Op::Mul(a, b) => {
            if let Some(ga) = slot(grads, nodes, a) {
                for ((d, &s), &o) in ga.iter_mut().zip(g).zip(val(b)) {
                    *d += s * o;
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                for ((d, &s), &o) in gb.iter_mut().zip(g).zip(val(a)) {
                    *d += s * o;
                }
            }
        }
        &Op::AddRow(x, b) => {
            add_into(grads, nodes, x, g);
            let n = nodes[b].value.len();
            if let Some(gb) = slot(grads, nodes, b) {
                for row in g.chunks(n) {
                    for (d, &s) in gb.iter_mut().zip(row) {
                        *d += s;
                    }
                }
            }
        }
        &Op::MulRow(x, w) => {
            let n = nodes[w].value.len();
            if let Some(gx) = slot(grads, nodes, x) {
                for (grow, srow) in gx.chunks_mut(n).zip(g.chunks(n)) {
                    for ((d, &s), &wv) in grow.iter_mut().zip(srow).zip(val(w)) {
                        *d += s * wv;
                    }
                }
            }
            if let Some(gw) = slot(grads, nodes, w) {
                for (srow, xrow) in g.chunks(n).zip(val(x).chunks(n)) {
                    for ((d, &s), &xv) in gw.iter_mut().zip(srow).zip(xrow) {
                        *d += s * xv;
                    }
                }
            }
        }
        &Op::Scale(x, c) => {
            if let Some(gx) = slot(grads, nodes, x) {
                for (d, &s) in gx.iter_mut().zip(g) {
                    *d += s * c;
                }
            }
        }
        &Op::AddScalar(x) | &Op::Reshape(x) => add_into(grads, nodes, x, g),
        &Op::Relu(x) => unary(grads, nodes, x, g, |xv, _| if xv > T::zero() { T::one() } else { T::zero() }, &node.value),
        &Op::Silu(x) => unary(grads, nodes, x, g, |xv, _| kernels::silu_grad(xv), &node.value),
        &Op::Softplus(x) => unary(grads, nodes, x, g, |xv, _| kernels::sigmoid(xv), &node.value),
        &Op::Exp(x) => unary(grads, nodes, x, g, |_, y| y, &node.value),
        &Op::Clamp(x, lo, hi) => unary(
            grads,
            nodes,
            x,
            g,
            |xv, _| if xv >= lo && xv <= hi { T::one() } else { T::zero() },
            &node.value,
        ),
        &Op::Sum(x) => {
            if let Some(gx) = slot(grads, nodes, x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::Mean(x) => {
            let n = T::from_usize(nodes[x].value.len()).unwrap();
            if let Some(gx) = slot(grads, nodes, x) {
                gx.iter_mut().for_each(|d| *d += g[0] / n);
            }
        }
        &Op::Softmax(x) => {
            let cols = last_dim(&node.shape);
            if let Some(gx) = slot(grads, nodes, x) {
                for ((grow, yrow), srow) in gx.chunks_mut(cols).zip(node.value.chunks(cols)).zip(g.chunks(cols)) {
                    kernels::softmax_row_backward(yrow, srow, grow);
                }
            }
        }
        Op::LayerNorm { x, gain, bias, stats } => {
            let cols = last_dim(&nodes[*x].shape);
            let mut gx = nodes[*x].requires_grad.then(|| vec![T::zero(); nodes[*x].value.len()]);
            let mut gg = nodes[*gain].requires_grad.then(|| vec![T::zero(); cols]);
            let mut gb = nodes[*bias].requires_grad.then(|| vec![T::zero(); cols]);
            kernels::layer_norm_backward(
                val(*x),
                val(*gain),
                stats,
                g,
                cols,
                gx.as_deref_mut(),
                gg.as_deref_mut(),
                gb.as_deref_mut(),
            );
            if let Some(v) = gx {
                add_into(grads, nodes, *x, &v);
            }
            if let Some(v) = gg {
                add_into(grads, nodes, *gain, &v);
            }
            if let Some(v) = gb {
                add_into(grads, nodes, *bias, &v);
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            count,
        } => {
            let cols = last_dim(&nodes[*logits].shape);
            let scale = g[0] / T::from_usize((*count).max(1)).unwrap();
            if let Some(gl) = slot(grads, nodes, *logits) {
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..cols {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        gl[r * cols + j] += (probs[r * cols + j] - onehot) * scale;
                    }
                }
            }
        }
        &Op::SliceCols { x, start } => {
            let in_cols = last_dim(&nodes[x].shape);
            let w = last_dim(&node.shape);
            if let Some(gx) = slot(grads, nodes, x) {
                for (r, srow) in g.chunks(w).enumerate() {
                    let dst = &mut gx[r * in_cols + start..r * in_cols + start + w];
                    for (d, &s) in dst.iter_mut().zip(srow) {
                        *d += s;
                    }
                }
            }
        }
        Op::ConcatCols(ids) => {
            let total = last_dim(&node.shape);
            let mut offset = 0;
            for &i in ids {
                let w = last_dim(&nodes[i].shape);
                if let Some(gi) = slot(grads, nodes, i) {
                    for (r, grow) in gi.chunks_mut(w).enumerate() {
                        let src = &g[r * total + offset..r * total + offset + w];
                        for (d, &s) in grow.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += w;
            }
        }
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            for &i in ids {
                let n = nodes[i].value.len();
                add_into(grads, nodes, i, &g[offset..offset + n]);
                offset += n;
            }
        }
        Op::GatherRows { x, idx } => {
            let cols = last_dim(&nodes[*x].shape);
            if let Some(gx) = slot(grads, nodes, *x) {
                for (i, &src) in idx.iter().enumerate() {
                    let dst = &mut gx[src * cols..(src + 1) * cols];
                    for (d, &s) in dst.iter_mut().zip(&g[i * cols..(i + 1) * cols]) {
                        *d += s;
                    }
                }
            }
        }
        Op::Custom { inputs, op } => {
            let vals: Vec<&[T]> = inputs.iter().map(|&i| val(i)).collect();
            let needs: Vec<bool> = inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let out = op.backward(&vals, &node.value, g, &needs);
            assert_eq!(out.len(), inputs.len(), "{}: wrong gradient count", op.name());
            for (&i, gi) in inputs.iter().zip(out) {
                if let Some(gi) = gi {
                    assert_eq!(gi.len(), nodes[i].value.len(), "{}: gradient length", op.name());
                    add_into(grads, nodes, i, &gi);
                }
            }
        }
    }
}

fn unary<T: Scalar>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    x: usize,
    g: &[T],
    deriv: impl Fn(T, T) -> T,
    out: &[T],
) {
    let xs = nodes[x].value.as_slice();
    if let Some(gx) = slot(grads, nodes, x) {
        for (((d, &s), &xv), &y) in gx.iter_mut().zip(g).zip(xs).zip(out) {
            *d += s * deriv(xv, y);
        }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.g
    }

    pub fn shape(&self) -> Vec<usize> {
        self.g.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.g.nodes.borrow()[self.id].value.len()
    }

    pub fn cols(&self) -> usize {
        last_dim(&self.g.nodes.borrow()[self.id].shape)
    }

    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn value(&self) -> Vec<T> {
        self.g.nodes.borrow()[self.id].value.clone()
    }

    pub fn tensor(&self) -> Tensor<T> {
        let nodes = self.g.nodes.borrow();
        Tensor::from_vec(&nodes[self.id].shape, nodes[self.id].value.clone())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let nodes = self.g.nodes.borrow();
        assert_eq!(nodes[self.id].value.len(), 1, "item() on shape {:?}", nodes[self.id].shape);
        nodes[self.id].value[0]
    }

    /// Reads a value row without cloning the whole tensor.
    pub fn row(&self, r: usize) -> Vec<T> {
        let nodes = self.g.nodes.borrow();
        let c = last_dim(&nodes[self.id].shape);
        nodes[self.id].value[r * c..(r + 1) * c].to_vec()
    }

    fn map(self, op: impl FnOnce(usize) -> Op<T>, f: impl Fn(T) -> T) -> Var<'g, T> {
        let (shape, value) = {
            let nodes = self.g.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&v| f(v)).collect())
        };
        let rg = self.g.rg(&[self.id]);
        self.g.push(shape, value, op(self.id), rg)
    }

    fn zip(self, other: Var<'g, T>, name: &str, op: impl FnOnce(usize, usize) -> Op<T>, f: impl Fn(T, T) -> T) -> Var<'g, T> {
        let (shape, value) = {
            let nodes = self.g.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            assert_eq!(a.shape, b.shape, "{name}: incompatible shapes {:?} and {:?}", a.shape, b.shape);
            (a.shape.clone(), a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect())
        };
        let rg = self.g.rg(&[self.id, other.id]);
        self.g.push(shape, value, op(self.id, other.id), rg)
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(self, other: Var<'g, T>) -> Var<'g, T> {
        let (shape, value) = {
            let nodes = self.g.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (m, k, n) = matmul_dims(&a.shape, &b.shape).unwrap_or_else(|e| panic!("{e}"));
            let mut out = vec![T::zero(); m * n];
            T::gemm(m, k, n, &a.value, false, &b.value, false, &mut out, false);
            (vec![m, n], out)
        };
        let rg = self.g.rg(&[self.id, other.id]);
        self.g.push(shape, value, Op::MatMul(self.id, other.id), rg)
    }

    /// Adds a vector to every row.
    pub fn add_row(self, b: Var<'g, T>) -> Var<'g, T> {
        self.row_op(b, "add_row", Op::AddRow, |x, y| x + y)
    }

    /// Multiplies every row elementwise by a vector.
    pub fn mul_row(self, w: Var<'g, T>) -> Var<'g, T> {
        self.row_op(w, "mul_row", Op::MulRow, |x, y| x * y)
    }

    fn row_op(
        self,
        b: Var<'g, T>,
        name: &str,
        op: impl FnOnce(usize, usize) -> Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Var<'g, T> {
        let (shape, value) = {
            let nodes = self.g.nodes.borrow();
            let (x, bv) = (&nodes[self.id], &nodes[b.id]);
            let n = last_dim(&x.shape);
            assert_eq!(bv.value.len(), n, "{name}: incompatible shapes {:?} and {:?}", x.shape, bv.shape);
            let mut out = x.value.clone();
            for row in out.chunks_mut(n) {
                for (o, &v) in row.iter_mut().zip(&bv.value) {
                    *o = f(*o, v);
                }
            }
            (x.shape.clone(), out)
        };
        let rg = self.g.rg(&[self.id, b.id]);
        self.g.push(shape, value, op(self.id, b.id), rg)
    }

    pub fn scale(self, c: f64) -> Var<'g, T> {
        let c = T::from_f64_lossy(c);
        self.map(|x| Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g, T> {
        let c = T::from_f64_lossy(c);
        self.map(Op::AddScalar, |v| v + c)
    }

    pub fn relu(self) -> Var<'g, T> {
        self.map(Op::Relu, |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn silu(self) -> Var<'g, T> {
        self.map(Op::Silu, kernels::silu)
    }

    pub fn softplus(self) -> Var<'g, T> {
        self.map(Op::Softplus, kernels::softplus)
    }

    pub fn exp(self) -> Var<'g, T> {
        self.map(Op::Exp, |v| v.exp())
    }

    /// Elementwise clamp; gradient passes only inside `[lo, hi]`.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g, T> {
        let (lo, hi) = (T::from_f64_lossy(lo), T::from_f64_lossy(hi));
        self.map(|x| Op::Clamp(x, lo, hi), |v| v.max(lo).min(hi))
    }

    pub fn sum(self) -> Var<'g, T> {
        let value = self.g.nodes.borrow()[self.id].value.iter().copied().sum();
        let rg = self.g.rg(&[self.id]);
        self.g.push(vec![1], vec![value], Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Var<'g, T> {
        let value = {
            let nodes = self.g.nodes.borrow();
            let v = &nodes[self.id].value;
            v.iter().copied().sum::<T>() / T::from_usize(v.len()).unwrap()
        };
        let rg = self.g.rg(&[self.id]);
        self.g.push(vec![1], vec![value], Op::Mean(self.id), rg)
    }

    /// Softmax over the last dimension.
    pub fn softmax(self) -> Var<'g, T> {
        let (shape, value) = {
            let nodes = self.g.nodes.borrow();
            let n = &nodes[self.id];
            let mut out = n.value.clone();
            kernels::softmax_rows(&mut out, last_dim(&n.shape));
            (n.shape.clone(), out)
        };
        let rg = self.g.rg(&[self.id]);
        self.g.push(shape, value, Op::Softmax(self.id), rg)
    }

    /// Layer normalization over the last dimension (`eps = 1e-5`).
    pub fn layer_norm(self, gain: Var<'g, T>, bias: Var<'g, T>) -> Var<'g, T> {
        let (shape, value, stats) = {
            let nodes = self.g.nodes.borrow();
            let x = &nodes[self.id];
            let d = last_dim(&x.shape);
            assert!(
                nodes[gain.id].value.len() == d && nodes[bias.id].value.len() == d,
                "layer_norm: incompatible shapes {:?} and {:?}",
                x.shape,
                nodes[gain.id].shape
            );
            let (out, stats) =
                kernels::layer_norm_forward(&x.value, &nodes[gain.id].value, &nodes[bias.id].value, d, kernels::LN_EPS);
            (x.shape.clone(), out, stats)
        };
        let rg = self.g.rg(&[self.id, gain.id, bias.id]);
        let stats = if self.g.record { stats } else { Vec::new() };
        self.g.push(
            shape,
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                stats,
            },
            rg,
        )
    }

    /// Mean cross-entropy of row-wise logits against class targets.
    /// Rows with a `None` target are ignored.
    pub fn cross_entropy(self, targets: &[Option<usize>]) -> Var<'g, T> {
        let (loss, probs, count) = {
            let nodes = self.g.nodes.borrow();
            let x = &nodes[self.id];
            let cols = last_dim(&x.shape);
            assert_eq!(x.value.len() / cols, targets.len(), "cross_entropy: one target per row");
            let mut probs = x.value.clone();
            kernels::softmax_rows(&mut probs, cols);
            let mut loss = T::zero();
            let mut count = 0usize;
            for (r, t) in targets.iter().enumerate() {
                let Some(t) = *t else { continue };
                assert!(t < cols, "cross_entropy: target {t} out of {cols} classes");
                let row = &x.value[r * cols..(r + 1) * cols];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
                loss += lse - row[t];
                count += 1;
            }
            (loss / T::from_usize(count.max(1)).unwrap(), probs, count)
        };
        let rg = self.g.rg(&[self.id]);
        self.g.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let value = {
            let nodes = self.g.nodes.borrow();
            let n = &nodes[self.id];
            assert_eq!(
                shape.iter().product::<usize>(),
                n.value.len(),
                "reshape: incompatible shapes {:?} and {:?}",
                n.shape,
                shape
            );
            n.value.clone()
        };
        let rg = self.g.rg(&[self.id]);
        self.g.push(shape.to_vec(), value, Op::Reshape(self.id), rg)
    }

    /// Columns `start..start + len` of a 2-D value.
    pub fn slice_cols(self, start: usize, len: usize) -> Var<'g, T> {
        let (rows, value) = {
            let nodes = self.g.nodes.borrow();
            let n = &nodes[self.id];
            let cols = last_dim(&n.shape);
            assert!(start + len <= cols && len > 0, "slice_cols {start}+{len} of {:?}", n.shape);
            let rows = n.value.len() / cols;
            let mut out = Vec::with_capacity(rows * len);
            for r in 0..rows {
                out.extend_from_slice(&n.value[r * cols + start..r * cols + start + len]);
            }
            (rows, out)
        };
        let rg = self.g.rg(&[self.id]);
        self.g.push(vec![rows, len], value, Op::SliceCols { x: self.id, start }, rg)
    }

    /// Rows `idx[i]` of a 2-D value, in order (indices may repeat).
    pub fn gather_rows(self, idx: &[usize]) -> Var<'g, T> {
        assert!(!idx.is_empty(), "gather_rows with no indices");
        let (cols, value) = {
            let nodes = self.g.nodes.borrow();
            let n = &nodes[self.id];
            let cols = last_dim(&n.shape);
            let rows = n.value.len() / cols;
            let mut out = Vec::with_capacity(idx.len() * cols);
            for &i in idx {
                assert!(i < rows, "gather_rows: index {i} out of {rows} rows");
                out.extend_from_slice(&n.value[i * cols..(i + 1) * cols]);
            }
            (cols, out)
        };
        let rg = self.g.rg(&[self.id]);
        self.g.push(
            vec![idx.len(), cols],
            value,
            Op::GatherRows {
                x: self.id,
                idx: idx.to_vec(),
            },
            rg,
        )
    }
}

impl<'g, T: Scalar> Add for Var<'g, T> {
    type Output = Var<'g, T>;
    fn add(self, rhs: Self) -> Self::Output {
        self.zip(rhs, "add", Op::Add, |a, b| a + b)
    }
}

impl<'g, T: Scalar> Sub for Var<'g, T> {
    type Output = Var<'g, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        self.zip(rhs, "sub", Op::Sub, |a, b| a - b)
    }
}

impl<'g, T: Scalar> Mul for Var<'g, T> {
    type Output = Var<'g, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        self.zip(rhs, "mul", Op::Mul, |a, b| a * b)
    }
}

impl<'g, T: Scalar> Neg for Var<'g, T> {
    type Output = Var<'g, T>;
    fn neg(self) -> Self::Output {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let g = Graph::<f32>::new();
        let x = g.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]));
        let loss = (x * x).sum();
        let grads = g.backward(loss);
        assert_eq!(grads.wrt(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn disconnected_param_keeps_zero_grad() {
        let mut store = ParamStore::<f32>::new();
        let used = store.add("used", Tensor::full(&[2], 1.5), true);
        let unused = store.add("unused", Tensor::full(&[2], 1.0), true);
        let g = Graph::new();
        let u = g.param(&store, used);
        let _ = g.param(&store, unused);
        let loss = (u * u).sum();
        g.backward(loss).accumulate_into(&mut store);
        assert_eq!(store.get(unused).grad.as_deref(), Some(&[0.0, 0.0][..]));
        assert_eq!(store.get(used).grad.as_deref(), Some(&[3.0, 3.0][..]));
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("p", Tensor::full(&[1], 2.0), true);
        for _ in 0..2 {
            let g = Graph::new();
            let v = g.param(&store, p);
            g.backward((v * v).sum()).accumulate_into(&mut store);
        }
        assert_eq!(store.get(p).grad.as_deref(), Some(&[8.0][..]));
        store.zero_grad();
        assert_eq!(store.get(p).grad.as_deref(), Some(&[0.0][..]));
    }

    #[test]
    fn frozen_param_gets_no_grad() {
        let mut store = ParamStore::<f32>::new();
        let p = store.add("frozen", Tensor::full(&[2], 1.0), false);
        let g = Graph::new();
        let v = g.param(&store, p);
        let x = g.leaf(Tensor::full(&[2], 3.0));
        let loss = (v * x).sum();
        let grads = g.backward(loss);
        grads.accumulate_into(&mut store);
        assert!(store.get(p).grad.is_none());
        assert_eq!(grads.wrt(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn non_scalar_loss_is_rejected() {
        let g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full(&[2], 1.0));
        g.backward(x * x);
    }

    #[test]
    #[should_panic(expected = "[2, 3]")]
    fn matmul_shape_mismatch_panics_with_shapes() {
        let g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let _ = a.matmul(b);
    }

    #[test]
    fn cross_entropy_limits() {
        let g = Graph::<f64>::new();
        let uniform = g.leaf(Tensor::zeros(&[3, 5]));
        let loss = uniform.cross_entropy(&[Some(0), Some(4), Some(2)]);
        assert!((loss.item() - 5f64.ln()).abs() < 1e-12);

        let mut confident = vec![-1e3; 10];
        confident[1] = 1e3;
        confident[5 + 3] = 1e3;
        let x = g.leaf(Tensor::from_vec(&[2, 5], confident));
        let loss = x.cross_entropy(&[Some(1), Some(3)]);
        assert!(loss.item().abs() < 1e-12);
    }

    #[test]
    fn inference_graph_records_nothing() {
        let g = Graph::<f32>::inference();
        let x = g.leaf(Tensor::full(&[2], 1.0));
        let y = (x * x).sum();
        assert_eq!(y.item(), 2.0);
        assert!(!g.is_recording());
    }
}
