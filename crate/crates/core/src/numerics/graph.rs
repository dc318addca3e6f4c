use std::cell::{Ref, RefCell};
use std::rc::Rc;

use rand::Rng;

use super::kernels;
use super::tensor::numel;
use super::{NumericsError, Tensor};

type Result<T> = std::result::Result<T, NumericsError>;

/// Layer-norm epsilon used throughout the encoder.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf {
        key: Option<usize>,
    },
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        b_batch: usize,
        dims: (usize, usize, usize),
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    Permute {
        a: usize,
        axes: Vec<usize>,
    },
    Reshape {
        a: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    TakeAlongLast {
        a: usize,
        index: Rc<[usize]>,
        rows: usize,
        cols_in: usize,
        cols_out: usize,
    },
    Softmax {
        a: usize,
    },
    LogSoftmax {
        a: usize,
    },
    LayerNorm {
        a: usize,
        inv_std: Vec<f64>,
    },
    Gelu {
        a: usize,
    },
    Tanh {
        a: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        count: usize,
    },
    Dropout {
        a: usize,
        mask: Vec<f64>,
    },
    MaskedFill {
        a: usize,
        mask: Vec<bool>,
    },
    Sum {
        a: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of evaluated operations. Node ids are assigned in
/// evaluation order, so every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    keys: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradients of keyed leaves as `(key, grad)`; a key bound more than once
    /// appears once per binding.
    pub fn keyed(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.keys
            .iter()
            .filter_map(|&(key, id)| self.grads[id].as_deref().map(|g| (key, g)))
    }

    /// Adds the gradient of `var` into `tensor`'s gradient buffer.
    pub fn accumulate_into(&self, var: Var<'_>, tensor: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => tensor.accumulate_grad(&vec![0.0; tensor.numel()]),
        }
    }
}

fn suffix_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long[long.len() - short.len()..] == *short {
        Ok(long.to_vec())
    } else {
        Err(NumericsError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Inserts `tensor` as a leaf; it is differentiable iff `requires_grad`.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf { key: None },
            tensor.requires_grad(),
        )
    }

    /// Inserts a non-differentiable constant.
    pub fn constant(&self, tensor: &Tensor) -> Var<'_> {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf { key: None },
            false,
        )
    }

    /// Inserts a differentiable leaf tagged with `key`, reported by
    /// [`Gradients::keyed`].
    pub fn keyed_leaf(&self, key: usize, tensor: &Tensor) -> Var<'_> {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf { key: Some(key) },
            true,
        )
    }

    pub fn from_vec(&self, shape: &[usize], data: Vec<f64>) -> Result<Var<'_>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let shape = &nodes[loss.id].shape;
        if numel(shape) != 1 {
            return Err(NumericsError::NonScalarLoss(shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let keys = nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| match n.op {
                Op::Leaf { key: Some(k) } => Some((k, id)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, keys })
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut [f64]> {
    if !nodes[id].needs_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(
        grads[id]
            .get_or_insert_with(|| vec![0.0; len])
            .as_mut_slice(),
    )
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf { .. } => {}
        &Op::MatMul {
            a,
            b,
            batch,
            b_batch,
            dims,
        } => {
            if let Some(ga) = acc(grads, nodes, a) {
                kernels::matmul_grad_a(g, &nodes[b].value, ga, batch, b_batch, dims);
            }
            if let Some(gb) = acc(grads, nodes, b) {
                kernels::matmul_grad_b(&nodes[a].value, g, gb, batch, b_batch, dims);
            }
        }
        &Op::Add { a, b } | &Op::Sub { a, b } => {
            let sign = if matches!(node.op, Op::Sub { .. }) {
                -1.0
            } else {
                1.0
            };
            for (id, s) in [(a, 1.0), (b, sign)] {
                if let Some(gi) = acc(grads, nodes, id) {
                    let n = gi.len();
                    for (i, gv) in g.iter().enumerate() {
                        gi[i % n] += s * gv;
                    }
                }
            }
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (na, nb) = (av.len(), bv.len());
            if let Some(ga) = acc(grads, nodes, a) {
                for (i, gv) in g.iter().enumerate() {
                    ga[i % na] += gv * bv[i % nb];
                }
            }
            if let Some(gb) = acc(grads, nodes, b) {
                for (i, gv) in g.iter().enumerate() {
                    gb[i % nb] += gv * av[i % na];
                }
            }
        }
        &Op::Scale { a, factor } => {
            if let Some(ga) = acc(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, gv)| *x += factor * gv);
            }
        }
        Op::Permute { a, axes } => {
            if let Some(ga) = acc(grads, nodes, *a) {
                let inv = kernels::inverse_permutation(axes);
                let back = kernels::permute(g, &node.shape, &inv);
                ga.iter_mut().zip(back).for_each(|(x, v)| *x += v);
            }
        }
        &Op::Reshape { a } => {
            if let Some(ga) = acc(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, v)| *x += v);
            }
        }
        Op::Concat { parts, axis } => {
            let outer: usize = node.shape[..*axis].iter().product();
            let inner: usize = node.shape[axis + 1..].iter().product();
            let total = node.shape[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let width = nodes[p].shape[*axis] * inner;
                if let Some(gp) = acc(grads, nodes, p) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + width];
                        gp[o * width..(o + 1) * width]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, v)| *x += v);
                    }
                }
                offset += width;
            }
        }
        &Op::Slice { a, axis, start } => {
            let in_shape = &nodes[a].shape;
            let outer: usize = in_shape[..axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let in_width = in_shape[axis] * inner;
            let width = node.shape[axis] * inner;
            if let Some(ga) = acc(grads, nodes, a) {
                for o in 0..outer {
                    let dst =
                        &mut ga[o * in_width + start * inner..o * in_width + start * inner + width];
                    dst.iter_mut()
                        .zip(&g[o * width..(o + 1) * width])
                        .for_each(|(x, v)| *x += v);
                }
            }
        }
        Op::Gather { table, ids } => {
            let d = nodes[*table].shape[1];
            if let Some(gt) = acc(grads, nodes, *table) {
                for (row, &id) in ids.iter().enumerate() {
                    gt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g[row * d..(row + 1) * d])
                        .for_each(|(x, v)| *x += v);
                }
            }
        }
        Op::TakeAlongLast {
            a,
            index,
            rows,
            cols_in,
            cols_out,
        } => {
            if let Some(ga) = acc(grads, nodes, *a) {
                let blocks = g.len() / (rows * cols_out);
                for blk in 0..blocks {
                    for r in 0..*rows {
                        let src = (blk * rows + r) * cols_in;
                        let dst = (blk * rows + r) * cols_out;
                        for c in 0..*cols_out {
                            ga[src + index[r * cols_out + c]] += g[dst + c];
                        }
                    }
                }
            }
        }
        &Op::Softmax { a } => {
            let n = *node.shape.last().unwrap_or(&1);
            if let Some(ga) = acc(grads, nodes, a) {
                for ((y, gr), gar) in node.value.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((x, &yv), &gv) in gar.iter_mut().zip(y).zip(gr) {
                        *x += yv * (gv - dot);
                    }
                }
            }
        }
        &Op::LogSoftmax { a } => {
            let n = *node.shape.last().unwrap_or(&1);
            if let Some(ga) = acc(grads, nodes, a) {
                for ((y, gr), gar) in node.value.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                    let total: f64 = gr.iter().sum();
                    for ((x, &yv), &gv) in gar.iter_mut().zip(y).zip(gr) {
                        *x += gv - yv.exp() * total;
                    }
                }
            }
        }
        Op::LayerNorm { a, inv_std } => {
            let n = *node.shape.last().unwrap_or(&1);
            let nf = n as f64;
            if let Some(ga) = acc(grads, nodes, *a) {
                for (((y, gr), gar), &inv) in node
                    .value
                    .chunks(n)
                    .zip(g.chunks(n))
                    .zip(ga.chunks_mut(n))
                    .zip(inv_std.iter())
                {
                    let sum_g: f64 = gr.iter().sum();
                    let sum_gy: f64 = gr.iter().zip(y).map(|(g, y)| g * y).sum();
                    for ((x, &yv), &gv) in gar.iter_mut().zip(y).zip(gr) {
                        *x += inv * (gv - sum_g / nf - yv * sum_gy / nf);
                    }
                }
            }
        }
        &Op::Gelu { a } => {
            let xs = &nodes[a].value;
            if let Some(ga) = acc(grads, nodes, a) {
                for ((x, &xv), &gv) in ga.iter_mut().zip(xs).zip(g) {
                    *x += gv * kernels::gelu_grad(xv);
                }
            }
        }
        &Op::Tanh { a } => {
            if let Some(ga) = acc(grads, nodes, a) {
                for ((x, &yv), &gv) in ga.iter_mut().zip(&node.value).zip(g) {
                    *x += gv * (1.0 - yv * yv);
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            count,
        } => {
            let v = nodes[*logits].shape[1];
            let scale = g[0] / *count as f64;
            let lv = &nodes[*logits].value;
            if let Some(gl) = acc(grads, nodes, *logits) {
                for (row, target) in targets.iter().enumerate() {
                    let Some(t) = target else { continue };
                    let probs = kernels::softmax_rows(&lv[row * v..(row + 1) * v], v);
                    let gr = &mut gl[row * v..(row + 1) * v];
                    for (j, p) in probs.iter().enumerate() {
                        gr[j] += scale * (p - if j == *t { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        Op::Dropout { a, mask } => {
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((x, m), gv) in ga.iter_mut().zip(mask).zip(g) {
                    *x += m * gv;
                }
            }
        }
        Op::MaskedFill { a, mask } => {
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((x, &m), gv) in ga.iter_mut().zip(mask).zip(g) {
                    if !m {
                        *x += gv;
                    }
                }
            }
        }
        &Op::Sum { a } => {
            if let Some(ga) = acc(grads, nodes, a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    fn node(&self) -> Ref<'g, Node> {
        Ref::map(self.graph.nodes.borrow(), |n| &n[self.id])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().shape.clone()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node().value.clone()
    }

    /// Value of a single-element node.
    pub fn item(&self) -> f64 {
        self.node().value[0]
    }

    pub fn value(&self) -> Tensor {
        let node = self.node();
        Tensor::new(&node.shape, node.value.clone()).expect("graph node shape is valid")
    }

    fn needs_grad(&self) -> bool {
        self.node().needs_grad
    }

    fn same_graph(&self, other: &Var<'_>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(NumericsError::Invalid {
                op,
                msg: "operands belong to different graphs".into(),
            })
        }
    }

    fn unary(self, op: Op, shape: Vec<usize>, value: Vec<f64>) -> Var<'g> {
        let needs = self.needs_grad();
        self.graph.push(shape, value, op, needs)
    }

    /// Batched matrix product over the last two axes. The right operand's
    /// leading axes must be a suffix of the left operand's, and are broadcast.
    pub fn matmul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&rhs, "matmul")?;
        let (sa, sb) = (self.shape(), rhs.shape());
        let err = || NumericsError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 || sb.len() > sa.len() {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        if k != k2 || batch_a[batch_a.len() - batch_b.len()..] != *batch_b {
            return Err(err());
        }
        let batch: usize = batch_a.iter().product();
        let b_batch: usize = batch_b.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let nodes = self.graph.nodes.borrow();
            kernels::matmul_acc(
                &nodes[self.id].value,
                &nodes[rhs.id].value,
                &mut out,
                batch,
                b_batch,
                (m, k, n),
            );
        }
        let mut shape = batch_a.to_vec();
        shape.extend([m, n]);
        let needs = self.needs_grad() || rhs.needs_grad();
        Ok(self.graph.push(
            shape,
            out,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                batch,
                b_batch,
                dims: (m, k, n),
            },
            needs,
        ))
    }

    fn binary(self, rhs: Var<'g>, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Var<'g>> {
        self.same_graph(&rhs, name)?;
        let shape = suffix_broadcast(name, &self.shape(), &rhs.shape())?;
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
            (0..numel(&shape))
                .map(|i| f(a[i % a.len()], b[i % b.len()]))
                .collect()
        };
        let op = match name {
            "add" => Op::Add {
                a: self.id,
                b: rhs.id,
            },
            "sub" => Op::Sub {
                a: self.id,
                b: rhs.id,
            },
            _ => Op::Mul {
                a: self.id,
                b: rhs.id,
            },
        };
        let needs = self.needs_grad() || rhs.needs_grad();
        Ok(self.graph.push(shape, value, op, needs))
    }

    /// Elementwise sum; the smaller operand's shape must be a suffix of the
    /// larger's and is broadcast over the leading axes.
    pub fn add(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.binary(rhs, "add", |a, b| a + b)
    }

    pub fn sub(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.binary(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.binary(rhs, "mul", |a, b| a * b)
    }

    pub fn scale(self, factor: f64) -> Var<'g> {
        let value = self.node().value.iter().map(|v| v * factor).collect();
        let shape = self.shape();
        self.unary(Op::Scale { a: self.id, factor }, shape, value)
    }

    pub fn div_scalar(self, divisor: f64) -> Result<Var<'g>> {
        if divisor == 0.0 || !divisor.is_finite() {
            return Err(NumericsError::Invalid {
                op: "div_scalar",
                msg: format!("divisor {divisor}"),
            });
        }
        Ok(self.scale(1.0 / divisor))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'g>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes
                .iter()
                .all(|&a| a < shape.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(NumericsError::ShapeMismatch {
                op: "permute",
                lhs: shape,
                rhs: axes.to_vec(),
            });
        }
        let value = kernels::permute(&self.node().value, &shape, axes);
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        Ok(self.unary(
            Op::Permute {
                a: self.id,
                axes: axes.to_vec(),
            },
            out_shape,
            value,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'g>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "transpose",
                lhs: self.shape(),
                rhs: vec![],
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let current = self.shape();
        if numel(shape) != numel(&current) || shape.contains(&0) {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                lhs: current,
                rhs: shape.to_vec(),
            });
        }
        let value = self.node().value.clone();
        Ok(self.unary(Op::Reshape { a: self.id }, shape.to_vec(), value))
    }

    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts.first().ok_or(NumericsError::Invalid {
            op: "concat",
            msg: "no operands".into(),
        })?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(NumericsError::Invalid {
                op: "concat",
                msg: format!("axis {axis} for shape {base:?}"),
            });
        }
        let mut total = 0;
        for p in parts {
            first.same_graph(p, "concat")?;
            let s = p.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s,
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut value = Vec::with_capacity(numel(&shape));
        {
            let nodes = first.graph.nodes.borrow();
            for o in 0..outer {
                for p in parts {
                    let width = nodes[p.id].shape[axis] * inner;
                    value.extend_from_slice(&nodes[p.id].value[o * width..(o + 1) * width]);
                }
            }
        }
        let needs = parts.iter().any(|p| p.needs_grad());
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(first
            .graph
            .push(shape, value, Op::Concat { parts: ids, axis }, needs))
    }

    /// Keeps `len` entries starting at `start` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(NumericsError::Invalid {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let in_width = shape[axis] * inner;
        let mut value = Vec::with_capacity(outer * len * inner);
        {
            let node = self.node();
            for o in 0..outer {
                let from = o * in_width + start * inner;
                value.extend_from_slice(&node.value[from..from + len * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.unary(
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
            out_shape,
            value,
        ))
    }

    /// Row lookup: `self` is a `[rows, d]` table, the result has shape
    /// `ids_shape ++ [d]`.
    pub fn gather_rows(self, ids: &[usize], ids_shape: &[usize]) -> Result<Var<'g>> {
        let shape = self.shape();
        if shape.len() != 2 || numel(ids_shape) != ids.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "gather_rows",
                lhs: shape,
                rhs: ids_shape.to_vec(),
            });
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(NumericsError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                size: rows,
            });
        }
        let mut value = Vec::with_capacity(ids.len() * d);
        {
            let node = self.node();
            for &i in ids {
                value.extend_from_slice(&node.value[i * d..(i + 1) * d]);
            }
        }
        let mut out_shape = ids_shape.to_vec();
        out_shape.push(d);
        Ok(self.unary(
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
            out_shape,
            value,
        ))
    }

    /// For `self: [..., rows, cols_in]` and a `rows x cols_out` index table,
    /// returns `out[..., r, c] = self[..., r, index[r][c]]`.
    pub fn take_along_last(self, index: Rc<[usize]>, cols_out: usize) -> Result<Var<'g>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "take_along_last",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (rows, cols_in) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if index.len() != rows * cols_out {
            return Err(NumericsError::ShapeMismatch {
                op: "take_along_last",
                lhs: shape,
                rhs: vec![index.len(), cols_out],
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= cols_in) {
            return Err(NumericsError::IndexOutOfRange {
                op: "take_along_last",
                index: bad,
                size: cols_in,
            });
        }
        let blocks = numel(&shape) / (rows * cols_in);
        let mut value = Vec::with_capacity(blocks * rows * cols_out);
        {
            let node = self.node();
            for blk in 0..blocks {
                for r in 0..rows {
                    let base = (blk * rows + r) * cols_in;
                    value.extend(
                        index[r * cols_out..(r + 1) * cols_out]
                            .iter()
                            .map(|&c| node.value[base + c]),
                    );
                }
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = cols_out;
        Ok(self.unary(
            Op::TakeAlongLast {
                a: self.id,
                index,
                rows,
                cols_in,
                cols_out,
            },
            out_shape,
            value,
        ))
    }

    fn last_dim(&self, op: &'static str) -> Result<usize> {
        self.shape().last().copied().ok_or(NumericsError::Invalid {
            op,
            msg: "scalar input".into(),
        })
    }

    /// Softmax over the last axis. Rows that are entirely `-inf` yield zeros.
    pub fn softmax(self) -> Result<Var<'g>> {
        let n = self.last_dim("softmax")?;
        let value = kernels::softmax_rows(&self.node().value, n);
        let shape = self.shape();
        Ok(self.unary(Op::Softmax { a: self.id }, shape, value))
    }

    pub fn log_softmax(self) -> Result<Var<'g>> {
        let n = self.last_dim("log_softmax")?;
        let value = {
            let node = self.node();
            let mut out = Vec::with_capacity(node.value.len());
            for row in node.value.chunks(n) {
                let lse = kernels::log_sum_exp(row);
                out.extend(row.iter().map(|v| v - lse));
            }
            out
        };
        let shape = self.shape();
        Ok(self.unary(Op::LogSoftmax { a: self.id }, shape, value))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(self, eps: f64) -> Result<Var<'g>> {
        let n = self.last_dim("layer_norm")?;
        let (value, inv_std) = {
            let node = self.node();
            let mut out = Vec::with_capacity(node.value.len());
            let mut inv_std = Vec::with_capacity(node.value.len() / n);
            for row in node.value.chunks(n) {
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std.push(inv);
                out.extend(row.iter().map(|v| (v - mean) * inv));
            }
            (out, inv_std)
        };
        let shape = self.shape();
        Ok(self.unary(
            Op::LayerNorm {
                a: self.id,
                inv_std,
            },
            shape,
            value,
        ))
    }

    pub fn gelu(self) -> Var<'g> {
        let value = self
            .node()
            .value
            .iter()
            .map(|&x| kernels::gelu(x))
            .collect();
        let shape = self.shape();
        self.unary(Op::Gelu { a: self.id }, shape, value)
    }

    pub fn tanh(self) -> Var<'g> {
        let value = self.node().value.iter().map(|x| x.tanh()).collect();
        let shape = self.shape();
        self.unary(Op::Tanh { a: self.id }, shape, value)
    }

    /// Mean cross-entropy of `[n, classes]` logits against per-row targets;
    /// `None` rows are ignored.
    pub fn cross_entropy(self, targets: &[Option<usize>]) -> Result<Var<'g>> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        let v = shape[1];
        let mut total = 0.0;
        let mut count = 0;
        {
            let node = self.node();
            for (row, target) in targets.iter().enumerate() {
                let Some(t) = *target else { continue };
                if t >= v {
                    return Err(NumericsError::IndexOutOfRange {
                        op: "cross_entropy",
                        index: t,
                        size: v,
                    });
                }
                let logits = &node.value[row * v..(row + 1) * v];
                total += kernels::log_sum_exp(logits) - logits[t];
                count += 1;
            }
        }
        if count == 0 {
            return Err(NumericsError::Invalid {
                op: "cross_entropy",
                msg: "no target positions".into(),
            });
        }
        Ok(self.unary(
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                count,
            },
            Vec::new(),
            vec![total / count as f64],
        ))
    }

    /// Inverted dropout: identity unless `train` and `rate > 0`.
    pub fn dropout<R: Rng + ?Sized>(self, rate: f64, train: bool, rng: &mut R) -> Result<Var<'g>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumericsError::Invalid {
                op: "dropout",
                msg: format!("rate {rate}"),
            });
        }
        if !train || rate == 0.0 {
            return Ok(self);
        }
        let keep = 1.0 - rate;
        let n = self.node().value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let value = self
            .node()
            .value
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.shape();
        Ok(self.unary(Op::Dropout { a: self.id, mask }, shape, value))
    }

    /// Replaces entries where `mask` is true with `fill`.
    pub fn masked_fill(self, mask: &[bool], fill: f64) -> Result<Var<'g>> {
        let shape = self.shape();
        if mask.len() != numel(&shape) {
            return Err(NumericsError::ShapeMismatch {
                op: "masked_fill",
                lhs: shape,
                rhs: vec![mask.len()],
            });
        }
        let value = self
            .node()
            .value
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        Ok(self.unary(
            Op::MaskedFill {
                a: self.id,
                mask: mask.to_vec(),
            },
            shape,
            value,
        ))
    }

    pub fn sum(self) -> Var<'g> {
        let total = self.node().value.iter().sum();
        self.unary(Op::Sum { a: self.id }, Vec::new(), vec![total])
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.node().value.len() as f64;
        self.sum().scale(1.0 / n)
    }
}
