//! Define-by-run reverse-mode differentiation over the tensor op set.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order. `backward` walks it in reverse and sums fan-out
//! contributions in that fixed order. `replay` re-evaluates every op from the
//! current leaf values, which is what the finite-difference oracle uses; it
//! never touches the backward rules.

use std::collections::BTreeMap;
use std::rc::Rc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{self, flops, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddCol,
    AddRow,
    BroadcastRows,
    RowMean,
    SoftmaxRows,
    Sum,
    Relu,
    Conv3x3,
    CrossEntropy,
    ScaleRows,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddCol {
        m: NodeId,
        v: NodeId,
        sign: f64,
    },
    AddRow {
        m: NodeId,
        v: NodeId,
    },
    BroadcastRows {
        v: NodeId,
        n: usize,
    },
    RowMean(NodeId),
    SoftmaxRows(NodeId),
    Sum(NodeId),
    Relu(NodeId),
    Conv3x3 {
        x: NodeId,
        k: NodeId,
        h: usize,
        w: usize,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Rc<[usize]>,
    },
    /// Rows scaled by constants that do not take part in differentiation.
    ScaleRows {
        a: NodeId,
        factors: Rc<[f64]>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddCol { .. } => OpKind::AddCol,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::BroadcastRows { .. } => OpKind::BroadcastRows,
            Op::RowMean(_) => OpKind::RowMean,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::Sum(_) => OpKind::Sum,
            Op::Relu(_) => OpKind::Relu,
            Op::Conv3x3 { .. } => OpKind::Conv3x3,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::ScaleRows { .. } => OpKind::ScaleRows,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    name: Option<String>,
    trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<(OpKind, f64)>,
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

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            name: None,
            trainable: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: Op) -> Result<NodeId> {
        let value = self.eval(&op)?;
        Ok(self.push(op, value))
    }

    /// Trainable named leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, value);
        self.nodes[id.0].name = Some(name.into());
        self.nodes[id.0].trainable = true;
        id
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn name(&self, id: NodeId) -> Option<&str> {
        self.nodes[id.0].name.as_deref()
    }

    /// Trainable leaves in creation order.
    pub fn params(&self) -> Vec<(NodeId, &str)> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.trainable)
            .map(|(i, n)| (NodeId(i), n.name.as_deref().unwrap_or("")))
            .collect()
    }

    pub fn set_leaf(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Invalid(format!("node {} is not a leaf", id.0)));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::shape("set_leaf", node.value.shape(), value.shape()));
        }
        node.value = value;
        Ok(())
    }

    /// Makes `backward` multiply every gradient produced by ops of `kind` by
    /// `factor`. Only meant for negative controls of the gradient checker.
    pub fn inject_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> Result<NodeId> {
        self.push_op(Op::MatMul { a, b, ta, tb })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_op(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_op(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_op(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.push_op(Op::Scale(a, s))
    }

    /// `m` plus a `[r, 1]` column broadcast along rows.
    pub fn add_col(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        self.push_op(Op::AddCol { m, v, sign: 1.0 })
    }

    /// `m` minus a `[r, 1]` column broadcast along rows.
    pub fn sub_col(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        self.push_op(Op::AddCol { m, v, sign: -1.0 })
    }

    /// `m` plus a `[1, c]` row broadcast down the columns.
    pub fn add_row(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        self.push_op(Op::AddRow { m, v })
    }

    pub fn broadcast_rows(&mut self, v: NodeId, n: usize) -> Result<NodeId> {
        self.push_op(Op::BroadcastRows { v, n })
    }

    pub fn row_mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push_op(Op::RowMean(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push_op(Op::SoftmaxRows(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push_op(Op::Sum(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push_op(Op::Relu(a))
    }

    pub fn conv3x3(&mut self, x: NodeId, k: NodeId, h: usize, w: usize) -> Result<NodeId> {
        self.push_op(Op::Conv3x3 { x, k, h, w })
    }

    /// Mean pixelwise cross-entropy of `[K, P]` logits against `P` labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.push_op(Op::CrossEntropy {
            logits,
            labels: labels.into(),
        })
    }

    pub fn scale_rows(&mut self, a: NodeId, factors: Vec<f64>) -> Result<NodeId> {
        self.push_op(Op::ScaleRows {
            a,
            factors: factors.into(),
        })
    }

    /// `0.5 · Σ a²`.
    pub fn half_sum_squares(&mut self, a: NodeId) -> Result<NodeId> {
        let sq = self.mul(a, a)?;
        let s = self.sum(sq)?;
        self.scale(s, 0.5)
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        match op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::MatMul { a, b, ta, tb } => tensor::matmul_t(v(a), *ta, v(b), *tb),
            Op::Add(a, b) => tensor::add(v(a), v(b)),
            Op::Sub(a, b) => tensor::sub(v(a), v(b)),
            Op::Mul(a, b) => tensor::mul(v(a), v(b)),
            Op::Scale(a, s) => tensor::scale(v(a), *s),
            Op::AddCol { m, v: c, sign } => tensor::add_col(v(m), v(c), *sign),
            Op::AddRow { m, v: r } => tensor::add_row(v(m), v(r)),
            Op::BroadcastRows { v: r, n } => tensor::broadcast_rows(v(r), *n),
            Op::RowMean(a) => tensor::row_means(v(a)),
            Op::SoftmaxRows(a) => tensor::softmax_rows(v(a)),
            Op::Sum(a) => Tensor::new(vec![1], vec![v(a).sum_all()]),
            Op::Relu(a) => tensor::relu(v(a)),
            Op::Conv3x3 { x, k, h, w } => tensor::conv3x3_mat(v(x), v(k), *h, *w),
            Op::CrossEntropy { logits, labels } => {
                let (loss, _) = tensor::cross_entropy_columns(v(logits), labels)?;
                Ok(Tensor::scalar(loss))
            }
            Op::ScaleRows { a, factors } => {
                let t = v(a);
                let (r, c) = t.dims2()?;
                if factors.len() != r {
                    return Err(Error::shape("scale_rows", t.shape(), &[factors.len()]));
                }
                let data = t
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(idx, x)| x * factors[idx / c])
                    .collect();
                Tensor::new(t.shape().to_vec(), data)
            }
        }
    }

    /// Re-evaluates every non-leaf node from the current leaf values.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.nodes[i].value = self.eval(&op)?;
        }
        Ok(())
    }

    /// Reverse-mode gradients of the scalar node `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Invalid(format!(
                "loss must be scalar, node {} has shape {:?}",
                loss.0,
                self.nodes[loss.0].value.shape()
            )));
        }
        flops::paused(|| self.backward_inner(loss))
    }

    fn backward_inner(&self, loss: NodeId) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(self.nodes[loss.0].value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut contribs = self.rule(&node.op, &node.value, &g)?;
            if let Some((kind, factor)) = self.fault {
                if kind == node.op.kind() {
                    for (_, t) in &mut contribs {
                        *t = tensor::scale(t, factor)?;
                    }
                }
            }
            for (id, t) in contribs {
                accumulate(&mut grads[id.0], t)?;
            }
            grads[i] = Some(g);
        }
        let mut named = BTreeMap::new();
        let mut detached = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.trainable {
                continue;
            }
            let name = node.name.clone().unwrap_or_else(|| format!("node{i}"));
            if grads[i].is_none() {
                detached.push(name.clone());
            }
            let g = grads[i]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            named.insert(name, g);
        }
        Ok(Gradients {
            grads,
            named,
            detached,
        })
    }

    fn rule(&self, op: &Op, out: &Tensor, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        Ok(match op {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (v(a), v(b));
                let ga = if *ta {
                    tensor::matmul_t(bv, *tb, g, true)?
                } else {
                    tensor::matmul_t(g, false, bv, !*tb)?
                };
                let gb = if *tb {
                    tensor::matmul_t(g, true, av, *ta)?
                } else {
                    tensor::matmul_t(av, !*ta, g, false)?
                };
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, tensor::scale(g, -1.0)?)],
            Op::Mul(a, b) => vec![(*a, tensor::mul(g, v(b))?), (*b, tensor::mul(g, v(a))?)],
            Op::Scale(a, s) => vec![(*a, tensor::scale(g, *s)?)],
            Op::AddCol { m, v: c, sign } => {
                let gv = tensor::scale(&tensor::row_sums(g)?, *sign)?.reshape(v(c).shape())?;
                vec![(*m, g.clone()), (*c, gv)]
            }
            Op::AddRow { m, v: r } => {
                vec![
                    (*m, g.clone()),
                    (*r, tensor::col_sums(g)?.reshape(v(r).shape())?),
                ]
            }
            Op::BroadcastRows { v: r, .. } => {
                vec![(*r, tensor::col_sums(g)?.reshape(v(r).shape())?)]
            }
            Op::RowMean(a) => {
                let (r, c) = v(a).dims2()?;
                let data = (0..r * c).map(|idx| g.data()[idx / c] / c as f64).collect();
                vec![(*a, Tensor::new(v(a).shape().to_vec(), data)?)]
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = out.dims2()?;
                let mut dz = vec![0.0; r * c];
                for i in 0..r {
                    let p = &out.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = p.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        dz[i * c + j] = p[j] * (gr[j] - dot);
                    }
                }
                vec![(*a, Tensor::new(out.shape().to_vec(), dz)?)]
            }
            Op::Sum(a) => vec![(*a, Tensor::filled(v(a).shape(), g.data()[0]))],
            Op::Relu(a) => {
                let data = v(a)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gy)| if x > 0.0 { gy } else { 0.0 })
                    .collect();
                vec![(*a, Tensor::new(v(a).shape().to_vec(), data)?)]
            }
            Op::Conv3x3 { x, k, h, w } => {
                let gx = tensor::conv3x3_grad_input(g, v(k), *h, *w)?;
                let gk = tensor::conv3x3_grad_kernel(g, v(x), v(k).shape(), *h, *w)?;
                vec![(*x, gx), (*k, gk)]
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = v(logits);
                let (_, probs) = tensor::cross_entropy_columns(lv, labels)?;
                let (_, p) = lv.dims2()?;
                let s = g.data()[0] / p as f64;
                let mut d = probs.into_data();
                for (px, &lab) in labels.iter().enumerate() {
                    d[lab * p + px] -= 1.0;
                }
                for x in &mut d {
                    *x *= s;
                }
                vec![(*logits, Tensor::new(lv.shape().to_vec(), d)?)]
            }
            Op::ScaleRows { a, factors } => {
                let (_, c) = g.dims2()?;
                let data = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(idx, x)| x * factors[idx / c])
                    .collect();
                vec![(*a, Tensor::new(g.shape().to_vec(), data)?)]
            }
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) -> Result<()> {
    match slot {
        None => *slot = Some(t),
        Some(existing) => {
            if existing.shape() != t.shape() {
                return Err(Error::shape("accumulate", existing.shape(), t.shape()));
            }
            let data = existing
                .data()
                .iter()
                .zip(t.data())
                .map(|(a, b)| a + b)
                .collect();
            *existing = Tensor::new(t.shape().to_vec(), data)?;
        }
    }
    Ok(())
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    named: BTreeMap<String, Tensor>,
    detached: Vec<String>,
}

impl Gradients {
    /// Adjoint of any node reached from the loss.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient per trainable leaf name; detached leaves map to zeros.
    pub fn named(&self) -> &BTreeMap<String, Tensor> {
        &self.named
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor> {
        self.named
    }

    /// Trainable leaves the loss does not depend on.
    pub fn detached(&self) -> &[String] {
        &self.detached
    }
}

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Debug, Clone, Serialize)]
pub struct LeafCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub step: f64,
    pub tol: f64,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    /// Leaf holding the worst entry.
    pub worst_leaf: Option<String>,
    pub leaves: Vec<LeafCheck>,
    /// `(leaf, flat index)` pairs where a perturbed evaluation was non-finite.
    pub flagged: Vec<(String, usize)>,
    pub pass: bool,
}

/// Compares analytic gradients of `loss` with central differences
/// `(f(θ+h) − f(θ−h)) / 2h` for every entry of every trainable leaf.
///
/// The graph's leaf values are restored and replayed before returning.
pub fn finite_diff_check(graph: &mut Graph, loss: NodeId, h: f64, tol: f64) -> Result<CheckReport> {
    if h.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Invalid(format!("step must be positive, got {h}")));
    }
    let analytic = graph.backward(loss)?;
    let mut leaves = Vec::new();
    let mut flagged = Vec::new();
    let mut entries_checked = 0;
    let mut worst: Option<(f64, String)> = None;

    for (id, name) in graph
        .params()
        .into_iter()
        .map(|(id, n)| (id, n.to_string()))
        .collect::<Vec<_>>()
    {
        let original = graph.value(id).clone();
        let grad = analytic.named()[&name].clone();
        let mut leaf = LeafCheck {
            name: name.clone(),
            entries: original.len(),
            max_rel_error: 0.0,
            worst_index: 0,
        };
        for idx in 0..original.len() {
            let base = original.data()[idx];
            let mut eval_at = |x: f64| -> Option<f64> {
                let mut t = original.clone();
                t.set_flat(idx, x);
                graph.set_leaf(id, t).ok()?;
                graph.replay().ok()?;
                let f = graph.value(loss).data()[0];
                f.is_finite().then_some(f)
            };
            let plus = eval_at(base + h);
            let minus = eval_at(base - h);
            entries_checked += 1;
            match (plus, minus) {
                (Some(fp), Some(fm)) => {
                    let numeric = (fp - fm) / (2.0 * h);
                    let err = relative_error(grad.data()[idx], numeric);
                    if err > leaf.max_rel_error || err.is_nan() {
                        leaf.max_rel_error = err;
                        leaf.worst_index = idx;
                    }
                }
                _ => flagged.push((name.clone(), idx)),
            }
        }
        graph.set_leaf(id, original)?;
        if worst.as_ref().is_none_or(|(e, _)| leaf.max_rel_error > *e) {
            worst = Some((leaf.max_rel_error, name.clone()));
        }
        leaves.push(leaf);
    }
    graph.replay()?;

    let max_rel_error = worst.as_ref().map_or(0.0, |(e, _)| *e);
    Ok(CheckReport {
        step: h,
        tol,
        entries_checked,
        max_rel_error,
        worst_leaf: worst.map(|(_, n)| n),
        leaves,
        pass: max_rel_error <= tol && flagged.is_empty(),
        flagged,
    })
}
