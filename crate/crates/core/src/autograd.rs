//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and parent
//! links. Nodes are only ever appended, so parents always precede children
//! and a single reverse sweep visits each node once.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{gelu, gelu_grad, MatmulDims, Tensor};

/// Index of a node on a [`Tape`].
pub type NodeId = usize;

/// How the second operand of a binary elementwise op lines up with the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    /// Same shape.
    None,
    /// `b` is a trailing block of `a`'s shape, repeated over leading dims.
    Suffix,
    /// `b` holds one scalar.
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Gelu,
    Log,
    Sqrt,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Binary {
        kind: BinaryKind,
        a: NodeId,
        b: NodeId,
        bcast: Broadcast,
    },
    Unary {
        kind: UnaryKind,
        a: NodeId,
    },
    Scale {
        a: NodeId,
        factor: f64,
    },
    AddScalar {
        a: NodeId,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        dims: MatmulDims,
        alpha: f64,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        dims: MatmulDims,
    },
    Softmax {
        a: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        /// Per-row (mean, 1/std).
        stats: Vec<(f64, f64)>,
    },
    Sum {
        a: NodeId,
    },
    SumLast {
        a: NodeId,
    },
    Reshape {
        a: NodeId,
    },
    SplitHeads {
        a: NodeId,
        heads: usize,
    },
    MergeHeads {
        a: NodeId,
    },
    SelectRows {
        a: NodeId,
        rows: Vec<usize>,
    },
    ReplaceRows {
        x: NodeId,
        fill: NodeId,
        mask: Vec<bool>,
    },
    RowAffine {
        a: NodeId,
        /// (row, multiplier); the additive part is a constant.
        rows: Vec<(usize, f64)>,
    },
    PrependRow {
        x: NodeId,
        row: NodeId,
    },
    NarrowRows {
        a: NodeId,
        start: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded recording of tensor operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
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

    /// Records a trainable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    /// Ids of every trainable leaf, in recording order.
    pub fn leaf_ids(&self) -> Vec<NodeId> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .map(|(i, _)| i)
            .collect()
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

    fn requires(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Propagates d(loss)/d(node) back to every trainable leaf.
    ///
    /// Leaves that do not influence `loss` are reported with a zero gradient.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        let mut out = HashMap::new();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                out.insert(id, Tensor::new(node.value.shape(), g)?);
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads);
        }

        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                out.entry(id)
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { by_id: out })
    }
}

/// Gradients of a scalar loss with respect to each trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_id: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.by_id.get(&var.id)
    }

    pub fn by_id(&self, id: NodeId) -> Option<&Tensor> {
        self.by_id.get(&id)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.by_id.remove(&var.id)
    }
}

/// Returns the gradient buffer for `id`, allocating it on first use.
fn slot<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: NodeId,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]))
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::Binary { kind, a, b, bcast } => {
            let (a, b, kind, bcast) = (*a, *b, *kind, *bcast);
            let bn = nodes[b].value.len();
            if let Some(ga) = slot(grads, nodes, a) {
                match kind {
                    BinaryKind::Add | BinaryKind::Sub => add_into(ga, g),
                    BinaryKind::Mul => {
                        let bv = nodes[b].value.data();
                        for (i, (gi, &gv)) in ga.iter_mut().zip(g).enumerate() {
                            *gi += gv * bv[bindex(i, bn, bcast)];
                        }
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                let sign = if kind == BinaryKind::Sub { -1.0 } else { 1.0 };
                let av = nodes[a].value.data();
                for (i, &gv) in g.iter().enumerate() {
                    let contrib = match kind {
                        BinaryKind::Mul => gv * av[i],
                        _ => sign * gv,
                    };
                    gb[bindex(i, bn, bcast)] += contrib;
                }
            }
        }
        Op::Unary { kind, a } => {
            let av = nodes[*a].value.data();
            let out = node.value.data();
            if let Some(ga) = slot(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i]
                        * match kind {
                            UnaryKind::Gelu => gelu_grad(av[i]),
                            UnaryKind::Log => 1.0 / av[i],
                            UnaryKind::Sqrt => 0.5 / out[i],
                        };
                }
            }
        }
        Op::Scale { a, factor } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &gv)| *x += factor * gv);
            }
        }
        Op::AddScalar { a } | Op::Reshape { a } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                add_into(ga, g);
            }
        }
        Op::MatMul { a, b, dims, alpha } => {
            let (a, b) = (*a, *b);
            if let Some(ga) = slot(grads, nodes, a) {
                dims.grad_a(g, nodes[b].value.data(), *alpha, ga);
            }
            if let Some(gb) = slot(grads, nodes, b) {
                dims.grad_b(nodes[a].value.data(), g, *alpha, gb);
            }
        }
        Op::Linear { x, w, bias, dims } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                dims.grad_a(g, nodes[*w].value.data(), 1.0, gx);
            }
            if let Some(gw) = slot(grads, nodes, *w) {
                dims.grad_b(nodes[*x].value.data(), g, 1.0, gw);
            }
            if let Some(bias) = bias {
                if let Some(gb) = slot(grads, nodes, *bias) {
                    for row in g.chunks(dims.n) {
                        add_into(gb, row);
                    }
                }
            }
        }
        Op::Softmax { a } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                let n = node.value.last_dim();
                let y = node.value.data();
                for ((gr, yr), dr) in ga.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: f64 = yr.iter().zip(dr).map(|(y, d)| y * d).sum();
                    for j in 0..n {
                        gr[j] += yr[j] * (dr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            stats,
        } => {
            let d = node.value.last_dim();
            let xv = nodes[*x].value.data();
            let gv = nodes[*gain].value.data();
            if let Some(gx) = slot(grads, nodes, *x) {
                let mut dxhat = vec![0.0; d];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let xr = &xv[r * d..(r + 1) * d];
                    let dr = &g[r * d..(r + 1) * d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        dxhat[j] = dr[j] * gv[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * (xr[j] - mean) * rstd;
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    let out = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * rstd;
                        out[j] += rstd * (dxhat[j] - m1 - xhat * m2);
                    }
                }
            }
            if let Some(gg) = slot(grads, nodes, *gain) {
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * (xv[r * d + j] - mean) * rstd;
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, *bias) {
                for row in g.chunks(d) {
                    add_into(gb, row);
                }
            }
        }
        Op::Sum { a } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::SumLast { a } => {
            let n = nodes[*a].value.last_dim();
            if let Some(ga) = slot(grads, nodes, *a) {
                for (row, &gv) in ga.chunks_mut(n).zip(g) {
                    row.iter_mut().for_each(|x| *x += gv);
                }
            }
        }
        Op::SplitHeads { a, heads } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                let s = nodes[*a].value.shape();
                let (l, d) = (s[s.len() - 2], s[s.len() - 1]);
                head_shuffle(g, ga, l, d, *heads, false);
            }
        }
        Op::MergeHeads { a } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                let s = nodes[*a].value.shape();
                let (h, l, dh) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
                head_shuffle(g, ga, l, h * dh, h, true);
            }
        }
        Op::SelectRows { a, rows } => {
            let n = nodes[*a].value.last_dim();
            if let Some(ga) = slot(grads, nodes, *a) {
                for (k, &r) in rows.iter().enumerate() {
                    add_into(&mut ga[r * n..(r + 1) * n], &g[k * n..(k + 1) * n]);
                }
            }
        }
        Op::ReplaceRows { x, fill, mask } => {
            let d = node.value.last_dim();
            let per = nodes[*fill].value.len() / d;
            if let Some(gx) = slot(grads, nodes, *x) {
                for (r, &m) in mask.iter().enumerate() {
                    if !m {
                        add_into(&mut gx[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            if let Some(gf) = slot(grads, nodes, *fill) {
                for (r, &m) in mask.iter().enumerate() {
                    if m {
                        let l = r % per;
                        add_into(&mut gf[l * d..(l + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
        }
        Op::RowAffine { a, rows } => {
            let d = node.value.last_dim();
            if let Some(ga) = slot(grads, nodes, *a) {
                let mut scale = vec![1.0; g.len() / d.max(1)];
                for &(r, s) in rows {
                    scale[r] = s;
                }
                for (r, (gr, dr)) in ga.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                    let s = scale[r];
                    gr.iter_mut().zip(dr).for_each(|(x, &gv)| *x += s * gv);
                }
            }
        }
        Op::PrependRow { x, row } => {
            let s = node.value.shape();
            let (l, d) = (s[s.len() - 2], s[s.len() - 1]);
            let batch = node.value.len() / (l * d);
            if let Some(gx) = slot(grads, nodes, *x) {
                for b in 0..batch {
                    let src = &g[(b * l + 1) * d..(b + 1) * l * d];
                    add_into(&mut gx[b * (l - 1) * d..(b + 1) * (l - 1) * d], src);
                }
            }
            if let Some(gr) = slot(grads, nodes, *row) {
                for b in 0..batch {
                    add_into(gr, &g[b * l * d..(b * l + 1) * d]);
                }
            }
        }
        Op::NarrowRows { a, start } => {
            let s = nodes[*a].value.shape();
            let (l, d) = (s[s.len() - 2], s[s.len() - 1]);
            let len = node.value.shape()[s.len() - 2];
            let batch = nodes[*a].value.len() / (l * d);
            if let Some(ga) = slot(grads, nodes, *a) {
                for b in 0..batch {
                    let dst = &mut ga[(b * l + start) * d..(b * l + start + len) * d];
                    add_into(dst, &g[b * len * d..(b + 1) * len * d]);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[inline]
fn bindex(i: usize, bn: usize, bcast: Broadcast) -> usize {
    match bcast {
        Broadcast::None => i,
        Broadcast::Suffix => i % bn,
        Broadcast::Scalar => 0,
    }
}

/// Moves data between `[.., L, H*dh]` and `[.., H, L, dh]` layouts,
/// accumulating into `dst`. `merged_to_split` selects the direction.
fn head_shuffle(
    src: &[f64],
    dst: &mut [f64],
    l: usize,
    d: usize,
    heads: usize,
    merged_to_split: bool,
) {
    let dh = d / heads;
    let batch = src.len() / (l * d);
    for b in 0..batch {
        let base = b * l * d;
        for t in 0..l {
            for h in 0..heads {
                let merged = base + t * d + h * dh;
                let split = base + (h * l + t) * dh;
                let (from, to) = if merged_to_split {
                    (merged, split)
                } else {
                    (split, merged)
                };
                add_into(&mut dst[to..to + dh], &src[from..from + dh]);
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrowed view of the forward value.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(&[self.id])
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables recorded on different tapes"
        );
    }

    fn record(&self, value: Tensor, op: Op, parents: &[NodeId]) -> Var<'t> {
        let rg = self.tape.requires(parents);
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: &Var<'t>, kind: BinaryKind, name: &'static str) -> Result<Var<'t>> {
        self.same_tape(other);
        let value = {
            let a = self.value();
            let b = other.value();
            let (sa, sb) = (a.shape(), b.shape());
            let bcast = if sa == sb {
                Broadcast::None
            } else if b.len() == 1 && sb.iter().all(|&d| d == 1) {
                Broadcast::Scalar
            } else if sb.len() < sa.len() && sa.ends_with(sb) {
                Broadcast::Suffix
            } else {
                return Err(Error::shape(name, sa, sb));
            };
            let bn = b.len();
            let (ad, bd) = (a.data(), b.data());
            let data: Vec<f64> = (0..ad.len())
                .map(|i| {
                    let y = bd[bindex(i, bn, bcast)];
                    match kind {
                        BinaryKind::Add => ad[i] + y,
                        BinaryKind::Sub => ad[i] - y,
                        BinaryKind::Mul => ad[i] * y,
                    }
                })
                .collect();
            (Tensor::new(sa, data)?, bcast)
        };
        let (value, bcast) = value;
        Ok(self.record(
            value,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
                bcast,
            },
            &[self.id, other.id],
        ))
    }

    /// Elementwise sum; `other` may be a scalar or broadcast over leading dims.
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub, "sub")
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul, "mul")
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        let mut v = self.to_tensor();
        v.data_mut().iter_mut().for_each(|x| *x *= factor);
        self.record(v, Op::Scale { a: self.id, factor }, &[self.id])
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let mut v = self.to_tensor();
        v.data_mut().iter_mut().for_each(|x| *x += c);
        self.record(v, Op::AddScalar { a: self.id }, &[self.id])
    }

    fn unary(&self, kind: UnaryKind) -> Var<'t> {
        let mut v = self.to_tensor();
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Gelu => gelu,
            UnaryKind::Log => f64::ln,
            UnaryKind::Sqrt => f64::sqrt,
        };
        v.data_mut().iter_mut().for_each(|x| *x = f(*x));
        self.record(v, Op::Unary { kind, a: self.id }, &[self.id])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(UnaryKind::Gelu)
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&self) -> Result<Var<'t>> {
        if let Some(bad) = self.value().data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(UnaryKind::Log))
    }

    /// Square root; every element must be strictly positive so the
    /// derivative stays finite.
    pub fn sqrt(&self) -> Result<Var<'t>> {
        if let Some(bad) = self.value().data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(UnaryKind::Sqrt))
    }

    /// Matrix product over the last two axes. `other` is either batched
    /// with identical leading dims or a plain matrix shared by the batch.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false, 1.0)
    }

    /// `alpha * self * other^T` over the last two axes.
    pub fn matmul_t(&self, other: &Var<'t>, alpha: f64) -> Result<Var<'t>> {
        self.matmul_impl(other, true, alpha)
    }

    fn matmul_impl(&self, other: &Var<'t>, b_trans: bool, alpha: f64) -> Result<Var<'t>> {
        self.same_tape(other);
        let (value, dims) = {
            let a = self.value();
            let b = other.value();
            let dims = MatmulDims::infer(a.shape(), b.shape(), b_trans)?;
            let mut out = vec![0.0; dims.out_len()];
            dims.forward(a.data(), b.data(), alpha, &mut out);
            (Tensor::new(&dims.out_shape, out)?, dims)
        };
        Ok(self.record(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                dims,
                alpha,
            },
            &[self.id, other.id],
        ))
    }

    /// Affine map `self * weight + bias` over the last axis.
    pub fn linear(&self, weight: &Var<'t>, bias: Option<&Var<'t>>) -> Result<Var<'t>> {
        self.same_tape(weight);
        let (value, dims) = {
            let x = self.value();
            let w = weight.value();
            if w.rank() != 2 {
                return Err(Error::shape("linear", x.shape(), w.shape()));
            }
            let dims = MatmulDims::infer(x.shape(), w.shape(), false)?;
            let mut out = vec![0.0; dims.out_len()];
            dims.forward(x.data(), w.data(), 1.0, &mut out);
            if let Some(b) = bias {
                let bv = b.value();
                if bv.shape() != [dims.n] {
                    return Err(Error::shape("linear bias", &[dims.n], bv.shape()));
                }
                for row in out.chunks_mut(dims.n) {
                    add_into(row, bv.data());
                }
            }
            (Tensor::new(&dims.out_shape, out)?, dims)
        };
        let mut parents = vec![self.id, weight.id];
        parents.extend(bias.map(|b| b.id));
        Ok(self.record(
            value,
            Op::Linear {
                x: self.id,
                w: weight.id,
                bias: bias.map(|b| b.id),
                dims,
            },
            &parents,
        ))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_rows(&self) -> Var<'t> {
        let v = crate::tensor::softmax_rows(&self.value());
        self.record(v, Op::Softmax { a: self.id }, &[self.id])
    }

    /// Layer normalisation over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        if !(eps > 0.0) {
            return Err(Error::Contract(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let (value, stats) = {
            let x = self.value();
            let d = x.last_dim();
            let (g, b) = (gain.value(), bias.value());
            if g.shape() != [d] || b.shape() != [d] {
                return Err(Error::shape("layer_norm", x.shape(), g.shape()));
            }
            let mut out = vec![0.0; x.len()];
            let mut stats = Vec::with_capacity(x.len() / d.max(1));
            for (xr, or) in x.data().chunks(d).zip(out.chunks_mut(d)) {
                let mean = xr.iter().sum::<f64>() / d as f64;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    or[j] = (xr[j] - mean) * rstd * g.data()[j] + b.data()[j];
                }
                stats.push((mean, rstd));
            }
            (Tensor::new(x.shape(), out)?, stats)
        };
        Ok(self.record(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                stats,
            },
            &[self.id, gain.id, bias.id],
        ))
    }

    /// Sum of all elements, as a rank-0 value.
    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.record(Tensor::scalar(s), Op::Sum { a: self.id }, &[self.id])
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len();
        self.sum().scale(1.0 / n as f64)
    }

    /// Sums out the last axis.
    pub fn sum_last(&self) -> Var<'t> {
        let v = {
            let x = self.value();
            let n = x.last_dim();
            let shape = &x.shape()[..x.rank().saturating_sub(1)];
            let data = x.data().chunks(n).map(|r| r.iter().sum()).collect();
            Tensor::new(shape, data).expect("sum_last shape")
        };
        self.record(v, Op::SumLast { a: self.id }, &[self.id])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.to_tensor().reshape(shape)?;
        Ok(self.record(v, Op::Reshape { a: self.id }, &[self.id]))
    }

    /// `[.., L, H*dh]` to `[.., H, L, dh]`.
    pub fn split_heads(&self, heads: usize) -> Result<Var<'t>> {
        let v = {
            let x = self.value();
            let s = x.shape();
            if s.len() < 2 || heads == 0 || !s[s.len() - 1].is_multiple_of(heads) {
                return Err(Error::shape("split_heads", s, &[heads]));
            }
            let (l, d) = (s[s.len() - 2], s[s.len() - 1]);
            let mut out = vec![0.0; x.len()];
            head_shuffle(x.data(), &mut out, l, d, heads, true);
            let mut shape = s[..s.len() - 2].to_vec();
            shape.extend([heads, l, d / heads]);
            Tensor::new(&shape, out)?
        };
        Ok(self.record(v, Op::SplitHeads { a: self.id, heads }, &[self.id]))
    }

    /// `[.., H, L, dh]` to `[.., L, H*dh]`.
    pub fn merge_heads(&self) -> Result<Var<'t>> {
        let v = {
            let x = self.value();
            let s = x.shape();
            if s.len() < 3 {
                return Err(Error::shape("merge_heads", s, &[]));
            }
            let (h, l, dh) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
            let mut out = vec![0.0; x.len()];
            head_shuffle(x.data(), &mut out, l, h * dh, h, false);
            let mut shape = s[..s.len() - 3].to_vec();
            shape.extend([l, h * dh]);
            Tensor::new(&shape, out)?
        };
        Ok(self.record(v, Op::MergeHeads { a: self.id }, &[self.id]))
    }

    /// Gathers rows (last-axis vectors, flat row numbering) into `[n, last]`.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Var<'t>> {
        let v = {
            let x = self.value();
            let n = x.last_dim();
            let total = x.len() / n.max(1);
            let mut out = Vec::with_capacity(rows.len() * n);
            for &r in rows {
                if r >= total {
                    return Err(Error::Contract(format!(
                        "select_rows: row {r} out of range for {total} rows"
                    )));
                }
                out.extend_from_slice(x.row(r));
            }
            Tensor::new(&[rows.len(), n], out)?
        };
        Ok(self.record(
            v,
            Op::SelectRows {
                a: self.id,
                rows: rows.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Replaces flat row `r` of `[.., L, D]` by `fill[r % L]` wherever
    /// `mask[r]` is set. `fill` is `[L, D]`.
    pub fn replace_rows(&self, mask: &[bool], fill: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(fill);
        let v = {
            let x = self.value();
            let f = fill.value();
            let s = x.shape();
            if s.len() < 2 || f.shape() != &s[s.len() - 2..] {
                return Err(Error::shape("replace_rows", s, f.shape()));
            }
            let (l, d) = (s[s.len() - 2], s[s.len() - 1]);
            if mask.len() != x.len() / d {
                return Err(Error::Contract(format!(
                    "replace_rows: mask of length {} for {} rows",
                    mask.len(),
                    x.len() / d
                )));
            }
            let mut out = x.clone();
            for (r, &m) in mask.iter().enumerate() {
                if m {
                    let src = f.row(r % l);
                    out.data_mut()[r * d..(r + 1) * d].copy_from_slice(src);
                }
            }
            out
        };
        Ok(self.record(
            v,
            Op::ReplaceRows {
                x: self.id,
                fill: fill.id,
                mask: mask.to_vec(),
            },
            &[self.id, fill.id],
        ))
    }

    /// For each listed flat row `r`: `out[r] = scale * self[r] + shift_r`,
    /// with `shift` holding the rows' additive constants back to back.
    /// Unlisted rows are copied unchanged.
    pub fn row_affine(&self, rows: &[(usize, f64)], shift: &[f64]) -> Result<Var<'t>> {
        let v = {
            let x = self.value();
            let d = x.last_dim();
            let total = x.len() / d.max(1);
            if shift.len() != rows.len() * d {
                return Err(Error::shape("row_affine", &[rows.len(), d], &[shift.len()]));
            }
            let mut out = x.clone();
            for (k, &(r, s)) in rows.iter().enumerate() {
                if r >= total {
                    return Err(Error::Contract(format!("row_affine: row {r} out of range")));
                }
                let dst = &mut out.data_mut()[r * d..(r + 1) * d];
                for j in 0..d {
                    dst[j] = s * dst[j] + shift[k * d + j];
                }
            }
            out
        };
        Ok(self.record(
            v,
            Op::RowAffine {
                a: self.id,
                rows: rows.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Prepends `row` (`[D]`) to every `[L, D]` block: `[.., L, D]` to `[.., L+1, D]`.
    pub fn prepend_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(row);
        let v = {
            let x = self.value();
            let r = row.value();
            let s = x.shape();
            let d = x.last_dim();
            if s.len() < 2 || r.shape() != [d] {
                return Err(Error::shape("prepend_row", s, r.shape()));
            }
            let l = s[s.len() - 2];
            let batch = x.len() / (l * d).max(1);
            let mut out = Vec::with_capacity(batch * (l + 1) * d);
            for b in 0..batch {
                out.extend_from_slice(r.data());
                out.extend_from_slice(&x.data()[b * l * d..(b + 1) * l * d]);
            }
            let mut shape = s.to_vec();
            shape[s.len() - 2] = l + 1;
            Tensor::new(&shape, out)?
        };
        Ok(self.record(
            v,
            Op::PrependRow {
                x: self.id,
                row: row.id,
            },
            &[self.id, row.id],
        ))
    }

    /// Rows `start..start+len` of every `[L, D]` block.
    pub fn narrow_rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = {
            let x = self.value();
            let s = x.shape();
            if s.len() < 2 || start + len > s[s.len() - 2] {
                return Err(Error::shape("narrow_rows", s, &[start, len]));
            }
            let (l, d) = (s[s.len() - 2], s[s.len() - 1]);
            let batch = x.len() / (l * d).max(1);
            let mut out = Vec::with_capacity(batch * len * d);
            for b in 0..batch {
                out.extend_from_slice(&x.data()[(b * l + start) * d..(b * l + start + len) * d]);
            }
            let mut shape = s.to_vec();
            shape[s.len() - 2] = len;
            Tensor::new(&shape, out)?
        };
        Ok(self.record(v, Op::NarrowRows { a: self.id, start }, &[self.id]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let w = tape.leaf(t(&[3], &[0.3, -1.0, 2.0]));
        let g = tape.backward(w.sum()).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let tape = Tape::new();
        let w = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let loss = w.mul(&w).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let tape = Tape::new();
        let used = tape.leaf(t(&[2], &[1.0, 2.0]));
        let unused = tape.leaf(t(&[2, 2], &[1.0; 4]));
        let g = tape.backward(used.sum()).unwrap();
        assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let w = tape.leaf(t(&[2], &[3.0, 4.0]));
        let g = tape.backward(c.mul(&w).unwrap().sum()).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn elementwise_add_and_broadcast() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[1, 2], &[3.0, 4.0]));
        assert_eq!(a.add(&b).unwrap().value().data(), &[4.0, 6.0]);

        let x = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let bias = tape.leaf(t(&[2], &[10.0, 20.0]));
        let y = x.add(&bias).unwrap();
        assert_eq!(y.value().data(), &[11.0, 22.0, 13.0, 24.0]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(bias).unwrap().data(), &[2.0, 2.0]);

        let bad = tape.leaf(t(&[3], &[0.0; 3]));
        assert!(matches!(x.add(&bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn log_rejects_non_positive() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 0.0]));
        assert!(matches!(x.log(), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn split_merge_heads_round_trip() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let s = x.split_heads(2).unwrap();
        assert_eq!(s.shape(), vec![2, 2, 3, 2]);
        // batch 0, head 1, token 2 holds features 2..4 of token 2.
        assert_eq!(s.value().get(&[0, 1, 2, 0]), x.value().get(&[0, 2, 2]));
        let m = s.merge_heads().unwrap();
        assert_eq!(m.to_tensor(), x.to_tensor());
    }

    #[test]
    fn replace_rows_routes_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 2, 1], |i| i as f64));
        let fill = tape.leaf(t(&[2, 1], &[-1.0, -2.0]));
        let y = x.replace_rows(&[false, true, true, false], &fill).unwrap();
        assert_eq!(y.value().data(), &[0.0, -2.0, -1.0, 3.0]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(g.get(fill).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn prepend_and_narrow_are_inverse() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let cls = tape.leaf(t(&[2], &[9.0, 9.0]));
        let y = x.prepend_row(&cls).unwrap();
        assert_eq!(y.shape(), vec![2, 4, 2]);
        assert_eq!(y.value().row(4), &[9.0, 9.0]);
        let back = y.narrow_rows(1, 3).unwrap();
        assert_eq!(back.to_tensor(), x.to_tensor());
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(cls).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let run = || {
            let tape = Tape::new();
            let a = tape.leaf(Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin()));
            let b = tape.leaf(Tensor::from_fn(&[4, 2], |i| (i as f64 * 0.71).cos()));
            let y = a.matmul(&b).unwrap().softmax_rows().gelu().sum();
            let g = tape.backward(y).unwrap();
            (g.get(a).unwrap().clone(), g.get(b).unwrap().clone())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert!(a1.bit_eq(&a2) && b1.bit_eq(&b2));
    }
}
