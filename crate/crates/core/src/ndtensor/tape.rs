use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use super::tensor::split_at_axis;
use super::{SparsePattern, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Recorded kernel with the indices of its inputs and whatever it needs to
/// replay its adjoint.
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Abs(usize),
    Sqrt(usize),
    Square(usize),
    ClampMin(usize, f64),
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Softmax(usize, usize),
    MaskedSoftmax(usize, usize),
    Sum(usize, usize),
    Mean(usize, usize),
    SumAll(usize),
    MeanAll(usize),
    Concat(Vec<usize>, usize),
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    IndexSelect {
        a: usize,
        axis: usize,
        indices: Vec<usize>,
    },
    BroadcastTo(usize),
    L2Norm(usize),
    Max {
        a: usize,
        axis: usize,
        argmax: Vec<usize>,
    },
    SpMM(usize, Arc<SparsePattern>),
    SoftmaxKl(usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::Abs(..) => "abs",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::ClampMin(..) => "clamp_min",
            Op::MatMul { .. } => "matmul",
            Op::Softmax(..) => "softmax",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::IndexSelect { .. } => "index_select",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::L2Norm(..) => "l2_norm",
            Op::Max { .. } => "max",
            Op::SpMM(..) => "sparse_matmul",
            Op::SoftmaxKl(..) => "softmax_kl",
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed kernels. Nodes are appended in execution
/// order, so a node's inputs always precede it.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Adjoints of every gradient-tracking leaf, produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
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

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op: Op::Leaf,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Gradient-tracking leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn push(&self, value: Tensor, inputs: &[usize], op: Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Reverse sweep from a scalar `loss`, visiting each recorded kernel once.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.id].value;
        if loss_value.numel() != 1 {
            return Err(TensorError::NotScalar(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let mut leaves: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            for (input, adj) in adjoints(&nodes, node, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&adj).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(adj),
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidArgument(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each flat output index, the flat source index under a strided view.
fn gather_map(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn permute_map(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    (out_shape.clone(), gather_map(&out_shape, &src))
}

fn broadcast_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let pad = out_shape.len() - in_shape.len();
    let in_strides = strides(in_shape);
    let src: Vec<usize> = (0..out_shape.len())
        .map(|d| {
            if d < pad || in_shape[d - pad] == 1 {
                0
            } else {
                in_strides[d - pad]
            }
        })
        .collect();
    gather_map(out_shape, &src)
}

fn softmax_backward(y: &[f64], g: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let dot: f64 = (0..len)
                .map(|j| g[base + j * inner] * y[base + j * inner])
                .sum();
            for j in 0..len {
                let at = base + j * inner;
                dx[at] = y[at] * (g[at] - dot);
            }
        }
    }
    dx
}

fn adjoints(nodes: &[Node], node: &Node, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let val = |i: usize| &nodes[i].value;
    let out = &node.value;
    let unary = |a: usize, f: &dyn Fn(usize) -> f64| -> Vec<(usize, Vec<f64>)> {
        vec![(a, (0..g.len()).map(|i| g[i] * f(i)).collect())]
    };
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
        Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
        Op::Mul(a, b) => {
            let (x, y) = (val(*a).data(), val(*b).data());
            vec![
                (*a, g.iter().zip(y).map(|(g, y)| g * y).collect()),
                (*b, g.iter().zip(x).map(|(g, x)| g * x).collect()),
            ]
        }
        Op::Div(a, b) => {
            let (x, y) = (val(*a).data(), val(*b).data());
            vec![
                (*a, g.iter().zip(y).map(|(g, y)| g / y).collect()),
                (
                    *b,
                    (0..g.len()).map(|i| -g[i] * x[i] / (y[i] * y[i])).collect(),
                ),
            ]
        }
        Op::Scale(a, c) => vec![(*a, g.iter().map(|x| x * c).collect())],
        Op::AddScalar(a) => vec![(*a, g.to_vec())],
        Op::Relu(a) => {
            let x = val(*a).data();
            unary(*a, &|i| if x[i] > 0.0 { 1.0 } else { 0.0 })
        }
        Op::Exp(a) => unary(*a, &|i| out.data()[i]),
        Op::Log(a) => {
            let x = val(*a).data();
            unary(*a, &|i| 1.0 / x[i])
        }
        Op::Sigmoid(a) => unary(*a, &|i| {
            let s = out.data()[i];
            s * (1.0 - s)
        }),
        Op::Abs(a) => {
            let x = val(*a).data();
            unary(*a, &|i| {
                if x[i] > 0.0 {
                    1.0
                } else if x[i] < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
        }
        Op::Sqrt(a) => unary(*a, &|i| {
            let s = out.data()[i];
            if s > 0.0 {
                0.5 / s
            } else {
                0.0
            }
        }),
        Op::Square(a) => {
            let x = val(*a).data();
            unary(*a, &|i| 2.0 * x[i])
        }
        Op::ClampMin(a, floor) => {
            let x = val(*a).data();
            unary(*a, &|i| if x[i] > *floor { 1.0 } else { 0.0 })
        }
        Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_rhs,
        } => {
            let (x, y) = (val(*a).data(), val(*b).data());
            let (m, k, n) = (*m, *k, *n);
            let mut da = vec![0.0; x.len()];
            let mut db = vec![0.0; y.len()];
            for bi in 0..*batch {
                let gs = &g[bi * m * n..(bi + 1) * m * n];
                let xs = &x[bi * m * k..(bi + 1) * m * k];
                let yo = if *shared_rhs { 0 } else { bi * k * n };
                gemm_nt(gs, &y[yo..yo + k * n], &mut da[bi * m * k..(bi + 1) * m * k], m, k, n);
                gemm_tn(xs, gs, &mut db[yo..yo + k * n], m, k, n);
            }
            vec![(*a, da), (*b, db)]
        }
        Op::Softmax(a, axis) | Op::MaskedSoftmax(a, axis) => {
            let (o, l, i) = split_at_axis(out.shape(), *axis);
            vec![(*a, softmax_backward(out.data(), g, o, l, i))]
        }
        Op::Sum(a, axis) | Op::Mean(a, axis) => {
            let shape = val(*a).shape();
            let (outer, len, inner) = split_at_axis(shape, *axis);
            let scale = if matches!(node.op, Op::Mean(..)) {
                1.0 / len as f64
            } else {
                1.0
            };
            let mut dx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        dx[(o * len + j) * inner + i] = g[o * inner + i] * scale;
                    }
                }
            }
            vec![(*a, dx)]
        }
        Op::SumAll(a) => vec![(*a, vec![g[0]; val(*a).numel()])],
        Op::MeanAll(a) => {
            let n = val(*a).numel();
            vec![(*a, vec![g[0] / n as f64; n])]
        }
        Op::Concat(inputs, axis) => {
            let (outer, total, inner) = split_at_axis(out.shape(), *axis);
            let mut offset = 0;
            inputs
                .iter()
                .map(|&inp| {
                    let len = val(inp).shape()[*axis];
                    let mut dx = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        dx.extend_from_slice(&g[start..start + len * inner]);
                    }
                    offset += len;
                    (inp, dx)
                })
                .collect()
        }
        Op::Slice { a, axis, start } => {
            let in_shape = val(*a).shape();
            let (outer, full, inner) = split_at_axis(in_shape, *axis);
            let len = out.shape()[*axis];
            let mut dx = vec![0.0; outer * full * inner];
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                let src = o * len * inner;
                dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            vec![(*a, dx)]
        }
        Op::Reshape(a) => vec![(*a, g.to_vec())],
        Op::Permute(a, perm) => {
            let (_, map) = permute_map(val(*a).shape(), perm);
            let mut dx = vec![0.0; g.len()];
            for (o, &src) in map.iter().enumerate() {
                dx[src] = g[o];
            }
            vec![(*a, dx)]
        }
        Op::IndexSelect { a, axis, indices } => {
            let in_shape = val(*a).shape();
            let (outer, full, inner) = split_at_axis(in_shape, *axis);
            let mut dx = vec![0.0; outer * full * inner];
            for o in 0..outer {
                for (j, &src) in indices.iter().enumerate() {
                    let s = (o * indices.len() + j) * inner;
                    let d = (o * full + src) * inner;
                    for i in 0..inner {
                        dx[d + i] += g[s + i];
                    }
                }
            }
            vec![(*a, dx)]
        }
        Op::BroadcastTo(a) => {
            let input = val(*a);
            let map = broadcast_map(input.shape(), out.shape());
            let mut dx = vec![0.0; input.numel()];
            for (o, &src) in map.iter().enumerate() {
                dx[src] += g[o];
            }
            vec![(*a, dx)]
        }
        Op::L2Norm(a) => {
            let x = val(*a).data();
            let outer = out.numel();
            let inner = x.len() / outer.max(1);
            let mut dx = vec![0.0; x.len()];
            for o in 0..outer {
                let nrm = out.data()[o];
                if nrm > 0.0 {
                    for i in 0..inner {
                        dx[o * inner + i] = g[o] * x[o * inner + i] / nrm;
                    }
                }
            }
            vec![(*a, dx)]
        }
        Op::Max { a, axis, argmax } => {
            let (outer, len, inner) = split_at_axis(val(*a).shape(), *axis);
            let mut dx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let j = argmax[o * inner + i];
                    dx[(o * len + j) * inner + i] = g[o * inner + i];
                }
            }
            vec![(*a, dx)]
        }
        Op::SpMM(a, pattern) => {
            let shape = out.shape();
            let nd = shape.len();
            let inner = shape[nd - 1];
            let outer: usize = shape[..nd - 2].iter().product();
            vec![(*a, pattern.apply_transpose(g, outer, inner))]
        }
        Op::SoftmaxKl(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let cols = x.shape()[x.ndim() - 1];
            let mut da = vec![0.0; x.numel()];
            let mut db = vec![0.0; x.numel()];
            for (r, &gr) in g.iter().enumerate() {
                let span = r * cols..(r + 1) * cols;
                let row = softmax_kl_row(&x.data()[span.clone()], &y.data()[span.clone()]);
                let q = row_softmax(&y.data()[span.clone()]);
                for j in 0..cols {
                    da[span.start + j] = gr * row.p[j] * row.e[j];
                    db[span.start + j] = gr * (q[j] - row.p[j]);
                }
            }
            vec![(*a, da), (*b, db)]
        }
    }
}

fn row_softmax(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = x.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|v| v / z).collect()
}

/// `exp(-e) - 1 + e`, accurate to relative rounding for small `e`.
fn exp_neg_remainder(e: f64) -> f64 {
    if e.abs() >= 0.1 {
        return (-e).exp_m1() + e;
    }
    let mut term = e * e / 2.0;
    let mut sum = term;
    for k in 3..=12 {
        term *= -e / f64::from(k);
        sum += term;
    }
    sum
}

struct KlRow {
    kl: f64,
    p: Vec<f64>,
    /// `a - b` shifted to zero mean under `p`.
    e: Vec<f64>,
}

/// `KL(softmax(a) || softmax(b))` written as `s + ln(1 + sum_j p_j r(e_j) - s)`
/// with `r` the exponential remainder and `s = sum_j p_j e_j`, which avoids
/// the first-order cancellation of `sum_j p_j ln(p_j / q_j)`.
fn softmax_kl_row(a: &[f64], b: &[f64]) -> KlRow {
    let p = row_softmax(a);
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mut m: f64 = p.iter().zip(&d).map(|(p, d)| p * d).sum();
    m += p.iter().zip(&d).map(|(p, d)| p * (d - m)).sum::<f64>();
    let e: Vec<f64> = d.iter().map(|d| d - m).collect();
    let s: f64 = p.iter().zip(&e).map(|(p, e)| p * e).sum();
    let rem: f64 = p.iter().zip(&e).map(|(p, &e)| p * exp_neg_remainder(e)).sum();
    KlRow {
        kl: (s + (rem - s).ln_1p()).max(0.0),
        p,
        e,
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (x, y) = (self.value(), other.value());
        if x.shape() != y.shape() {
            return Err(shape_err(name, x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&a, &b)| f(a, b)).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.tape.push(t, &[self.id, other.id], op)
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'t>> {
        let t = self.value().map(f);
        self.tape.push(t, &[self.id], op)
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.unary(|x| x * c, Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.unary(|x| x + c, Op::AddScalar(self.id))
    }

    /// Rectifier with subgradient 0 at the origin.
    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn ln(&self) -> Result<Var<'t>> {
        self.unary(f64::ln, Op::Log(self.id))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(self.id))
    }

    pub fn abs(&self) -> Result<Var<'t>> {
        self.unary(f64::abs, Op::Abs(self.id))
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        self.unary(f64::sqrt, Op::Sqrt(self.id))
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.unary(|x| x * x, Op::Square(self.id))
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&self, floor: f64) -> Result<Var<'t>> {
        self.unary(|x| x.max(floor), Op::ClampMin(self.id, floor))
    }

    /// Batched matrix product over the last two axes.
    ///
    /// `self` is `(..., m, k)`. `rhs` is either `(k, n)`, shared across the
    /// leading axes, or `(..., k, n)` with leading axes identical to `self`.
    pub fn matmul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead = &sa[..sa.len() - 2];
        let shared_rhs = sb.len() == 2;
        if kb != k || (!shared_rhs && &sb[..sb.len() - 2] != lead) {
            return Err(shape_err("matmul", sa, sb));
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let bo = if shared_rhs { 0 } else { bi * k * n };
            gemm(
                &a.data()[bi * m * k..(bi + 1) * m * k],
                &b.data()[bo..bo + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let op = Op::MatMul {
            a: self.id,
            b: rhs.id,
            batch,
            m,
            k,
            n,
            shared_rhs,
        };
        self.tape.push(Tensor::new(shape, out)?, &[self.id, rhs.id], op)
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("softmax", x.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(x.shape(), axis);
        let mut y = vec![0.0; x.numel()];
        let d = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (d[at(j)] - mx).exp();
                    y[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[at(j)] /= total;
                }
            }
        }
        let t = Tensor::new(x.shape().to_vec(), y)?;
        self.tape.push(t, &[self.id], Op::Softmax(self.id, axis))
    }

    /// Softmax restricted to positions where `mask != 0`; masked positions get
    /// weight exactly zero. A row with no unmasked entry is an error.
    pub fn masked_softmax(&self, mask: &Tensor, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape() != mask.shape() {
            return Err(shape_err("masked_softmax", x.shape(), mask.shape()));
        }
        check_axis("masked_softmax", x.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(x.shape(), axis);
        let mut y = vec![0.0; x.numel()];
        let (d, mk) = (x.data(), mask.data());
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len)
                    .filter(|&j| mk[at(j)] != 0.0)
                    .map(|j| d[at(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                if mx == f64::NEG_INFINITY {
                    return Err(TensorError::InvalidArgument(
                        "masked_softmax: fully masked row".into(),
                    ));
                }
                let mut total = 0.0;
                for j in (0..len).filter(|&j| mk[at(j)] != 0.0) {
                    let e = (d[at(j)] - mx).exp();
                    y[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[at(j)] /= total;
                }
            }
        }
        let t = Tensor::new(x.shape().to_vec(), y)?;
        self.tape.push(t, &[self.id], Op::MaskedSoftmax(self.id, axis))
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Var<'t>> {
        let x = self.value();
        let name = if mean { "mean" } else { "sum" };
        check_axis(name, x.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x.data()[(o * len + j) * inner + i];
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let op = if mean {
            Op::Mean(self.id, axis)
        } else {
            Op::Sum(self.id, axis)
        };
        self.tape.push(Tensor::new(shape, out)?, &[self.id], op)
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, true)
    }

    pub fn sum_all(&self) -> Result<Var<'t>> {
        let s: f64 = self.value().data().iter().sum();
        self.tape
            .push(Tensor::scalar(s), &[self.id], Op::SumAll(self.id))
    }

    pub fn mean_all(&self) -> Result<Var<'t>> {
        let x = self.value();
        let s: f64 = x.data().iter().sum::<f64>() / x.numel() as f64;
        self.tape
            .push(Tensor::scalar(s), &[self.id], Op::MeanAll(self.id))
    }

    /// Maximum over `axis`; ties resolve to the lowest index.
    pub fn max_axis(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("max", x.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(x.shape(), axis);
        if len == 0 {
            return Err(TensorError::InvalidArgument("max: empty axis".into()));
        }
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for j in 1..len {
                    if x.data()[(o * len + j) * inner + i] > x.data()[(o * len + best) * inner + i] {
                        best = j;
                    }
                }
                argmax[o * inner + i] = best;
                out[o * inner + i] = x.data()[(o * len + best) * inner + i];
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let op = Op::Max {
            a: self.id,
            axis,
            argmax,
        };
        self.tape.push(Tensor::new(shape, out)?, &[self.id], op)
    }

    /// Euclidean norm over the trailing `axes` axes. The gradient at a zero
    /// vector is zero.
    pub fn l2_norm(&self, axes: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axes == 0 || axes > x.ndim() {
            return Err(TensorError::InvalidArgument(format!(
                "l2_norm: cannot reduce {axes} trailing axes of {:?}",
                x.shape()
            )));
        }
        let lead = &x.shape()[..x.ndim() - axes];
        let outer: usize = lead.iter().product();
        let inner = x.numel() / outer.max(1);
        let out: Vec<f64> = (0..outer)
            .map(|o| {
                x.data()[o * inner..(o + 1) * inner]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        self.tape
            .push(Tensor::new(lead.to_vec(), out)?, &[self.id], Op::L2Norm(self.id))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat: no inputs".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let base = values[0].shape().to_vec();
        check_axis("concat", &base, axis)?;
        for v in &values[1..] {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        first
            .tape
            .push(Tensor::new(shape, out)?, &ids, Op::Concat(ids.clone(), axis))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("slice", x.shape(), axis)?;
        let (outer, full, inner) = split_at_axis(x.shape(), axis);
        if start + len > full {
            return Err(TensorError::InvalidArgument(format!(
                "slice: range {start}..{} exceeds axis length {full}",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&x.data()[s..s + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let op = Op::Slice {
            a: self.id,
            axis,
            start,
        };
        self.tape.push(Tensor::new(shape, out)?, &[self.id], op)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if shape.iter().product::<usize>() != x.numel() {
            return Err(shape_err("reshape", x.shape(), shape));
        }
        let t = Tensor::new(shape.to_vec(), x.data().to_vec())?;
        self.tape.push(t, &[self.id], Op::Reshape(self.id))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let mut seen = perm.to_vec();
        seen.sort_unstable();
        if seen != (0..x.ndim()).collect::<Vec<_>>() {
            return Err(TensorError::InvalidArgument(format!(
                "permute: {perm:?} is not a permutation of {} axes",
                x.ndim()
            )));
        }
        let (shape, map) = permute_map(x.shape(), perm);
        let data = map.iter().map(|&i| x.data()[i]).collect();
        self.tape.push(
            Tensor::new(shape, data)?,
            &[self.id],
            Op::Permute(self.id, perm.to_vec()),
        )
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Var<'t>> {
        let n = self.value().ndim();
        check_axis("transpose", &self.shape(), a.max(b))?;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Gathers entries along `axis` by index (rows may repeat).
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("index_select", x.shape(), axis)?;
        let (outer, full, inner) = split_at_axis(x.shape(), axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= full) {
            return Err(TensorError::InvalidArgument(format!(
                "index_select: index {bad} out of range for axis length {full}"
            )));
        }
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &j in indices {
                let s = (o * full + j) * inner;
                out.extend_from_slice(&x.data()[s..s + inner]);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = indices.len();
        let op = Op::IndexSelect {
            a: self.id,
            axis,
            indices: indices.to_vec(),
        };
        self.tape.push(Tensor::new(shape, out)?, &[self.id], op)
    }

    /// Broadcast with trailing-axis alignment: each input axis must equal the
    /// target axis or be 1; missing leading axes are added.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let xs = x.shape();
        let ok = xs.len() <= shape.len()
            && xs
                .iter()
                .zip(&shape[shape.len() - xs.len()..])
                .all(|(&a, &b)| a == b || a == 1);
        if !ok {
            return Err(shape_err("broadcast_to", xs, shape));
        }
        let map = broadcast_map(xs, shape);
        let data = map.iter().map(|&i| x.data()[i]).collect();
        self.tape.push(
            Tensor::new(shape.to_vec(), data)?,
            &[self.id],
            Op::BroadcastTo(self.id),
        )
    }

    /// Multiplies every entry by a single-element var.
    pub fn scale_by(&self, s: Var<'t>) -> Result<Var<'t>> {
        let b = s.broadcast_to(&self.shape())?;
        self.mul(b)
    }

    /// Adds `bias` broadcast over the leading axes.
    pub fn add_broadcast(&self, bias: Var<'t>) -> Result<Var<'t>> {
        let b = bias.broadcast_to(&self.shape())?;
        self.add(b)
    }

    /// Sparse binary matrix applied along the second-to-last axis:
    /// `(..., cols, F) -> (..., rows, F)`.
    pub fn sparse_matmul(&self, pattern: &Arc<SparsePattern>) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() < 2 || s[s.len() - 2] != pattern.cols() {
            return Err(shape_err(
                "sparse_matmul",
                s,
                &[pattern.rows(), pattern.cols()],
            ));
        }
        let inner = s[s.len() - 1];
        let outer: usize = s[..s.len() - 2].iter().product();
        let out = pattern.apply(x.data(), outer, inner);
        let mut shape = s.to_vec();
        let nd = shape.len();
        shape[nd - 2] = pattern.rows();
        self.tape.push(
            Tensor::new(shape, out)?,
            &[self.id],
            Op::SpMM(self.id, Arc::clone(pattern)),
        )
    }

    /// Row-wise `KL(softmax(self) || softmax(other))` over the last axis of
    /// `(D,)` or `(B, D)` logits, giving `(1,)` or `(B,)`.
    pub fn softmax_kl(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (x, y) = (self.value(), other.value());
        if x.shape() != y.shape() || !matches!(x.ndim(), 1 | 2) || x.numel() == 0 {
            return Err(shape_err("softmax_kl", x.shape(), y.shape()));
        }
        let cols = x.shape()[x.ndim() - 1];
        let rows = x.numel() / cols;
        let out: Vec<f64> = (0..rows)
            .map(|r| {
                let span = r * cols..(r + 1) * cols;
                softmax_kl_row(&x.data()[span.clone()], &y.data()[span]).kl
            })
            .collect();
        self.tape
            .push(Tensor::new(vec![rows], out)?, &[self.id, other.id], Op::SoftmaxKl(self.id, other.id))
    }
}
