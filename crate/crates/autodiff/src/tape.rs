//! Wengert-list tape with tensor-valued nodes.
//!
//! Every op appends a node holding its output value and enough context to
//! compute input gradients. Node ids are assigned in execution order, so the
//! list is already topologically sorted and `backward` walks it once in
//! reverse.

use std::cell::{Cell, Ref, RefCell};

use crate::error::{AutodiffError, Result};
use crate::kernels::{self, MatRef};
use crate::tensor::{matrix_dims, Tensor};

/// Probabilities below this are clamped before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;
/// Norm floor used by cosine similarity and row normalization.
pub const NORM_CLAMP: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    AddRow { a: usize, row: usize },
    Mul(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    MulConst(usize, Vec<f64>),
    Relu(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MaxPool { inputs: Vec<usize>, winner: Vec<usize> },
    Nll {
        p: usize,
        targets: Vec<Option<usize>>,
        count: usize,
    },
    Cosine { a: usize, b: usize },
    NormalizeRows { a: usize, norms: Vec<f64> },
    Gather { table: usize, ids: Vec<usize> },
    MeanRows(usize),
    Sum(usize),
    SliceCols { a: usize, start: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Reshape(usize),
    Transpose(usize),
    WeightedLse { s: usize, w: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass. Single-threaded by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    backward_done: Cell<bool>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        let g = self.grads.get(var.id)?.as_ref()?;
        Some(Tensor::new(self.shapes[var.id].clone(), g.clone()).expect("grad shape"))
    }

    pub fn get_slice(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id)?.as_deref()
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Vec<f64>> {
        self.grads.get_mut(var.id)?.take()
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

    /// Trainable leaf.
    pub fn var(&self, t: Tensor) -> Var<'_> {
        self.leaf(t, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.leaf(t, false)
    }

    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Var<'_> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, requires_grad)
    }

    /// Allows `backward` to run again. Gradients are never stored on the tape,
    /// so this only clears the guard.
    pub fn reset_backward(&self) {
        self.backward_done.set(false);
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(AutodiffError::ForeignVar);
        }
        let nodes = self.nodes();
        if nodes[loss.id].value.len() != 1 {
            return Err(AutodiffError::Rank {
                op: "backward",
                shape: nodes[loss.id].shape.clone(),
            });
        }
        if self.backward_done.get() {
            return Err(AutodiffError::AlreadyBackpropagated);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if nodes[id].requires_grad {
                backprop_node(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        self.backward_done.set(true);
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }
}

fn grad_buf<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if let Some(buf) = grad_buf(grads, nodes, id) {
        f(buf);
    }
}

fn mat<'a>(nodes: &'a [Node], id: usize) -> MatRef<'a> {
    let (r, c) = matrix_dims(&nodes[id].shape).expect("matrix node");
    MatRef::new(&nodes[id].value, r, c)
}

fn backprop_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb } => {
            let (ra, ca) = matrix_dims(&nodes[*a].shape).unwrap();
            let (rb, cb) = matrix_dims(&nodes[*b].shape).unwrap();
            let (m, _) = if *ta { (ca, ra) } else { (ra, ca) };
            let n = if *tb { rb } else { cb };
            let gm = MatRef::new(g, m, n);
            let am = if *ta { mat(nodes, *a).t() } else { mat(nodes, *a) };
            let bm = if *tb { mat(nodes, *b).t() } else { mat(nodes, *b) };
            acc(grads, nodes, *a, |buf| {
                if *ta {
                    kernels::gemm(bm, gm.t(), 1.0, buf);
                } else {
                    kernels::gemm(gm, bm.t(), 1.0, buf);
                }
            });
            acc(grads, nodes, *b, |buf| {
                if *tb {
                    kernels::gemm(gm.t(), am, 1.0, buf);
                } else {
                    kernels::gemm(am.t(), gm, 1.0, buf);
                }
            });
        }
        Op::Add(a, b) => {
            for &i in [a, b] {
                acc(grads, nodes, i, |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
        }
        Op::AddRow { a, row } => {
            acc(grads, nodes, *a, |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            let d = nodes[*row].value.len();
            acc(grads, nodes, *row, |buf| {
                for chunk in g.chunks(d) {
                    buf.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                }
            });
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            acc(grads, nodes, *a, |buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * vb[i];
                }
            });
            acc(grads, nodes, *b, |buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * va[i];
                }
            });
        }
        Op::Scale(a, c) => {
            acc(grads, nodes, *a, |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
        }
        Op::AddConst(a) | Op::Reshape(a) => {
            acc(grads, nodes, *a, |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y));
        }
        Op::MulConst(a, c) => {
            acc(grads, nodes, *a, |buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * c[i];
                }
            });
        }
        Op::Relu(a) => {
            let va = &nodes[*a].value;
            acc(grads, nodes, *a, |buf| {
                for i in 0..buf.len() {
                    if va[i] > 0.0 {
                        buf[i] += g[i];
                    }
                }
            });
        }
        Op::Softmax(a) => {
            let y = &node.value;
            let (_, c) = matrix_dims(&node.shape).unwrap();
            acc(grads, nodes, *a, |buf| {
                for ((yr, gr), br) in y.chunks(c).zip(g.chunks(c)).zip(buf.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        br[j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let (_, d) = matrix_dims(&node.shape).unwrap();
            let gv = &nodes[*gain].value;
            acc(grads, nodes, *x, |buf| {
                let mut dxhat = vec![0.0; d];
                for r in 0..rstd.len() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    for j in 0..d {
                        dxhat[j] = gr[j] * gv[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        buf[r * d + j] += rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                    }
                }
            });
            acc(grads, nodes, *gain, |buf| {
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        buf[j] += gr[j] * hr[j];
                    }
                }
            });
            acc(grads, nodes, *bias, |buf| {
                for gr in g.chunks(d) {
                    buf.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                }
            });
        }
        Op::MaxPool { inputs, winner } => {
            for (k, &inp) in inputs.iter().enumerate() {
                acc(grads, nodes, inp, |buf| {
                    for e in 0..buf.len() {
                        if winner[e] == k {
                            buf[e] += g[e];
                        }
                    }
                });
            }
        }
        Op::Nll { p, targets, count } => {
            let pv = &nodes[*p].value;
            let (_, c) = matrix_dims(&nodes[*p].shape).unwrap();
            let scale = g[0] / *count as f64;
            acc(grads, nodes, *p, |buf| {
                for (r, t) in targets.iter().enumerate() {
                    if let Some(j) = t {
                        let v = pv[r * c + j];
                        if v >= PROB_CLAMP {
                            buf[r * c + j] -= scale / v;
                        }
                    }
                }
            });
        }
        Op::Cosine { a, b } => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let na_raw = va.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb_raw = vb.iter().map(|v| v * v).sum::<f64>().sqrt();
            let (na, nb) = (na_raw.max(NORM_CLAMP), nb_raw.max(NORM_CLAMP));
            let s = node.value[0];
            for (this, other, n_this, n_other, clamped) in [
                (*a, vb, na, nb, na_raw < NORM_CLAMP),
                (*b, va, nb, na, nb_raw < NORM_CLAMP),
            ] {
                let own = &nodes[this].value;
                acc(grads, nodes, this, |buf| {
                    for i in 0..buf.len() {
                        let mut d = other[i] / (n_this * n_other);
                        if !clamped {
                            d -= s * own[i] / (n_this * n_this);
                        }
                        buf[i] += g[0] * d;
                    }
                });
            }
        }
        Op::NormalizeRows { a, norms } => {
            let y = &node.value;
            let (_, c) = matrix_dims(&node.shape).unwrap();
            acc(grads, nodes, *a, |buf| {
                for (r, &n) in norms.iter().enumerate() {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    if n >= NORM_CLAMP {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            buf[r * c + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    } else {
                        for j in 0..c {
                            buf[r * c + j] += gr[j] / NORM_CLAMP;
                        }
                    }
                }
            });
        }
        Op::Gather { table, ids } => {
            let (_, d) = matrix_dims(&nodes[*table].shape).unwrap();
            acc(grads, nodes, *table, |buf| {
                for (r, &tok) in ids.iter().enumerate() {
                    for j in 0..d {
                        buf[tok * d + j] += g[r * d + j];
                    }
                }
            });
        }
        Op::MeanRows(a) => {
            let (r, c) = matrix_dims(&nodes[*a].shape).unwrap();
            acc(grads, nodes, *a, |buf| {
                for chunk in buf.chunks_mut(c) {
                    for j in 0..c {
                        chunk[j] += g[j] / r as f64;
                    }
                }
            });
        }
        Op::Sum(a) => {
            acc(grads, nodes, *a, |buf| buf.iter_mut().for_each(|x| *x += g[0]));
        }
        Op::SliceCols { a, start } => {
            let (_, c) = matrix_dims(&nodes[*a].shape).unwrap();
            let (_, w) = matrix_dims(&node.shape).unwrap();
            acc(grads, nodes, *a, |buf| {
                for (br, gr) in buf.chunks_mut(c).zip(g.chunks(w)) {
                    for j in 0..w {
                        br[start + j] += gr[j];
                    }
                }
            });
        }
        Op::ConcatCols(parts) => {
            let (_, total) = matrix_dims(&node.shape).unwrap();
            let mut offset = 0;
            for &p in parts {
                let (_, w) = matrix_dims(&nodes[p].shape).unwrap();
                acc(grads, nodes, p, |buf| {
                    for (br, gr) in buf.chunks_mut(w).zip(g.chunks(total)) {
                        for j in 0..w {
                            br[j] += gr[offset + j];
                        }
                    }
                });
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                acc(grads, nodes, p, |buf| {
                    buf.iter_mut().zip(&g[offset..offset + len]).for_each(|(x, y)| *x += y)
                });
                offset += len;
            }
        }
        Op::Transpose(a) => {
            let (r, c) = matrix_dims(&nodes[*a].shape).unwrap();
            acc(grads, nodes, *a, |buf| {
                for i in 0..r {
                    for j in 0..c {
                        buf[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::WeightedLse { s, w } => {
            let sv = &nodes[*s].value;
            let (_, c) = matrix_dims(&nodes[*s].shape).unwrap();
            let out = &node.value;
            acc(grads, nodes, *s, |buf| {
                for (r, &o) in out.iter().enumerate() {
                    for j in 0..c {
                        let k = r * c + j;
                        if w[k] != 0.0 {
                            buf[k] += g[r] * w[k] * (sv[k] - o).exp();
                        }
                    }
                }
            });
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes()[self.id].shape.clone()
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes();
        Tensor::new(nodes[self.id].shape.clone(), nodes[self.id].value.clone()).expect("node shape")
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> f64 {
        let nodes = self.tape.nodes();
        assert_eq!(nodes[self.id].value.len(), 1, "item() on non-scalar");
        nodes[self.id].value[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(AutodiffError::ForeignVar)
        }
    }

    fn dims(&self, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.shape();
        matrix_dims(&shape).ok_or(AutodiffError::Rank { op, shape })
    }

    fn emit(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[usize]) -> Var<'t> {
        let rg = self.tape.rg(inputs);
        self.tape.push(shape, value, op, rg)
    }

    fn matmul_impl(&self, other: &Var<'t>, tb: bool, name: &'static str) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (r, k) = self.dims(name)?;
        let (rb, cb) = other.dims(name)?;
        let (k2, c) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(AutodiffError::Dimension {
                op: name,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let value = {
            let nodes = self.tape.nodes();
            let bm = mat(&nodes, other.id);
            kernels::matmul(mat(&nodes, self.id), if tb { bm.t() } else { bm })
        };
        Ok(self.emit(
            vec![r, c],
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta: false,
                tb,
            },
            &[self.id, other.id],
        ))
    }

    /// `self [r x k] * other [k x c]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false, "matmul")
    }

    /// `self [r x k] * other^T` where `other` is `[c x k]`.
    pub fn matmul_nt(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, true, "matmul_nt")
    }

    fn zip_same(&self, other: &Var<'t>, op: &'static str) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
        self.same_tape(other)?;
        let nodes = self.tape.nodes();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        if a.shape != b.shape {
            return Err(AutodiffError::Dimension {
                op,
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        Ok((a.shape.clone(), a.value.clone(), b.value.clone()))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (shape, mut a, b) = self.zip_same(other, "add")?;
        a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
        Ok(self.emit(shape, a, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (shape, mut a, b) = self.zip_same(other, "mul")?;
        a.iter_mut().zip(&b).for_each(|(x, y)| *x *= y);
        Ok(self.emit(shape, a, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    /// Adds a length-`c` row to every row of `self [r x c]`.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(row)?;
        let (r, c) = self.dims("add_row")?;
        let value = {
            let nodes = self.tape.nodes();
            if nodes[row.id].value.len() != c {
                return Err(AutodiffError::Dimension {
                    op: "add_row",
                    lhs: self.shape(),
                    rhs: nodes[row.id].shape.clone(),
                });
            }
            let mut v = nodes[self.id].value.clone();
            kernels::add_row_inplace(&mut v, &nodes[row.id].value);
            v
        };
        Ok(self.emit(
            vec![r, c],
            value,
            Op::AddRow {
                a: self.id,
                row: row.id,
            },
            &[self.id, row.id],
        ))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let (shape, value) = {
            let n = &self.tape.nodes()[self.id];
            (n.shape.clone(), n.value.iter().map(|v| v * c).collect())
        };
        self.emit(shape, value, Op::Scale(self.id, c), &[self.id])
    }

    /// Adds a constant tensor (no gradient flows into the constant).
    pub fn add_const(&self, c: &Tensor) -> Result<Var<'t>> {
        let (shape, mut value) = {
            let n = &self.tape.nodes()[self.id];
            (n.shape.clone(), n.value.clone())
        };
        if c.numel() != value.len() {
            return Err(AutodiffError::Dimension {
                op: "add_const",
                lhs: shape,
                rhs: c.shape().to_vec(),
            });
        }
        value.iter_mut().zip(c.data()).for_each(|(x, y)| *x += y);
        Ok(self.emit(shape, value, Op::AddConst(self.id), &[self.id]))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&self, c: &Tensor) -> Result<Var<'t>> {
        let (shape, mut value) = {
            let n = &self.tape.nodes()[self.id];
            (n.shape.clone(), n.value.clone())
        };
        if c.numel() != value.len() {
            return Err(AutodiffError::Dimension {
                op: "mul_const",
                lhs: shape,
                rhs: c.shape().to_vec(),
            });
        }
        value.iter_mut().zip(c.data()).for_each(|(x, y)| *x *= y);
        Ok(self.emit(shape, value, Op::MulConst(self.id, c.data().to_vec()), &[self.id]))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&self) -> Var<'t> {
        let (shape, mut value) = {
            let n = &self.tape.nodes()[self.id];
            (n.shape.clone(), n.value.clone())
        };
        kernels::relu_inplace(&mut value);
        self.emit(shape, value, Op::Relu(self.id), &[self.id])
    }

    /// Row-wise softmax, stabilized by subtracting each row's max.
    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let (_, c) = self.dims("softmax_rows")?;
        if c == 0 {
            return Err(AutodiffError::EmptyInput { op: "softmax_rows" });
        }
        let (shape, mut value) = {
            let n = &self.tape.nodes()[self.id];
            (n.shape.clone(), n.value.clone())
        };
        if value.iter().any(|v| v.is_nan()) {
            return Err(AutodiffError::InvalidValue { op: "softmax_rows" });
        }
        kernels::softmax_rows_inplace(&mut value, c);
        Ok(self.emit(shape, value, Op::Softmax(self.id), &[self.id]))
    }

    /// Per-row normalization to zero mean and unit variance, then `gain * x + bias`.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(gain)?;
        self.same_tape(bias)?;
        let (r, d) = self.dims("layer_norm")?;
        if d == 0 {
            return Err(AutodiffError::EmptyInput { op: "layer_norm" });
        }
        let (value, xhat, rstd) = {
            let nodes = self.tape.nodes();
            for p in [gain, bias] {
                if nodes[p.id].value.len() != d {
                    return Err(AutodiffError::Dimension {
                        op: "layer_norm",
                        lhs: nodes[self.id].shape.clone(),
                        rhs: nodes[p.id].shape.clone(),
                    });
                }
            }
            kernels::layer_norm_rows(
                &nodes[self.id].value,
                d,
                &nodes[gain.id].value,
                &nodes[bias.id].value,
                eps,
            )
        };
        let shape = if self.shape().len() == 1 { vec![d] } else { vec![r, d] };
        Ok(self.emit(
            shape,
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            &[self.id, gain.id, bias.id],
        ))
    }

    /// Mean over rows of `[r x c]`, giving a length-`c` vector.
    pub fn mean_rows(&self) -> Result<Var<'t>> {
        let (r, c) = self.dims("mean_rows")?;
        let mut value = vec![0.0; c];
        {
            let nodes = self.tape.nodes();
            for row in nodes[self.id].value.chunks(c) {
                value.iter_mut().zip(row).for_each(|(x, y)| *x += y);
            }
        }
        value.iter_mut().for_each(|v| *v /= r as f64);
        Ok(self.emit(vec![c], value, Op::MeanRows(self.id), &[self.id]))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Var<'t> {
        let s = self.tape.nodes()[self.id].value.iter().sum();
        self.emit(Vec::new(), vec![s], Op::Sum(self.id), &[self.id])
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let (r, c) = self.dims("slice_cols")?;
        if start + len > c || len == 0 {
            return Err(AutodiffError::Dimension {
                op: "slice_cols",
                lhs: self.shape(),
                rhs: vec![start, len],
            });
        }
        let value = {
            let nodes = self.tape.nodes();
            nodes[self.id]
                .value
                .chunks(c)
                .flat_map(|row| row[start..start + len].iter().copied())
                .collect()
        };
        Ok(self.emit(vec![r, len], value, Op::SliceCols { a: self.id, start }, &[self.id]))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t>> {
        let value = self.tape.nodes()[self.id].value.clone();
        if shape.iter().product::<usize>() != value.len() || shape.contains(&0) {
            return Err(AutodiffError::ShapeData {
                shape,
                len: value.len(),
            });
        }
        Ok(self.emit(shape, value, Op::Reshape(self.id), &[self.id]))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let (r, c) = self.dims("transpose")?;
        let mut value = vec![0.0; r * c];
        {
            let nodes = self.tape.nodes();
            let v = &nodes[self.id].value;
            for i in 0..r {
                for j in 0..c {
                    value[j * r + i] = v[i * c + j];
                }
            }
        }
        Ok(self.emit(vec![c, r], value, Op::Transpose(self.id), &[self.id]))
    }

    /// Each row divided by its Euclidean norm (floored at [`NORM_CLAMP`]).
    pub fn normalize_rows(&self) -> Result<Var<'t>> {
        let (r, c) = self.dims("normalize_rows")?;
        let (shape, mut value) = {
            let n = &self.tape.nodes()[self.id];
            (n.shape.clone(), n.value.clone())
        };
        let mut norms = Vec::with_capacity(r);
        for row in value.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            let denom = n.max(NORM_CLAMP);
            row.iter_mut().for_each(|v| *v /= denom);
        }
        Ok(self.emit(shape, value, Op::NormalizeRows { a: self.id, norms }, &[self.id]))
    }

    /// `cos(self, other)` for equal-length vectors; norms are floored at [`NORM_CLAMP`].
    pub fn cosine_sim(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let value = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.len() != b.len() {
                return Err(AutodiffError::Dimension {
                    op: "cosine_sim",
                    lhs: nodes[self.id].shape.clone(),
                    rhs: nodes[other.id].shape.clone(),
                });
            }
            cosine(a, b)
        };
        Ok(self.emit(
            Vec::new(),
            vec![value],
            Op::Cosine {
                a: self.id,
                b: other.id,
            },
            &[self.id, other.id],
        ))
    }

    /// Rows of `self [v x d]` selected by `ids`, giving `[ids.len() x d]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'t>> {
        let (v, d) = self.dims("gather_rows")?;
        if ids.is_empty() {
            return Err(AutodiffError::EmptyInput { op: "gather_rows" });
        }
        let mut value = Vec::with_capacity(ids.len() * d);
        {
            let nodes = self.tape.nodes();
            let table = &nodes[self.id].value;
            for &i in ids {
                if i >= v {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: "gather_rows",
                        index: i,
                        len: v,
                    });
                }
                value.extend_from_slice(&table[i * d..(i + 1) * d]);
            }
        }
        Ok(self.emit(
            vec![ids.len(), d],
            value,
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Mean negative log-likelihood of the target column of each row.
    ///
    /// `self` holds probabilities; `None` rows are excluded from the mean.
    /// Probabilities are clamped to [`PROB_CLAMP`] before the log.
    pub fn nll_rows(&self, targets: &[Option<usize>]) -> Result<Var<'t>> {
        let (r, c) = self.dims("nll_rows")?;
        if targets.len() != r {
            return Err(AutodiffError::Dimension {
                op: "nll_rows",
                lhs: self.shape(),
                rhs: vec![targets.len()],
            });
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(AutodiffError::EmptyInput { op: "nll_rows" });
        }
        let mut total = 0.0;
        {
            let nodes = self.tape.nodes();
            let p = &nodes[self.id].value;
            for (row, t) in targets.iter().enumerate() {
                if let Some(j) = *t {
                    if j >= c {
                        return Err(AutodiffError::IndexOutOfRange {
                            op: "nll_rows",
                            index: j,
                            len: c,
                        });
                    }
                    total -= p[row * c + j].max(PROB_CLAMP).ln();
                }
            }
        }
        Ok(self.emit(
            Vec::new(),
            vec![total / count as f64],
            Op::Nll {
                p: self.id,
                targets: targets.to_vec(),
                count,
            },
            &[self.id],
        ))
    }

    /// `-(1/r) sum_ij y_ij log p_ij` for one-hot targets `y`.
    pub fn cross_entropy_rows(&self, y: &Tensor) -> Result<Var<'t>> {
        let (r, c) = self.dims("cross_entropy_rows")?;
        if y.dims2()? != (r, c) {
            return Err(AutodiffError::Dimension {
                op: "cross_entropy_rows",
                lhs: self.shape(),
                rhs: y.shape().to_vec(),
            });
        }
        let targets = one_hot_targets(y, "cross_entropy_rows")?;
        self.nll_rows(&targets.into_iter().map(Some).collect::<Vec<_>>())
    }

    /// Row-wise `log sum_j w_ij exp(s_ij)` with non-negative constant weights.
    ///
    /// Every row needs at least one positive weight.
    pub fn weighted_logsumexp_rows(&self, w: &Tensor) -> Result<Var<'t>> {
        let (r, c) = self.dims("weighted_logsumexp_rows")?;
        if w.numel() != r * c {
            return Err(AutodiffError::Dimension {
                op: "weighted_logsumexp_rows",
                lhs: self.shape(),
                rhs: w.shape().to_vec(),
            });
        }
        let wd = w.data();
        let mut value = Vec::with_capacity(r);
        {
            let nodes = self.tape.nodes();
            let s = &nodes[self.id].value;
            for i in 0..r {
                let row = &s[i * c..(i + 1) * c];
                let wr = &wd[i * c..(i + 1) * c];
                if row.iter().any(|v| v.is_nan()) {
                    return Err(AutodiffError::InvalidValue {
                        op: "weighted_logsumexp_rows",
                    });
                }
                let max = row
                    .iter()
                    .zip(wr)
                    .filter(|(_, &w)| w > 0.0)
                    .map(|(s, _)| *s)
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(AutodiffError::EmptyInput {
                        op: "weighted_logsumexp_rows",
                    });
                }
                let sum: f64 = row.iter().zip(wr).map(|(s, w)| w * (s - max).exp()).sum();
                value.push(max + sum.ln());
            }
        }
        Ok(self.emit(
            vec![r],
            value,
            Op::WeightedLse {
                s: self.id,
                w: wd.to_vec(),
            },
            &[self.id],
        ))
    }
}

/// Elementwise maximum over equally-shaped inputs. The gradient of each
/// output element goes to the first input holding the maximum.
pub fn max_pool<'t>(inputs: &[Var<'t>]) -> Result<Var<'t>> {
    let first = inputs.first().ok_or(AutodiffError::EmptyInput { op: "max_pool" })?;
    let shape = first.shape();
    for v in inputs {
        first.same_tape(v)?;
        if v.shape() != shape {
            return Err(AutodiffError::Dimension {
                op: "max_pool",
                lhs: shape,
                rhs: v.shape(),
            });
        }
    }
    let (value, winner) = {
        let nodes = first.tape.nodes();
        let mut value = nodes[first.id].value.clone();
        let mut winner = vec![0; value.len()];
        for (k, v) in inputs.iter().enumerate().skip(1) {
            for (e, &x) in nodes[v.id].value.iter().enumerate() {
                if x > value[e] {
                    value[e] = x;
                    winner[e] = k;
                }
            }
        }
        (value, winner)
    };
    let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
    Ok(first.emit(
        shape,
        value,
        Op::MaxPool {
            inputs: ids.clone(),
            winner,
        },
        &ids,
    ))
}

/// Concatenates `[r x c_i]` inputs along columns.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or(AutodiffError::EmptyInput { op: "concat_cols" })?;
    let (r, _) = first.dims("concat_cols")?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        first.same_tape(p)?;
        let (pr, pc) = p.dims("concat_cols")?;
        if pr != r {
            return Err(AutodiffError::Dimension {
                op: "concat_cols",
                lhs: first.shape(),
                rhs: p.shape(),
            });
        }
        widths.push(pc);
    }
    let total: usize = widths.iter().sum();
    let mut value = vec![0.0; r * total];
    {
        let nodes = first.tape.nodes();
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            for (i, row) in nodes[p.id].value.chunks(w).enumerate() {
                value[i * total + offset..i * total + offset + w].copy_from_slice(row);
            }
            offset += w;
        }
    }
    let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
    Ok(first.emit(vec![r, total], value, Op::ConcatCols(ids.clone()), &ids))
}

/// Stacks `[r_i x c]` inputs (vectors count as one row) along rows.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or(AutodiffError::EmptyInput { op: "concat_rows" })?;
    let (_, c) = first.dims("concat_rows")?;
    let mut rows = 0;
    for p in parts {
        first.same_tape(p)?;
        let (pr, pc) = p.dims("concat_rows")?;
        if pc != c {
            return Err(AutodiffError::Dimension {
                op: "concat_rows",
                lhs: first.shape(),
                rhs: p.shape(),
            });
        }
        rows += pr;
    }
    let mut value = Vec::with_capacity(rows * c);
    {
        let nodes = first.tape.nodes();
        for p in parts {
            value.extend_from_slice(&nodes[p.id].value);
        }
    }
    let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
    Ok(first.emit(vec![rows, c], value, Op::ConcatRows(ids.clone()), &ids))
}

/// Plain cosine similarity with norms floored at [`NORM_CLAMP`].
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_CLAMP);
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_CLAMP);
    dot / (na * nb)
}

/// Column index of the single 1 in each row of a one-hot matrix.
pub fn one_hot_targets(y: &Tensor, op: &'static str) -> Result<Vec<usize>> {
    let (r, c) = y.dims2()?;
    (0..r)
        .map(|i| {
            let row = &y.data()[i * c..(i + 1) * c];
            let ones: Vec<usize> = (0..c).filter(|&j| row[j] == 1.0).collect();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones.len() == 1 && zeros == c - 1 {
                Ok(ones[0])
            } else {
                Err(AutodiffError::Label { op, row: i })
            }
        })
        .collect()
}
