//! Tape-based reverse-mode automatic differentiation over rank-2 f64 tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Values are
//! computed eagerly; [`Tape::backward`] walks the record in reverse and returns
//! gradients for every leaf that was registered with `requires_grad`.
//!
//! Only the operations the transformer and the distillation loss need are
//! provided. Rows are sequence positions (possibly several sequences stacked),
//! columns are features.

use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};
use crate::numerics::tensor::{gemm, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    ReluSq(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        seq_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    ConcatCols(usize, usize),
    SliceCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records a computation graph. Single-owner: one tape per worker.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    backward_done: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients produced by [`Tape::backward`], keyed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of a leaf registered with `requires_grad`; `None` for frozen
    /// leaves and for intermediate values.
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        let (r, c) = self.shapes[var.id];
        self.grads[var.id]
            .as_ref()
            .map(|g| Tensor::matrix(r, c, g.clone()).expect("gradient shape"))
    }

    /// Gradient as a flat vector, zeros when the leaf received no signal.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Vec<f64> {
        let (r, c) = self.shapes[var.id];
        self.grads[var.id].clone().unwrap_or_else(|| vec![0.0; r * c])
    }
}

fn as_matrix_shape(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
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

    fn push(&self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        debug_assert_eq!(value.len(), rows * cols);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Registers a tensor, honoring its `requires_grad` flag.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        let (r, c) = as_matrix_shape(t);
        self.push(r, c, t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Registers a trainable leaf regardless of the tensor's flag.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        let (r, c) = as_matrix_shape(t);
        self.push(r, c, t.data().to_vec(), Op::Leaf, true)
    }

    /// Registers a leaf that never receives gradients.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        let (r, c) = as_matrix_shape(t);
        self.push(r, c, t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var<'_>> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "constant of {rows}x{cols} given {} values",
                data.len()
            )));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    /// Clears the "already differentiated" flag so `backward` may run again.
    pub fn reset_backward(&self) {
        self.backward_done.set(false);
    }

    /// Back-propagates from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Autograd("loss belongs to a different tape".into()));
        }
        if self.backward_done.get() {
            return Err(Error::Autograd(
                "backward already ran on this tape; call reset_backward first".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.rows * root.cols != 1 {
            return Err(Error::Autograd(format!(
                "loss must be a scalar, got {}x{}",
                root.rows, root.cols
            )));
        }
        self.backward_done.set(true);

        let n = nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
        }

        let shapes = nodes.iter().map(|n| (n.rows, n.cols)).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].rows * nodes[id].cols]);
    f(slot);
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let (rows, cols) = (node.rows, node.cols);
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k, n) = (nodes[*a].rows, nodes[*a].cols, nodes[*b].cols);
            let bv = &nodes[*b].value;
            accumulate(grads, nodes, *a, |ga| {
                gemm(m, n, k, 1.0, g, (n, 1), bv, (1, n), 1.0, ga)
            });
            let av = &nodes[*a].value;
            accumulate(grads, nodes, *b, |gb| {
                gemm(k, m, n, 1.0, av, (1, k), g, (n, 1), 1.0, gb)
            });
        }
        Op::MatMulT(a, b) => {
            // c = a · bᵀ with a: m×k, b: n×k
            let (m, k, n) = (nodes[*a].rows, nodes[*a].cols, nodes[*b].rows);
            let bv = &nodes[*b].value;
            accumulate(grads, nodes, *a, |ga| {
                gemm(m, n, k, 1.0, g, (n, 1), bv, (k, 1), 1.0, ga)
            });
            let av = &nodes[*a].value;
            accumulate(grads, nodes, *b, |gb| {
                gemm(n, m, k, 1.0, g, (1, n), av, (k, 1), 1.0, gb)
            });
        }
        Op::Add(a, b) => {
            for id in [*a, *b] {
                accumulate(grads, nodes, id, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
        }
        Op::AddRow(a, bias) => {
            accumulate(grads, nodes, *a, |ga| {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            });
            accumulate(grads, nodes, *bias, |gb| {
                for r in 0..rows {
                    for (x, y) in gb.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                        *x += y;
                    }
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * bv[i];
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] += g[i] * av[i];
                }
            });
        }
        Op::Scale(a, s) => {
            accumulate(grads, nodes, *a, |ga| {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += s * y;
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => {
            let xv = &nodes[*x].value;
            let gv = &nodes[*gamma].value;
            let n = cols as f64;
            let xhat = |r: usize, c: usize| (xv[r * cols + c] - mean[r]) * rstd[r];
            accumulate(grads, nodes, *gamma, |gg| {
                for r in 0..rows {
                    for c in 0..cols {
                        gg[c] += g[r * cols + c] * xhat(r, c);
                    }
                }
            });
            accumulate(grads, nodes, *beta, |gb| {
                for r in 0..rows {
                    for c in 0..cols {
                        gb[c] += g[r * cols + c];
                    }
                }
            });
            accumulate(grads, nodes, *x, |gx| {
                for r in 0..rows {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..cols {
                        let d = g[r * cols + c] * gv[c];
                        mean_d += d;
                        mean_dx += d * xhat(r, c);
                    }
                    mean_d /= n;
                    mean_dx /= n;
                    for c in 0..cols {
                        let d = g[r * cols + c] * gv[c];
                        gx[r * cols + c] += rstd[r] * (d - mean_d - xhat(r, c) * mean_dx);
                    }
                }
            });
        }
        Op::ReluSq(a) => {
            let av = &nodes[*a].value;
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..ga.len() {
                    if av[i] > 0.0 {
                        ga[i] += 2.0 * av[i] * g[i];
                    }
                }
            });
        }
        Op::SoftmaxRows(a) => {
            let y = &node.value;
            accumulate(grads, nodes, *a, |ga| {
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        ga[r * cols + c] += yr[c] * (gr[c] - dot);
                    }
                }
            });
        }
        Op::LogSoftmaxRows(a) => {
            let y = &node.value;
            accumulate(grads, nodes, *a, |ga| {
                for r in 0..rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let total: f64 = gr.iter().sum();
                    for c in 0..cols {
                        ga[r * cols + c] += gr[c] - y[r * cols + c].exp() * total;
                    }
                }
            });
        }
        Op::Attention {
            q,
            k,
            v,
            seq_len,
            heads,
            probs,
        } => {
            attention_backward(nodes, grads, g, (*q, *k, *v), *seq_len, *heads, probs, cols);
        }
        Op::ConcatCols(a, b) => {
            let ca = nodes[*a].cols;
            let cb = nodes[*b].cols;
            accumulate(grads, nodes, *a, |ga| {
                for r in 0..rows {
                    for c in 0..ca {
                        ga[r * ca + c] += g[r * cols + c];
                    }
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for r in 0..rows {
                    for c in 0..cb {
                        gb[r * cb + c] += g[r * cols + ca + c];
                    }
                }
            });
        }
        Op::SliceCols(a, start) => {
            let ca = nodes[*a].cols;
            accumulate(grads, nodes, *a, |ga| {
                for r in 0..rows {
                    for c in 0..cols {
                        ga[r * ca + start + c] += g[r * cols + c];
                    }
                }
            });
        }
        Op::GatherRows(a, idx) => {
            accumulate(grads, nodes, *a, |ga| {
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..cols {
                        ga[src * cols + c] += g[r * cols + c];
                    }
                }
            });
        }
        Op::Sum(a) => {
            accumulate(grads, nodes, *a, |ga| {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            });
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    (q, k, v): (usize, usize, usize),
    seq_len: usize,
    heads: usize,
    probs: &[f64],
    d: usize,
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n_seq = nodes[q].rows / seq_len;
    let (qv, kv, vv) = (&nodes[q].value, &nodes[k].value, &nodes[v].value);
    let mut dq = vec![0.0; qv.len()];
    let mut dk = vec![0.0; kv.len()];
    let mut dv = vec![0.0; vv.len()];
    let mut dp = vec![0.0; seq_len];
    for s in 0..n_seq {
        for h in 0..heads {
            let off = h * dh;
            let pbase = (s * heads + h) * seq_len * seq_len;
            for i in 0..seq_len {
                let ri = (s * seq_len + i) * d + off;
                let prow = &probs[pbase + i * seq_len..pbase + (i + 1) * seq_len];
                let gi = &g[ri..ri + dh];
                for j in 0..seq_len {
                    let rj = (s * seq_len + j) * d + off;
                    dp[j] = dot(gi, &vv[rj..rj + dh]);
                    axpy(&mut dv[rj..rj + dh], prow[j], gi);
                }
                let pd: f64 = prow.iter().zip(&dp).map(|(p, d)| p * d).sum();
                for j in 0..seq_len {
                    let ds = prow[j] * (dp[j] - pd) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let rj = (s * seq_len + j) * d + off;
                    axpy(&mut dq[ri..ri + dh], ds, &kv[rj..rj + dh]);
                    axpy(&mut dk[rj..rj + dh], ds, &qv[ri..ri + dh]);
                }
            }
        }
    }
    for (id, delta) in [(q, dq), (k, dk), (v, dv)] {
        accumulate(grads, nodes, id, |gx| {
            for (x, y) in gx.iter_mut().zip(&delta) {
                *x += y;
            }
        });
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> (usize, usize) {
        let nodes = self.tape.nodes.borrow();
        (nodes[self.id].rows, nodes[self.id].cols)
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node shape")
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        nodes[self.id].value[0]
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    fn unary(
        &self,
        f: impl FnOnce(&Node) -> (usize, usize, Vec<f64>, Op),
    ) -> Var<'t> {
        let (r, c, value, op, needs) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let (r, c, value, op) = f(n);
            (r, c, value, op, n.needs_grad)
        };
        self.tape.push(r, c, value, op, needs)
    }

    fn binary(
        &self,
        other: Var<'t>,
        f: impl FnOnce(&Node, &Node) -> (usize, usize, Vec<f64>, Op),
    ) -> Var<'t> {
        self.same_tape(&other);
        let (r, c, value, op, needs) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (r, c, value, op) = f(a, b);
            (r, c, value, op, a.needs_grad || b.needs_grad)
        };
        self.tape.push(r, c, value, op, needs)
    }

    /// `self · other` for `self: m×k`, `other: k×n`.
    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        let (a_id, b_id) = (self.id, other.id);
        self.binary(other, |a, b| {
            assert_eq!(a.cols, b.rows, "matmul inner dimension");
            let (m, k, n) = (a.rows, a.cols, b.cols);
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, 1.0, &a.value, (k, 1), &b.value, (n, 1), 0.0, &mut out);
            (m, n, out, Op::MatMul(a_id, b_id))
        })
    }

    /// `self · otherᵀ` for `self: m×k`, `other: n×k`.
    pub fn matmul_t(&self, other: Var<'t>) -> Var<'t> {
        let (a_id, b_id) = (self.id, other.id);
        self.binary(other, |a, b| {
            assert_eq!(a.cols, b.cols, "matmul_t inner dimension");
            let (m, k, n) = (a.rows, a.cols, b.rows);
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, 1.0, &a.value, (k, 1), &b.value, (1, k), 0.0, &mut out);
            (m, n, out, Op::MatMulT(a_id, b_id))
        })
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        let (a_id, b_id) = (self.id, other.id);
        self.binary(other, |a, b| {
            assert_eq!((a.rows, a.cols), (b.rows, b.cols), "add shapes");
            let out = a.value.iter().zip(&b.value).map(|(x, y)| x + y).collect();
            (a.rows, a.cols, out, Op::Add(a_id, b_id))
        })
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        self.add(other.scale(-1.0))
    }

    /// Adds a `1×cols` row to every row of `self`.
    pub fn add_row(&self, bias: Var<'t>) -> Var<'t> {
        let (a_id, b_id) = (self.id, bias.id);
        self.binary(bias, |a, b| {
            assert_eq!(b.rows * b.cols, a.cols, "bias width");
            let mut out = a.value.clone();
            for r in 0..a.rows {
                for (x, y) in out[r * a.cols..(r + 1) * a.cols].iter_mut().zip(&b.value) {
                    *x += y;
                }
            }
            (a.rows, a.cols, out, Op::AddRow(a_id, b_id))
        })
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        let (a_id, b_id) = (self.id, other.id);
        self.binary(other, |a, b| {
            assert_eq!((a.rows, a.cols), (b.rows, b.cols), "mul shapes");
            let out = a.value.iter().zip(&b.value).map(|(x, y)| x * y).collect();
            (a.rows, a.cols, out, Op::Mul(a_id, b_id))
        })
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let id = self.id;
        self.unary(|a| {
            let out = a.value.iter().map(|x| x * s).collect();
            (a.rows, a.cols, out, Op::Scale(id, s))
        })
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (each `1×cols`).
    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>) -> Var<'t> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let (x_id, g_id, b_id) = (self.id, gamma.id, beta.id);
        let (r, c, out, op, needs) = {
            let nodes = self.tape.nodes.borrow();
            let (x, gm, bt) = (&nodes[x_id], &nodes[g_id], &nodes[b_id]);
            assert_eq!(gm.value.len(), x.cols, "layer norm gamma width");
            assert_eq!(bt.value.len(), x.cols, "layer norm beta width");
            let cols = x.cols;
            let mut mean = Vec::with_capacity(x.rows);
            let mut rstd = Vec::with_capacity(x.rows);
            let mut out = vec![0.0; x.value.len()];
            for r in 0..x.rows {
                let row = &x.value[r * cols..(r + 1) * cols];
                let mu = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
                let rs = 1.0 / (var + LN_EPS).sqrt();
                for c in 0..cols {
                    out[r * cols + c] = (row[c] - mu) * rs * gm.value[c] + bt.value[c];
                }
                mean.push(mu);
                rstd.push(rs);
            }
            (
                x.rows,
                cols,
                out,
                Op::LayerNorm {
                    x: x_id,
                    gamma: g_id,
                    beta: b_id,
                    mean,
                    rstd,
                },
                x.needs_grad || gm.needs_grad || bt.needs_grad,
            )
        };
        self.tape.push(r, c, out, op, needs)
    }

    /// `max(0, x)²`, element-wise.
    pub fn relu_sq(&self) -> Var<'t> {
        let id = self.id;
        self.unary(|a| {
            let out = a
                .value
                .iter()
                .map(|&x| if x > 0.0 { x * x } else { 0.0 })
                .collect();
            (a.rows, a.cols, out, Op::ReluSq(id))
        })
    }

    pub fn softmax_rows(&self) -> Var<'t> {
        let id = self.id;
        self.unary(|a| {
            let mut out = a.value.clone();
            for r in 0..a.rows {
                softmax_in_place(&mut out[r * a.cols..(r + 1) * a.cols]);
            }
            (a.rows, a.cols, out, Op::SoftmaxRows(id))
        })
    }

    pub fn log_softmax_rows(&self) -> Var<'t> {
        let id = self.id;
        self.unary(|a| {
            let mut out = a.value.clone();
            for r in 0..a.rows {
                let row = &mut out[r * a.cols..(r + 1) * a.cols];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                for z in row.iter_mut() {
                    *z -= lse;
                }
            }
            (a.rows, a.cols, out, Op::LogSoftmaxRows(id))
        })
    }

    /// Bidirectional multi-head scaled dot-product attention.
    ///
    /// `self`, `k`, `v` are `(n_seq * seq_len) × d`; every block of `seq_len`
    /// consecutive rows is one sequence and attends only within itself.
    pub fn attention(&self, k: Var<'t>, v: Var<'t>, seq_len: usize, heads: usize) -> Var<'t> {
        self.same_tape(&k);
        self.same_tape(&v);
        let (q_id, k_id, v_id) = (self.id, k.id, v.id);
        let (r, c, out, op, needs) = {
            let nodes = self.tape.nodes.borrow();
            let (qn, kn, vn) = (&nodes[q_id], &nodes[k_id], &nodes[v_id]);
            assert_eq!((qn.rows, qn.cols), (kn.rows, kn.cols), "attention q/k shapes");
            assert_eq!((qn.rows, qn.cols), (vn.rows, vn.cols), "attention q/v shapes");
            assert!(seq_len > 0 && qn.rows % seq_len == 0, "attention seq_len");
            assert!(heads > 0 && qn.cols % heads == 0, "attention heads");
            let d = qn.cols;
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let n_seq = qn.rows / seq_len;
            let mut probs = vec![0.0; n_seq * heads * seq_len * seq_len];
            let mut out = vec![0.0; qn.value.len()];
            let mut block = vec![0.0; seq_len * dh];
            let ll = seq_len * seq_len;
            for s in 0..n_seq {
                for h in 0..heads {
                    let start = s * seq_len * d + h * dh;
                    let pbase = (s * heads + h) * ll;
                    let p = &mut probs[pbase..pbase + ll];
                    gemm(seq_len, dh, seq_len, scale, &qn.value[start..], (d, 1), &kn.value[start..], (1, d), 0.0, p);
                    for row in p.chunks_exact_mut(seq_len) {
                        softmax_in_place(row);
                    }
                    gemm(seq_len, seq_len, dh, 1.0, p, (seq_len, 1), &vn.value[start..], (d, 1), 0.0, &mut block);
                    for (i, b) in block.chunks_exact(dh).enumerate() {
                        let ri = start + i * d;
                        out[ri..ri + dh].copy_from_slice(b);
                    }
                }
            }
            (
                qn.rows,
                d,
                out,
                Op::Attention {
                    q: q_id,
                    k: k_id,
                    v: v_id,
                    seq_len,
                    heads,
                    probs,
                },
                qn.needs_grad || kn.needs_grad || vn.needs_grad,
            )
        };
        self.tape.push(r, c, out, op, needs)
    }

    pub fn concat_cols(&self, other: Var<'t>) -> Var<'t> {
        let (a_id, b_id) = (self.id, other.id);
        self.binary(other, |a, b| {
            assert_eq!(a.rows, b.rows, "concat rows");
            let cols = a.cols + b.cols;
            let mut out = Vec::with_capacity(a.rows * cols);
            for r in 0..a.rows {
                out.extend_from_slice(&a.value[r * a.cols..(r + 1) * a.cols]);
                out.extend_from_slice(&b.value[r * b.cols..(r + 1) * b.cols]);
            }
            (a.rows, cols, out, Op::ConcatCols(a_id, b_id))
        })
    }

    pub fn slice_cols(&self, start: usize, width: usize) -> Var<'t> {
        let id = self.id;
        self.unary(|a| {
            assert!(start + width <= a.cols, "slice_cols out of range");
            let mut out = Vec::with_capacity(a.rows * width);
            for r in 0..a.rows {
                out.extend_from_slice(&a.value[r * a.cols + start..r * a.cols + start + width]);
            }
            (a.rows, width, out, Op::SliceCols(id, start))
        })
    }

    /// Selects rows by index (embedding lookup when `self` is a table).
    pub fn gather_rows(&self, idx: &[usize]) -> Var<'t> {
        let id = self.id;
        let idx = idx.to_vec();
        self.unary(|a| {
            let mut out = Vec::with_capacity(idx.len() * a.cols);
            for &i in &idx {
                assert!(i < a.rows, "gather index {i} out of {} rows", a.rows);
                out.extend_from_slice(&a.value[i * a.cols..(i + 1) * a.cols]);
            }
            (idx.len(), a.cols, out, Op::GatherRows(id, idx))
        })
    }

    pub fn sum(&self) -> Var<'t> {
        let id = self.id;
        self.unary(|a| (1, 1, vec![a.value.iter().sum()], Op::Sum(id)))
    }
}

/// Dot product with four independent partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ar.iter().zip(br) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += a * x`.
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in row.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in row.iter_mut() {
        *z /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngStream;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    /// Central finite differences of `f` with respect to every entry of `inputs[which]`.
    fn numeric_grad(
        inputs: &[Tensor],
        which: usize,
        f: for<'t> fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
    ) -> Vec<f64> {
        let h = 1e-5;
        let mut out = Vec::new();
        for i in 0..inputs[which].numel() {
            let eval = |delta: f64| {
                let mut shifted = inputs.to_vec();
                shifted[which].data_mut()[i] += delta;
                let tape = Tape::new();
                let vars: Vec<_> = shifted.iter().map(|t| tape.constant(t)).collect();
                f(&tape, &vars).scalar()
            };
            out.push((eval(h) - eval(-h)) / (2.0 * h));
        }
        out
    }

    fn check(inputs: Vec<Tensor>, build: for<'t> fn(&'t Tape, &[Var<'t>]) -> Var<'t>) {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t)).collect();
        let loss = build(&tape, &vars);
        let grads = tape.backward(loss).unwrap();
        for (which, v) in vars.iter().enumerate() {
            let analytic = grads.get_or_zeros(*v);
            let numeric = numeric_grad(&inputs, which, build);
            for (a, n) in analytic.iter().zip(&numeric) {
                let denom = a.abs().max(n.abs()).max(1e-4);
                assert!(
                    (a - n).abs() / denom < 1e-6,
                    "input {which}: analytic {a} vs numeric {n}"
                );
            }
        }
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::zeros(&[2, 2]));
        let loss = x.sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn unused_parameter_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::full(&[1, 3], 2.0));
        let y = tape.param(&Tensor::full(&[1, 3], 1.0));
        let loss = x.mul(x).sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.get_or_zeros(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn frozen_leaf_has_no_gradient() {
        let tape = Tape::new();
        let w = tape.constant(&Tensor::full(&[2, 2], 1.0));
        let x = tape.param(&Tensor::full(&[1, 2], 1.0));
        let loss = x.matmul(w).sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(w).is_none());
        assert!(g.get(x).is_some());
    }

    #[test]
    fn backward_twice_requires_reset() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::full(&[1, 2], 1.0));
        let loss = x.sum();
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
        tape.reset_backward();
        assert!(tape.backward(loss).is_ok());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::full(&[1, 2], 1.0));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn kl_through_softmax_matches_finite_differences() {
        let mut rng = RngStream::new(3, 0);
        let target = {
            let mut t = randn(1, 5, &mut rng);
            softmax_in_place(t.data_mut());
            t
        };
        let w = randn(1, 5, &mut rng);
        // KL(p ‖ softmax(w)) = Σ p ln p − Σ p · log_softmax(w)
        let tape = Tape::new();
        let p = tape.constant(&target);
        let wv = tape.param(&w);
        let loss = p.mul(wv.log_softmax_rows()).sum().scale(-1.0);
        let g = tape.backward(loss).unwrap().get(wv).unwrap();
        let h = 1e-5;
        for i in 0..5 {
            let eval = |delta: f64| {
                let mut ww = w.clone();
                ww.data_mut()[i] += delta;
                let mut q = ww.data().to_vec();
                softmax_in_place(&mut q);
                target
                    .data()
                    .iter()
                    .zip(&q)
                    .map(|(pv, qv)| pv * (pv / qv).ln())
                    .sum::<f64>()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = g.data()[i];
            assert!((a - numeric).abs() / a.abs().max(1e-4) < 1e-6, "{a} vs {numeric}");
        }
    }

    #[test]
    fn gradient_checks_for_every_op() {
        let mut rng = RngStream::new(11, 0);
        for _ in 0..3 {
            check(vec![randn(3, 4, &mut rng), randn(4, 2, &mut rng)], |_, v| {
                v[0].matmul(v[1]).sum()
            });
            check(vec![randn(3, 4, &mut rng), randn(5, 4, &mut rng)], |_, v| {
                v[0].matmul_t(v[1]).mul(v[0].matmul_t(v[1])).sum()
            });
            check(vec![randn(2, 3, &mut rng), randn(1, 3, &mut rng)], |_, v| {
                v[0].add_row(v[1]).mul(v[0]).sum()
            });
            check(
                vec![randn(3, 6, &mut rng), randn(1, 6, &mut rng), randn(1, 6, &mut rng), randn(3, 6, &mut rng)],
                |_, v| v[0].layer_norm(v[1], v[2]).mul(v[3]).sum(),
            );
            check(vec![randn(3, 4, &mut rng), randn(3, 4, &mut rng)], |_, v| {
                v[0].relu_sq().mul(v[1]).sum()
            });
            check(vec![randn(3, 4, &mut rng), randn(3, 4, &mut rng)], |_, v| {
                v[0].softmax_rows().mul(v[1]).sum()
            });
            check(vec![randn(3, 4, &mut rng), randn(3, 4, &mut rng)], |_, v| {
                v[0].log_softmax_rows().mul(v[1]).sum()
            });
            check(
                vec![randn(8, 4, &mut rng), randn(8, 4, &mut rng), randn(8, 4, &mut rng), randn(8, 4, &mut rng)],
                |_, v| v[0].attention(v[1], v[2], 4, 2).mul(v[3]).sum(),
            );
            check(vec![randn(3, 2, &mut rng), randn(3, 3, &mut rng), randn(3, 5, &mut rng)], |_, v| {
                v[0].concat_cols(v[1]).mul(v[2]).sum()
            });
            check(vec![randn(3, 5, &mut rng), randn(3, 2, &mut rng)], |_, v| {
                v[0].slice_cols(2, 2).mul(v[1]).sum()
            });
            check(vec![randn(4, 3, &mut rng), randn(5, 3, &mut rng)], |_, v| {
                v[0].gather_rows(&[1, 3, 1, 0, 2]).mul(v[1]).sum()
            });
            check(vec![randn(2, 3, &mut rng), randn(2, 3, &mut rng)], |_, v| {
                v[0].sub(v[1]).scale(0.7).mul(v[0]).sum()
            });
        }
    }
}
