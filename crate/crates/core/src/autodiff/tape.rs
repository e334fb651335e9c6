use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::gemm;
use super::{AutodiffError, ParamId, ParamStore, Tensor};

/// Axis selector for [`Tape::concat`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Stack matrices vertically (equal column counts).
    Rows,
    /// Join along the last axis (equal row counts; vectors join end to end).
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Tanh(usize),
    Sigmoid(usize),
    LeakyRelu(usize, f64),
    Elu(usize, f64),
    Exp(usize),
    Concat(Vec<usize>, Axis),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    Transpose(usize),
    TileRows(usize),
    RowScale(usize, usize),
    Softmax(usize),
    Sum(usize),
    Mean(usize),
    Bilinear { q: usize, w: usize, c: usize },
    Bce { p: usize, targets: Rc<[f64]> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

/// Dynamic operation tape for reverse-mode differentiation.
///
/// Every operation appends a node whose inputs were recorded earlier, so the
/// node list is a topological order and the backward sweep is its reverse.
/// A tape is rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

/// Gradients of one backward sweep, indexed by tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `var`, or `None` if the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }
}

fn mismatch(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const BCE_CLAMP: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var { tape: self, id }
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    /// Records a leaf value. Gradients still flow to it and can be read from
    /// [`Gradients::wrt`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value.detached(), Op::Leaf)
    }

    /// Records a parameter of `store` as a leaf linked back to it, so
    /// [`Tape::backward_into`] can deposit its gradient.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let var = self.push(store.get(id).detached(), Op::Leaf);
        self.nodes.borrow_mut()[var.id].param = Some(id);
        var
    }

    fn unary(&self, a: Var<'_>, op: Op, f: impl Fn(f64) -> f64) -> Var<'_> {
        let value = self.with_value(a.id, |t| {
            let data = t.data().iter().map(|&x| f(x)).collect();
            Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
        });
        self.push(value, op)
    }

    fn binary(
        &self,
        a: Var<'_>,
        b: Var<'_>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'_>, AutodiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.id].value, &nodes[b.id].value);
            if ta.shape() != tb.shape() {
                return Err(mismatch(name, ta, tb));
            }
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(ta.shape().to_vec(), data)?
        };
        Ok(self.push(value, op))
    }

    pub fn matmul<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.id].value, &nodes[b.id].value);
            let (m, k) = ta.dims2()?;
            let (k2, n) = tb.dims2()?;
            if ta.shape().len() != 2 || tb.shape().len() != 2 || k != k2 {
                return Err(mismatch("matmul", ta, tb));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
            Tensor::matrix(m, n, out)?
        };
        Ok(self.push(value, Op::MatMul(a.id, b.id)))
    }

    pub fn add<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(a, b, "add", Op::Add(a.id, b.id), |x, y| x + y)
    }

    pub fn sub<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(a, b, "sub", Op::Sub(a.id, b.id), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(a, b, "mul", Op::Mul(a.id, b.id), |x, y| x * y)
    }

    pub fn scale<'t>(&'t self, a: Var<'t>, factor: f64) -> Var<'t> {
        self.unary(a, Op::Scale(a.id, factor), |x| x * factor)
    }

    /// Adds a constant to every element.
    pub fn shift<'t>(&'t self, a: Var<'t>, offset: f64) -> Var<'t> {
        self.unary(a, Op::Shift(a.id), |x| x + offset)
    }

    pub fn tanh<'t>(&'t self, a: Var<'t>) -> Var<'t> {
        self.unary(a, Op::Tanh(a.id), f64::tanh)
    }

    pub fn sigmoid<'t>(&'t self, a: Var<'t>) -> Var<'t> {
        self.unary(a, Op::Sigmoid(a.id), sigmoid)
    }

    pub fn leaky_relu<'t>(&'t self, a: Var<'t>, slope: f64) -> Var<'t> {
        self.unary(a, Op::LeakyRelu(a.id, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn elu<'t>(&'t self, a: Var<'t>, alpha: f64) -> Var<'t> {
        self.unary(a, Op::Elu(a.id, alpha), |x| {
            if x > 0.0 {
                x
            } else {
                alpha * x.exp_m1()
            }
        })
    }

    pub fn exp<'t>(&'t self, a: Var<'t>) -> Var<'t> {
        self.unary(a, Op::Exp(a.id), f64::exp)
    }

    /// Concatenates along `axis`. All inputs must agree on the other axis.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: Axis) -> Result<Var<'t>, AutodiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let first = parts.first().ok_or(AutodiffError::InvalidArgument {
                op: "concat",
                msg: "no inputs".into(),
            })?;
            let t0 = &nodes[first.id].value;
            match axis {
                Axis::Cols if t0.shape().len() == 1 => {
                    let mut data = Vec::new();
                    for p in parts {
                        let t = &nodes[p.id].value;
                        if t.shape().len() != 1 {
                            return Err(mismatch("concat", t0, t));
                        }
                        data.extend_from_slice(t.data());
                    }
                    Tensor::vector(data)
                }
                Axis::Cols => {
                    let (rows, _) = t0.dims2()?;
                    let mut total = 0;
                    for p in parts {
                        let t = &nodes[p.id].value;
                        let (r, c) = t.dims2()?;
                        if t.shape().len() != 2 || r != rows {
                            return Err(mismatch("concat", t0, t));
                        }
                        total += c;
                    }
                    let mut data = Vec::with_capacity(rows * total);
                    for r in 0..rows {
                        for p in parts {
                            data.extend_from_slice(nodes[p.id].value.row(r));
                        }
                    }
                    Tensor::matrix(rows, total, data)?
                }
                Axis::Rows => {
                    let (_, cols) = t0.dims2()?;
                    let mut data = Vec::new();
                    for p in parts {
                        let t = &nodes[p.id].value;
                        let (_, c) = t.dims2()?;
                        if t.shape().len() != 2 || c != cols {
                            return Err(mismatch("concat", t0, t));
                        }
                        data.extend_from_slice(t.data());
                    }
                    let rows = data.len() / cols.max(1);
                    Tensor::matrix(rows, cols, data)?
                }
            }
        };
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(value, Op::Concat(ids, axis)))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols<'t>(&'t self, a: Var<'t>, start: usize, end: usize) -> Result<Var<'t>, AutodiffError> {
        let value = self.with_value(a.id, |t| -> Result<Tensor, AutodiffError> {
            let (rows, cols) = t.dims2()?;
            if t.shape().len() != 2 || start >= end || end > cols {
                return Err(AutodiffError::InvalidArgument {
                    op: "slice_cols",
                    msg: format!("range {start}..{end} invalid for shape {:?}", t.shape()),
                });
            }
            let mut data = Vec::with_capacity(rows * (end - start));
            for r in 0..rows {
                data.extend_from_slice(&t.row(r)[start..end]);
            }
            Tensor::matrix(rows, end - start, data)
        })?;
        Ok(self.push(value, Op::SliceCols(a.id, start)))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows<'t>(&'t self, a: Var<'t>, start: usize, end: usize) -> Result<Var<'t>, AutodiffError> {
        let value = self.with_value(a.id, |t| -> Result<Tensor, AutodiffError> {
            let (rows, cols) = t.dims2()?;
            if t.shape().len() != 2 || start >= end || end > rows {
                return Err(AutodiffError::InvalidArgument {
                    op: "slice_rows",
                    msg: format!("range {start}..{end} invalid for shape {:?}", t.shape()),
                });
            }
            Tensor::matrix(end - start, cols, t.data()[start * cols..end * cols].to_vec())
        })?;
        Ok(self.push(value, Op::SliceRows(a.id, start)))
    }

    pub fn transpose<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let value = self.with_value(a.id, |t| -> Result<Tensor, AutodiffError> {
            let (rows, cols) = t.dims2()?;
            let mut data = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    data[c * rows + r] = t.data()[r * cols + c];
                }
            }
            Tensor::matrix(cols, rows, data)
        })?;
        Ok(self.push(value, Op::Transpose(a.id)))
    }

    /// Repeats a single row (`[n]` or `[1, n]`) `count` times into `[count, n]`.
    pub fn tile_rows<'t>(&'t self, a: Var<'t>, count: usize) -> Result<Var<'t>, AutodiffError> {
        let value = self.with_value(a.id, |t| -> Result<Tensor, AutodiffError> {
            let (rows, cols) = t.dims2()?;
            if rows != 1 {
                return Err(AutodiffError::InvalidArgument {
                    op: "tile_rows",
                    msg: format!("expected a single row, got shape {:?}", t.shape()),
                });
            }
            let mut data = Vec::with_capacity(count * cols);
            for _ in 0..count {
                data.extend_from_slice(t.data());
            }
            Tensor::matrix(count, cols, data)
        })?;
        Ok(self.push(value, Op::TileRows(a.id)))
    }

    /// Multiplies row `r` of `a` (`[m, n]`) by `weights[r]` (`[m, 1]`).
    pub fn row_scale<'t>(&'t self, a: Var<'t>, weights: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tw) = (&nodes[a.id].value, &nodes[weights.id].value);
            let (m, n) = ta.dims2()?;
            if ta.shape().len() != 2 || tw.shape() != [m, 1] {
                return Err(mismatch("row_scale", ta, tw));
            }
            let mut data = ta.data().to_vec();
            for r in 0..m {
                let w = tw.data()[r];
                data[r * n..(r + 1) * n].iter_mut().for_each(|v| *v *= w);
            }
            Tensor::matrix(m, n, data)?
        };
        Ok(self.push(value, Op::RowScale(a.id, weights.id)))
    }

    /// Row-wise softmax. A vector is a single row. Masked-out entries
    /// (`mask[i] == false`) are excluded from normalization and come out as
    /// exactly zero.
    pub fn softmax<'t>(&'t self, logits: Var<'t>, mask: Option<&[bool]>) -> Result<Var<'t>, AutodiffError> {
        let value = self.with_value(logits.id, |t| -> Result<Tensor, AutodiffError> {
            let (rows, cols) = t.dims2()?;
            if let Some(m) = mask {
                if m.len() != t.len() {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "softmax",
                        lhs: t.shape().to_vec(),
                        rhs: vec![m.len()],
                    });
                }
            }
            let keep = |i: usize| mask.is_none_or(|m| m[i]);
            let mut out = vec![0.0; t.len()];
            for r in 0..rows {
                let base = r * cols;
                let row = &t.data()[base..base + cols];
                let max = (0..cols)
                    .filter(|&c| keep(base + c))
                    .map(|c| row[c])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(AutodiffError::DegenerateSoftmax { row: r });
                }
                let mut sum = 0.0;
                for c in 0..cols {
                    if keep(base + c) {
                        let e = (row[c] - max).exp();
                        out[base + c] = e;
                        sum += e;
                    }
                }
                out[base..base + cols].iter_mut().for_each(|v| *v /= sum);
            }
            Tensor::new(t.shape().to_vec(), out)
        })?;
        Ok(self.push(value, Op::Softmax(logits.id)))
    }

    pub fn sum<'t>(&'t self, a: Var<'t>) -> Var<'t> {
        let s = self.with_value(a.id, |t| t.data().iter().sum());
        self.push(Tensor::scalar(s), Op::Sum(a.id))
    }

    pub fn mean<'t>(&'t self, a: Var<'t>) -> Var<'t> {
        let s = self.with_value(a.id, |t| t.data().iter().sum::<f64>() / t.len().max(1) as f64);
        self.push(Tensor::scalar(s), Op::Mean(a.id))
    }

    /// Batched bilinear form: `out[b, k] = Σ_ij q[b, i] · w[i, k, j] · c[b, j]`
    /// with `q: [B, dq]`, `w: [dq, dk, dc]`, `c: [B, dc]`.
    pub fn bilinear<'t>(&'t self, q: Var<'t>, w: Var<'t>, c: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (tq, tw, tc) = (&nodes[q.id].value, &nodes[w.id].value, &nodes[c.id].value);
            let (batch, dq, dk, dc) = bilinear_dims(tq, tw, tc)?;
            let projected = bilinear_project(tq, tw, batch, dq, dk * dc);
            let mut out = vec![0.0; batch * dk];
            for b in 0..batch {
                let cb = tc.row(b);
                for k in 0..dk {
                    let p = &projected[(b * dk + k) * dc..(b * dk + k + 1) * dc];
                    out[b * dk + k] = p.iter().zip(cb).map(|(x, y)| x * y).sum();
                }
            }
            Tensor::matrix(batch, dk, out)?
        };
        Ok(self.push(
            value,
            Op::Bilinear {
                q: q.id,
                w: w.id,
                c: c.id,
            },
        ))
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 `targets`,
    /// with probabilities clamped to `[1e-12, 1 - 1e-12]`.
    pub fn bce<'t>(&'t self, p: Var<'t>, targets: &[f64]) -> Result<Var<'t>, AutodiffError> {
        let loss = self.with_value(p.id, |t| -> Result<f64, AutodiffError> {
            if t.len() != targets.len() || t.is_empty() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "bce",
                    lhs: t.shape().to_vec(),
                    rhs: vec![targets.len()],
                });
            }
            let total: f64 = t
                .data()
                .iter()
                .zip(targets)
                .map(|(&prob, &y)| {
                    let pc = prob.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                    -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
                })
                .sum();
            Ok(total / targets.len() as f64)
        })?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p: p.id,
                targets: targets.into(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, AutodiffError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id].value;
        if root.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            propagate(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds each parameter's gradient into `store`.
    /// Gradients accumulate across calls until [`ParamStore::zero_grad`].
    pub fn backward_into(&self, loss: Var<'_>, store: &mut ParamStore) -> Result<(), AutodiffError> {
        let grads = self.backward(loss)?;
        let nodes = self.nodes.borrow();
        for (node, g) in nodes.iter().zip(&grads.grads) {
            if let (Some(pid), Some(g)) = (node.param, g) {
                store.get_mut(pid).accumulate_grad(g);
            }
        }
        Ok(())
    }
}

fn bilinear_dims(tq: &Tensor, tw: &Tensor, tc: &Tensor) -> Result<(usize, usize, usize, usize), AutodiffError> {
    let (batch, dq) = tq.dims2()?;
    let (batch_c, dc) = tc.dims2()?;
    match tw.shape() {
        [wq, dk, wc] if *wq == dq && *wc == dc && batch == batch_c => Ok((batch, dq, *dk, dc)),
        _ => Err(AutodiffError::ShapeMismatch {
            op: "bilinear",
            lhs: vec![batch, dq, batch_c, dc],
            rhs: tw.shape().to_vec(),
        }),
    }
}

/// `q · reshape(w, [dq, dk·dc])`.
fn bilinear_project(tq: &Tensor, tw: &Tensor, batch: usize, dq: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * width];
    gemm(batch, dq, width, tq.data(), false, tw.data(), false, &mut out, false);
    out
}

fn slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = ta.dims2().expect("matrix");
            let (_, n) = tb.dims2().expect("matrix");
            // dA += dC · Bᵀ, dB += Aᵀ · dC
            gemm(m, n, k, g, false, tb.data(), true, slot(grads, *a, m * k), true);
            gemm(k, m, n, ta.data(), true, g, false, slot(grads, *b, k * n), true);
        }
        Op::Add(a, b) => {
            add_into(slot(grads, *a, g.len()), g);
            add_into(slot(grads, *b, g.len()), g);
        }
        Op::Sub(a, b) => {
            add_into(slot(grads, *a, g.len()), g);
            let gb = slot(grads, *b, g.len());
            gb.iter_mut().zip(g).for_each(|(acc, d)| *acc -= d);
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (nodes[*a].value.data(), nodes[*b].value.data());
            let ga = slot(grads, *a, g.len());
            for i in 0..g.len() {
                ga[i] += g[i] * tb[i];
            }
            let gb = slot(grads, *b, g.len());
            for i in 0..g.len() {
                gb[i] += g[i] * ta[i];
            }
        }
        Op::Scale(a, f) => {
            let ga = slot(grads, *a, g.len());
            ga.iter_mut().zip(g).for_each(|(acc, d)| *acc += d * f);
        }
        Op::Shift(a) => add_into(slot(grads, *a, g.len()), g),
        Op::Tanh(a) => {
            let y = out.data();
            let ga = slot(grads, *a, g.len());
            for i in 0..g.len() {
                ga[i] += g[i] * (1.0 - y[i] * y[i]);
            }
        }
        Op::Sigmoid(a) => {
            let y = out.data();
            let ga = slot(grads, *a, g.len());
            for i in 0..g.len() {
                ga[i] += g[i] * y[i] * (1.0 - y[i]);
            }
        }
        Op::LeakyRelu(a, slope) => {
            let x = nodes[*a].value.data();
            let ga = slot(grads, *a, g.len());
            for i in 0..g.len() {
                ga[i] += if x[i] > 0.0 { g[i] } else { g[i] * slope };
            }
        }
        Op::Elu(a, alpha) => {
            let x = nodes[*a].value.data();
            let y = out.data();
            let ga = slot(grads, *a, g.len());
            for i in 0..g.len() {
                ga[i] += if x[i] > 0.0 { g[i] } else { g[i] * (y[i] + alpha) };
            }
        }
        Op::Exp(a) => {
            let y = out.data();
            let ga = slot(grads, *a, g.len());
            for i in 0..g.len() {
                ga[i] += g[i] * y[i];
            }
        }
        Op::Concat(parts, axis) => match axis {
            Axis::Cols => {
                let (rows, total) = out.dims2().expect("matrix");
                let mut offset = 0;
                for &p in parts {
                    let (_, cols) = nodes[p].value.dims2().expect("matrix");
                    let gp = slot(grads, p, rows * cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gp[r * cols + c] += g[r * total + offset + c];
                        }
                    }
                    offset += cols;
                }
            }
            Axis::Rows => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    add_into(slot(grads, p, len), &g[offset..offset + len]);
                    offset += len;
                }
            }
        },
        Op::SliceCols(a, start) => {
            let (rows, width) = out.dims2().expect("matrix");
            let (_, cols) = nodes[*a].value.dims2().expect("matrix");
            let ga = slot(grads, *a, rows * cols);
            for r in 0..rows {
                for c in 0..width {
                    ga[r * cols + start + c] += g[r * width + c];
                }
            }
        }
        Op::SliceRows(a, start) => {
            let (_, cols) = out.dims2().expect("matrix");
            let len = nodes[*a].value.len();
            let ga = slot(grads, *a, len);
            add_into(&mut ga[start * cols..start * cols + g.len()], g);
        }
        Op::Transpose(a) => {
            let (rows, cols) = out.dims2().expect("matrix");
            let ga = slot(grads, *a, rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    ga[c * rows + r] += g[r * cols + c];
                }
            }
        }
        Op::TileRows(a) => {
            let (rows, cols) = out.dims2().expect("matrix");
            let ga = slot(grads, *a, cols);
            for r in 0..rows {
                add_into(ga, &g[r * cols..(r + 1) * cols]);
            }
        }
        Op::RowScale(a, w) => {
            let (ta, tw) = (&nodes[*a].value, &nodes[*w].value);
            let (m, n) = ta.dims2().expect("matrix");
            {
                let ga = slot(grads, *a, m * n);
                for r in 0..m {
                    let wr = tw.data()[r];
                    for c in 0..n {
                        ga[r * n + c] += g[r * n + c] * wr;
                    }
                }
            }
            let gw = slot(grads, *w, m);
            for r in 0..m {
                gw[r] += (0..n).map(|c| g[r * n + c] * ta.data()[r * n + c]).sum::<f64>();
            }
        }
        Op::Softmax(a) => {
            let (rows, cols) = out.dims2().expect("matrix");
            let y = out.data();
            let ga = slot(grads, *a, rows * cols);
            for r in 0..rows {
                let base = r * cols;
                let dot: f64 = (0..cols).map(|c| y[base + c] * g[base + c]).sum();
                for c in 0..cols {
                    ga[base + c] += y[base + c] * (g[base + c] - dot);
                }
            }
        }
        Op::Sum(a) => {
            let len = nodes[*a].value.len();
            slot(grads, *a, len).iter_mut().for_each(|v| *v += g[0]);
        }
        Op::Mean(a) => {
            let len = nodes[*a].value.len();
            let d = g[0] / len.max(1) as f64;
            slot(grads, *a, len).iter_mut().for_each(|v| *v += d);
        }
        Op::Bilinear { q, w, c } => {
            let (tq, tw, tc) = (&nodes[*q].value, &nodes[*w].value, &nodes[*c].value);
            let (batch, dq, dk, dc) = bilinear_dims(tq, tw, tc).expect("checked in forward");
            let width = dk * dc;
            // dc[b, j] = Σ_k g[b, k] · P[b, k, j] with P = q · W
            let projected = bilinear_project(tq, tw, batch, dq, width);
            {
                let gc = slot(grads, *c, batch * dc);
                for b in 0..batch {
                    for k in 0..dk {
                        let gbk = g[b * dk + k];
                        let p = &projected[(b * dk + k) * dc..(b * dk + k + 1) * dc];
                        for j in 0..dc {
                            gc[b * dc + j] += gbk * p[j];
                        }
                    }
                }
            }
            // U[b, k, j] = g[b, k] · c[b, j]; dq = U · Wᵀ, dW = qᵀ · U
            let mut outer = vec![0.0; batch * width];
            for b in 0..batch {
                let cb = tc.row(b);
                for k in 0..dk {
                    let gbk = g[b * dk + k];
                    let dst = &mut outer[(b * dk + k) * dc..(b * dk + k + 1) * dc];
                    for j in 0..dc {
                        dst[j] = gbk * cb[j];
                    }
                }
            }
            gemm(batch, width, dq, &outer, false, tw.data(), true, slot(grads, *q, batch * dq), true);
            gemm(dq, batch, width, tq.data(), true, &outer, false, slot(grads, *w, dq * width), true);
        }
        Op::Bce { p, targets } => {
            let probs = nodes[*p].value.data();
            let n = targets.len() as f64;
            let gp = slot(grads, *p, probs.len());
            for i in 0..probs.len() {
                let prob = probs[i];
                if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&prob) {
                    continue;
                }
                let y = targets[i];
                gp[i] += g[0] * (-y / prob + (1.0 - y) / (1.0 - prob)) / n;
            }
        }
    }
}

fn add_into(acc: &mut [f64], delta: &[f64]) {
    acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d);
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Tensor {
        self.tape.with_value(self.id, Tensor::detached)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.id, |t| t.shape().to_vec())
    }

    pub fn item(&self) -> Option<f64> {
        self.tape.with_value(self.id, Tensor::item)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_basis() {
        let tape = Tape::new();
        let eye = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let m = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        assert_eq!(tape.matmul(eye, m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);

        let row = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let col = tape.leaf(Tensor::from_rows(&[vec![5.0], vec![7.0]]).unwrap());
        let out = tape.matmul(row, col).unwrap().value();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data(), &[5.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, AutodiffError::ShapeMismatch { .. }));
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x, None).unwrap().value();
        assert!(approx(y.data(), &[1.0 / 3.0; 3], 1e-15));

        let single = tape.leaf(Tensor::vector(vec![10.0]));
        assert_eq!(tape.softmax(single, None).unwrap().value().data(), &[1.0]);

        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = tape.softmax(x, Some(&[true, true, false])).unwrap().value();
        let e = std::f64::consts::E;
        assert!(approx(y.data(), &[1.0 / (1.0 + e), e / (1.0 + e), 0.0], 1e-15));
        assert_eq!(y.data()[2], 0.0);
    }

    #[test]
    fn softmax_all_masked_is_degenerate() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(
            tape.softmax(x, Some(&[false, false])).unwrap_err(),
            AutodiffError::DegenerateSoftmax { row: 0 }
        );
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1000.0, 999.0, -1000.0]));
        let y = tape.softmax(x, None).unwrap().value();
        assert!(y.is_finite());
        assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn elementwise_definitions() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0]));
        assert_eq!(tape.leaky_relu(x, 0.2).value().data(), &[-0.2]);
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![3.0]));
        assert_eq!(tape.concat(&[a, b], Axis::Cols).unwrap().value().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0]));
        let y = tape.sigmoid(x);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert!((grads.wrt(x).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_sum_and_square() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 1.0, 1.0]));
        let loss = tape.sum(x);
        assert_eq!(tape.backward(loss).unwrap().wrt(x).unwrap(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        assert_eq!(tape.backward(loss).unwrap().wrt(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn backward_into_accumulates_until_zeroed() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::vector(vec![1.0, 2.0]));
        for _ in 0..2 {
            let tape = Tape::new();
            let x = tape.param(&store, id);
            let loss = tape.sum(x);
            tape.backward_into(loss, &mut store).unwrap();
        }
        assert_eq!(store.get(id).grad().unwrap(), &[2.0, 2.0]);
        store.zero_grad();
        assert_eq!(store.get(id).grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn bce_values() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![0.5]));
        let l = tape.bce(p, &[1.0]).unwrap().item().unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);

        let p = tape.leaf(Tensor::vector(vec![1.0 - 1e-12]));
        let l = tape.bce(p, &[1.0]).unwrap().item().unwrap();
        assert!(l > 0.0 && (l - 1e-12).abs() < 1e-15);

        let p = tape.leaf(Tensor::vector(vec![0.9, 0.2]));
        let l = tape.bce(p, &[1.0, 0.0]).unwrap().item().unwrap();
        let expected = -0.5 * (0.9f64.ln() + 0.8f64.ln());
        assert!((l - expected).abs() < 1e-15);
        assert!((l - 0.1643).abs() < 1e-4);

        assert!(tape.bce(p, &[1.0]).is_err());
    }

    #[test]
    fn tile_row_scale_and_slices_round_trip_values() {
        let tape = Tape::new();
        let m = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap());
        assert_eq!(tape.slice_cols(m, 1, 3).unwrap().value().data(), &[2.0, 3.0, 5.0, 6.0]);
        assert_eq!(tape.slice_rows(m, 1, 2).unwrap().value().data(), &[4.0, 5.0, 6.0]);
        assert_eq!(tape.transpose(m).unwrap().value().data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let w = tape.leaf(Tensor::from_rows(&[vec![2.0], vec![-1.0]]).unwrap());
        assert_eq!(
            tape.row_scale(m, w).unwrap().value().data(),
            &[2.0, 4.0, 6.0, -4.0, -5.0, -6.0]
        );
        let b = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(tape.tile_rows(b, 2).unwrap().value().data(), &[1.0, 2.0, 1.0, 2.0]);
    }
}
