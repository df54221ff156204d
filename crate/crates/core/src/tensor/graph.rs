//! Reverse-mode gradient graph.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` walks it once in reverse. Values are
//! held behind `Arc` so frozen weights enter the graph without copying.

use std::sync::Arc;

use super::kernels::{matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_row};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{Scalar, PROB_FLOOR};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which distribution plays the target role in a KL term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(teacher ‖ student)`.
    #[default]
    TeacherTarget,
    /// `KL(student ‖ teacher)`.
    StudentTarget,
}

/// Numerical events recorded while building the graph.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Diagnostics {
    /// Cross-entropy rows whose target probability fell below the floor.
    pub clamped_probabilities: usize,
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<S>,
        rstd: Vec<S>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    CrossEntropyRows {
        q: Var,
        targets: Vec<usize>,
    },
    KlRows {
        teacher: Var,
        student: Var,
        direction: KlDirection,
    },
    WeightedSum {
        x: Var,
        weights: Vec<S>,
    },
}

struct Node<S> {
    value: Arc<Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
    is_param: bool,
}

/// A recorded computation over [`Tensor`]s.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    backward_done: bool,
    diagnostics: Diagnostics,
    layer_norm_eps: S,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            diagnostics: Diagnostics::default(),
            layer_norm_eps: S::lit(1e-5),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor<S>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad, false)
    }

    fn push_arc(
        &mut self,
        value: Arc<Tensor<S>>,
        op: Op<S>,
        requires_grad: bool,
        is_param: bool,
    ) -> Var {
        debug_assert!(value.is_finite(), "non-finite value entered the graph");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Arc<Tensor<S>>) -> Var {
        self.push_arc(value, Op::Leaf, true, true)
    }

    /// Non-trainable leaf. Shares the buffer.
    pub fn constant(&mut self, value: Arc<Tensor<S>>) -> Var {
        self.push_arc(value, Op::Leaf, false, false)
    }

    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.constant(Arc::new(value))
    }

    /// Same value, cut off from the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value_arc(v);
        self.constant(value)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape {
                op,
                left: other.to_vec(),
                right: vec![],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.matrix_dims(a, "matmul")?;
        let (q2, r) = self.matrix_dims(b, "matmul")?;
        if q != q2 {
            return Err(Error::Shape {
                op: "matmul",
                left: vec![p, q],
                right: vec![q2, r],
            });
        }
        let mut out = vec![S::zero(); p * r];
        matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            p,
            q,
            r,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![p, r], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "add",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add(a, b), rg))
    }

    /// Adds a length-`c` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.numel() != tx.cols() {
            return Err(Error::Shape {
                op: "add_row",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let c = tx.cols();
        let b = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % c])
            .collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > S::zero() { v } else { S::zero() });
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.softmax_impl(x, false)
    }

    /// Row `i` only attends to columns `0..=i`; masked entries are exactly 0.
    pub fn causal_softmax(&mut self, x: Var) -> Var {
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        for (i, row) in out.data_mut().chunks_mut(c).enumerate() {
            let valid = if causal { (i + 1).min(c) } else { c };
            softmax_row(row, valid);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Per-row normalization to zero mean and unit variance followed by an
    /// affine transform.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        for v in [gain, bias] {
            if self.value(v).numel() != c {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: tx.shape().to_vec(),
                    right: self.value(v).shape().to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = tx.rows();
        let cf = S::from_count(c);
        let mut normed = vec![S::zero(); tx.numel()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); tx.numel()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<S>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / cf;
            let rs = S::one() / (var + self.layer_norm_eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let nv = (row[j] - mean) * rs;
                normed[r * c + j] = nv;
                out[r * c + j] = nv * g[j] + b[j];
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of `table`; the gradient scatters back into those rows.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, n) = self.matrix_dims(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::Empty("embedding id list"));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    what: "embedding",
                    index: id,
                    bound: rows,
                });
            }
            out.extend_from_slice(&t[id * n..(id + 1) * n]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), n], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat input list"))?;
        let rows = self.matrix_dims(first, "concat")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat")?;
            if r != rows {
                return Err(Error::Shape {
                    op: "concat",
                    left: vec![rows],
                    right: vec![r, c],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, c) = self.matrix_dims(x, "slice_cols")?;
        if width == 0 || start + width > c {
            return Err(Error::Index {
                what: "slice_cols",
                index: start + width,
                bound: c,
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&src[r * c + start..r * c + start + width]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![rows, width], out),
            Op::SliceCols { x, start },
            rg,
        ))
    }

    /// `-ln q[r, target_r]` for every row of a probability matrix. Target
    /// probabilities are floored at 1e-12; floored rows are counted in
    /// [`Diagnostics::clamped_probabilities`].
    pub fn cross_entropy_rows(&mut self, q: Var, targets: &[usize]) -> Result<Var> {
        let tq = self.value(q);
        let (rows, v) = (tq.rows(), tq.cols());
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: tq.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let floor = S::lit(PROB_FLOOR);
        let mut out = Vec::with_capacity(rows);
        let mut clamped = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t,
                    bound: v,
                });
            }
            let p = tq.row(r)[t];
            if p < floor {
                clamped += 1;
            }
            out.push(-p.max(floor).ln());
        }
        self.diagnostics.clamped_probabilities += clamped;
        let rg = self.rg(&[q]);
        Ok(self.push(
            Tensor::from_parts(vec![rows], out),
            Op::CrossEntropyRows {
                q,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise KL divergence between two probability matrices. The
    /// gradient flows into `student` only.
    ///
    /// With [`KlDirection::TeacherTarget`] each row is
    /// `Σ t·ln(t/s)`; terms with `t = 0` vanish and both sides of the ratio
    /// are floored at 1e-12, so `KL(q, q)` is exactly zero.
    pub fn kl_rows(&mut self, teacher: Var, student: Var, direction: KlDirection) -> Result<Var> {
        let (tt, ts) = (self.value(teacher), self.value(student));
        if tt.shape() != ts.shape() {
            return Err(Error::Shape {
                op: "kl_divergence",
                left: tt.shape().to_vec(),
                right: ts.shape().to_vec(),
            });
        }
        let floor = S::lit(PROB_FLOOR);
        let rows = tt.rows();
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let (trow, srow) = (tt.row(r), ts.row(r));
            let (target, other) = match direction {
                KlDirection::TeacherTarget => (trow, srow),
                KlDirection::StudentTarget => (srow, trow),
            };
            let mut acc = S::zero();
            for (&p, &q) in target.iter().zip(other) {
                if p > S::zero() {
                    acc = acc + p * (p.max(floor) / q.max(floor)).ln();
                }
            }
            out.push(acc);
        }
        let rg = self.rg(&[student]);
        Ok(self.push(
            Tensor::from_parts(vec![rows], out),
            Op::KlRows {
                teacher,
                student,
                direction,
            },
            rg,
        ))
    }

    /// `Σ wᵢ·xᵢ` over all elements, as a one-element tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<S>) -> Result<Var> {
        let tx = self.value(x);
        if weights.len() != tx.numel() {
            return Err(Error::Shape {
                op: "weighted_sum",
                left: tx.shape().to_vec(),
                right: vec![weights.len()],
            });
        }
        let mut acc = S::zero();
        for (&v, &w) in tx.data().iter().zip(&weights) {
            acc = acc + v * w;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(acc), Op::WeightedSum { x, weights }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        self.weighted_sum(x, vec![S::one(); n])
    }

    /// Populates gradients of every trainable leaf reachable from `loss`.
    /// Trainable leaves not reached get a zero buffer; constants get none.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(shape));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::filled(&shape, S::one()));
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if self.nodes[i].is_param {
                grads[i] = Some(g);
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.is_param && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, delta: Tensor<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (p, q) = (ta.shape()[0], ta.shape()[1]);
                let r = tb.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![S::zero(); p * q];
                    matmul_nt_acc(g.data(), tb.data(), &mut da, p, q, r);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![p, q], da));
                }
                if self.wants(*b) {
                    let mut db = vec![S::zero(); q * r];
                    matmul_tn_acc(ta.data(), g.data(), &mut db, p, q, r);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![q, r], db));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut dx = vec![S::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = g.data()[i * c + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![c, r], dx));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*bias) {
                    let c = g.cols();
                    let mut db = vec![S::zero(); c];
                    for row in g.data().chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::from_parts(shape, db));
                }
            }
            Op::Scale(x, f) => {
                self.accumulate(grads, *x, g.map(|v| v * *f));
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::Softmax(x) => {
                // Masked outputs are zero, so they drop out of the sum.
                let c = out.cols();
                let mut dx = vec![S::zero(); out.numel()];
                for ((y, gy), d) in out
                    .data()
                    .chunks(c)
                    .zip(g.data().chunks(c))
                    .zip(dx.chunks_mut(c))
                {
                    let dot: S = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        d[j] = y[j] * (gy[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let c = out.cols();
                let cf = S::from_count(c);
                let gv = self.value(*gain).data();
                if self.wants(*x) {
                    let mut dx = vec![S::zero(); out.numel()];
                    for (r, (gy, d)) in g.data().chunks(c).zip(dx.chunks_mut(c)).enumerate() {
                        let nrow = &normed[r * c..(r + 1) * c];
                        let mut mean_dn = S::zero();
                        let mut mean_dn_n = S::zero();
                        for j in 0..c {
                            let dn = gy[j] * gv[j];
                            mean_dn = mean_dn + dn;
                            mean_dn_n = mean_dn_n + dn * nrow[j];
                        }
                        mean_dn = mean_dn / cf;
                        mean_dn_n = mean_dn_n / cf;
                        for j in 0..c {
                            let dn = gy[j] * gv[j];
                            d[j] = rstd[r] * (dn - mean_dn - nrow[j] * mean_dn_n);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), dx));
                }
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![S::zero(); c];
                    let mut db = vec![S::zero(); c];
                    for (r, gy) in g.data().chunks(c).enumerate() {
                        for j in 0..c {
                            dg[j] = dg[j] + gy[j] * normed[r * c + j];
                            db[j] = db[j] + gy[j];
                        }
                    }
                    let gs = self.value(*gain).shape().to_vec();
                    let bs = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *gain, Tensor::from_parts(gs, dg));
                    self.accumulate(grads, *bias, Tensor::from_parts(bs, db));
                }
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let n = tt.cols();
                let mut dt = vec![S::zero(); tt.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g.data()[r * n..(r + 1) * n];
                    for (d, &v) in dt[id * n..(id + 1) * n].iter_mut().zip(src) {
                        *d = *d + v;
                    }
                }
                self.accumulate(grads, *table, Tensor::from_parts(tt.shape().to_vec(), dt));
            }
            Op::ConcatCols(parts) => {
                let rows = out.shape()[0];
                let total = out.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(
                                &g.data()[r * total + offset..r * total + offset + w],
                            );
                        }
                        self.accumulate(grads, p, Tensor::from_parts(vec![rows, w], dp));
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let (rows, c) = (tx.shape()[0], tx.shape()[1]);
                let w = out.shape()[1];
                let mut dx = vec![S::zero(); rows * c];
                for r in 0..rows {
                    dx[r * c + start..r * c + start + w]
                        .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![rows, c], dx));
            }
            Op::CrossEntropyRows { q, targets } => {
                let tq = self.value(*q);
                let v = tq.cols();
                let floor = S::lit(PROB_FLOOR);
                let mut dq = vec![S::zero(); tq.numel()];
                for (r, &t) in targets.iter().enumerate() {
                    let p = tq.row(r)[t];
                    if p >= floor {
                        dq[r * v + t] = -g.data()[r] / p;
                    }
                }
                self.accumulate(grads, *q, Tensor::from_parts(tq.shape().to_vec(), dq));
            }
            Op::KlRows {
                teacher,
                student,
                direction,
            } => {
                let (tt, ts) = (self.value(*teacher), self.value(*student));
                let v = ts.cols();
                let floor = S::lit(PROB_FLOOR);
                let mut ds = vec![S::zero(); ts.numel()];
                for r in 0..ts.rows() {
                    let gr = g.data()[r];
                    let (trow, srow) = (tt.row(r), ts.row(r));
                    let drow = &mut ds[r * v..(r + 1) * v];
                    match direction {
                        KlDirection::TeacherTarget => {
                            for j in 0..v {
                                if trow[j] > S::zero() && srow[j] >= floor {
                                    drow[j] = -gr * trow[j] / srow[j];
                                }
                            }
                        }
                        KlDirection::StudentTarget => {
                            for j in 0..v {
                                if srow[j] > S::zero() {
                                    let ratio = srow[j].max(floor) / trow[j].max(floor);
                                    drow[j] = gr * (ratio.ln() + S::one());
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *student, Tensor::from_parts(ts.shape().to_vec(), ds));
            }
            Op::WeightedSum { x, weights } => {
                let gv = g.item();
                let data = weights.iter().map(|&w| w * gv).collect();
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(shape, data));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Arc<Tensor<f64>> {
        Arc::new(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::<f64>::new();
        let eye = g.input(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
        let m = g.constant(t(&[&[2.0, -3.0, 5.0], &[7.0, 11.0, 13.0]]));
        let out = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(out), g.value(m));

        let a = g.constant(t(&[&[1.0, 2.0]]));
        let b = g.constant(t(&[&[3.0], &[4.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);

        let z = g.constant(t(&[&[0.0, 0.0]]));
        let zc = g.matmul(z, m).unwrap();
        assert!(g.value(zc).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[&[1.0, 2.0]]));
        let err = g.matmul(a, a).unwrap_err().to_string();
        assert!(err.contains("[1, 2]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[&[0.0, 0.0, 0.0, 0.0]]));
        let s = g.softmax(x);
        assert_eq!(g.value(s).data(), &[0.25; 4]);

        let x = g.constant(t(&[&[1f64.ln(), 3f64.ln()]]));
        let s = g.softmax(x);
        assert!((g.value(s).data()[0] - 0.25).abs() < 1e-15);
        assert!((g.value(s).data()[1] - 0.75).abs() < 1e-15);

        let x = g.constant(t(&[&[1000.0, 0.0]]));
        let s = g.softmax(x);
        assert!(g.value(s).is_finite());
        assert!((g.value(s).data()[0] - 1.0).abs() < 1e-15);
        assert!(g.value(s).data()[1] < 1e-300);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]]));
        let s = g.causal_softmax(x);
        let v = g.value(s);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.row(1)[2], 0.0);
        assert!((v.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::new();
        let ones = g.constant(t(&[&[1.0, 1.0]]));
        let zeros = g.constant(t(&[&[0.0, 0.0]]));

        let c = g.constant(t(&[&[3.0, 3.0]]));
        let y = g.layer_norm(c, ones, zeros).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);

        let x = g.constant(t(&[&[1.0, -1.0]]));
        let y = g.layer_norm(x, ones, zeros).unwrap();
        // variance 1, so the only deviation is the epsilon in the denominator
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.value(y).data()[0] - expected).abs() < 1e-15);
        assert!((g.value(y).data()[1] + expected).abs() < 1e-15);

        let bias = g.constant(t(&[&[0.5, -2.0]]));
        let y = g.layer_norm(x, zeros, bias).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -2.0]);
    }

    #[test]
    fn relu_and_embedding() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[&[-2.0, 3.0]]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 3.0]);

        let table = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let e = g.embedding(table, &[1, 0, 1]).unwrap();
        assert_eq!(g.value(e).data(), &[3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(
            g.embedding(table, &[2]),
            Err(Error::Index {
                index: 2,
                bound: 2,
                ..
            })
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(t(&[
            &[0.0, 1.0, 0.0, 0.0],
            &[0.25, 0.25, 0.25, 0.25],
            &[0.5, 0.25, 0.25, 0.0],
            &[0.5, 0.5, 0.0, 0.0],
        ]));
        let ce = g.cross_entropy_rows(q, &[1, 2, 0, 3]).unwrap();
        let v = g.value(ce).data().to_vec();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 4f64.ln()).abs() < 1e-12);
        assert!((v[2] - 2f64.ln()).abs() < 1e-12);
        assert!((v[3] - (-(1e-12f64).ln())).abs() < 1e-9);
        assert_eq!(g.diagnostics().clamped_probabilities, 1);
    }

    #[test]
    fn kl_examples() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(t(&[&[1.0, 0.0], &[0.3, 0.7], &[0.5, 0.5]]));
        let q = g.constant(t(&[&[0.5, 0.5], &[0.3, 0.7], &[0.5, 0.5]]));
        let kl = g.kl_rows(p, q, KlDirection::TeacherTarget).unwrap();
        let v = g.value(kl).data();
        assert!((v[0] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[2], 0.0);

        let short = g.constant(t(&[&[1.0]]));
        assert!(matches!(
            g.kl_rows(short, q, KlDirection::TeacherTarget),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn backward_square() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[&[3.0]]));
        let xt = g.transpose(x).unwrap();
        let y = g.matmul(x, xt).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
        assert!(matches!(g.backward(loss), Err(Error::BackwardTwice)));
        g.reset();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn detached_and_unused() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[&[2.0, 1.0]]));
        let unused = g.param(t(&[&[5.0]]));
        let d = g.detach(x);
        let y = g.add(x, d).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
        assert!(g.grad(d).is_none());
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0]);
    }

    #[test]
    fn kl_gradient_only_reaches_student() {
        let mut g = Graph::<f64>::new();
        let tl = g.param(t(&[&[0.2, -0.1, 0.4]]));
        let sl = g.param(t(&[&[0.0, 0.3, -0.2]]));
        let tq = g.softmax(tl);
        let sq = g.softmax(sl);
        let kl = g.kl_rows(tq, sq, KlDirection::TeacherTarget).unwrap();
        let loss = g.sum(kl).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(tl).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.grad(sl).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[&[1.0, 2.0]]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }
}
