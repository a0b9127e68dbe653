//! Reverse-mode automatic differentiation on an index-based record of
//! operations (a Wengert list).
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation appends a
//! node holding its inputs, parameters, and computed value, and returns a
//! [`NodeId`]. [`Tape::backward`] walks the list in reverse from a scalar
//! output and accumulates adjoints; it may be called repeatedly on the same
//! tape with different outputs, which is how per-logit gradients are
//! extracted without re-running the forward pass.
//!
//! Gradient conventions at non-differentiable points:
//! - `relu` uses subgradient 0 at the kink.
//! - `min_scalar` splits the adjoint evenly when both arguments are equal.
//! - `norm2` uses subgradient 0 at the origin.
//! - `spike` uses a rectangular window of height `1/width` around the
//!   threshold crossing regardless of spike mode (see [`SpikeMode`]).

use crate::error::{Error, Result};
use crate::tensor::{
    add_kernel, dot_kernel, log_softmax_rows_kernel, matmul_kernel, mul_kernel, norm2_kernel,
    softmax_rows_kernel, sum_kernel, Tensor,
};

/// Handle to a node on a [`Tape`]. Only valid for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    /// Position of the node in tape order.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spike nonlinearity applied to the membrane's distance above threshold.
///
/// `Hard` is the operating regime: an exact step, 1 at and above threshold.
/// `Relaxed` replaces the step with `clamp(x / width + 0.5, 0, 1)`, whose
/// almost-everywhere derivative equals the rectangular backward rule; it
/// exists so end-to-end gradients can be validated against finite
/// differences, which cannot observe a surrogate through an exact step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikeMode {
    Hard,
    Relaxed,
}

/// Axis selector for rank-2 reductions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows: `(r, c) -> (c,)`.
    Rows,
    /// Reduce over columns: `(r, c) -> (r,)`.
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    StopGrad,
    Add { a: usize, b: usize },
    AddN { xs: Vec<usize> },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Shift { x: usize },
    MatMul { a: usize, b: usize },
    Relu { x: usize },
    SoftmaxT { x: usize, tau: f64 },
    LogSoftmaxT { x: usize, tau: f64 },
    SumAxis { x: usize, axis: Axis },
    MeanAxis { x: usize, axis: Axis },
    SumAll { x: usize },
    MeanAll { x: usize },
    Norm2 { x: usize },
    Dot { a: usize, b: usize },
    Select { x: usize, idx: Vec<usize> },
    ScatterReplace { base: usize, idx: Vec<usize>, values: usize },
    MinScalar { a: usize, b: usize },
    Repeat { x: usize, n: usize },
    Spike { x: usize, width: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of one scalar output with respect to every tape node.
///
/// Nodes the output does not depend on have no entry; [`Gradients::is_zero`]
/// treats a missing entry and an all-zero tensor alike.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient tensor for `id`, if any path reached it.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id` as a dense vector, materializing zeros of
    /// `numel` when no path reached the node.
    pub fn wrt_dense(&self, id: NodeId, numel: usize) -> Vec<f64> {
        match self.wrt(id) {
            Some(t) => {
                assert_eq!(t.numel(), numel);
                t.data().to_vec()
            }
            None => vec![0.0; numel],
        }
    }

    /// True when the output provably does not vary with node `id`.
    pub fn is_zero(&self, id: NodeId) -> bool {
        match self.wrt(id) {
            None => true,
            Some(t) => t.data().iter().all(|&v| v == 0.0),
        }
    }
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value computed at `id` during the forward pass.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn check_id(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "node id {} out of range for tape of {} nodes",
                id.0,
                self.nodes.len()
            )))
        }
    }

    // ── node constructors ───────────────────────────────────────────────

    /// Registers an input tensor. Leaves participate in gradients; to treat
    /// a value as constant, wrap it with [`Tape::stop_grad`].
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Identity in value; blocks all gradient flow to `x`.
    pub fn stop_grad(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        let value = self.value(x).clone();
        Ok(self.push(Op::StopGrad, value))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        self.check_id(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let value = Tensor::new(ta.shape().to_vec(), add_kernel(ta.data(), tb.data()))?;
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, value))
    }

    /// Elementwise sum of any number of same-shape tensors, accumulated in
    /// argument order.
    pub fn add_n(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::invalid("add_n of zero nodes"));
        }
        for &x in xs {
            self.check_id(x)?;
        }
        let shape = self.value(xs[0]).shape().to_vec();
        let mut data = vec![0.0; self.value(xs[0]).numel()];
        for &x in xs {
            let t = self.value(x);
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "add_n",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
            for (o, v) in data.iter_mut().zip(t.data()) {
                *o += v;
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            Op::AddN {
                xs: xs.iter().map(|n| n.0).collect(),
            },
            value,
        ))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        self.check_id(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let value = Tensor::new(ta.shape().to_vec(), mul_kernel(ta.data(), tb.data()))?;
        Ok(self.push(Op::Mul { a: a.0, b: b.0 }, value))
    }

    /// Multiplies every element by the constant `c`.
    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.check_id(x)?;
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(Op::Scale { x: x.0, c }, value))
    }

    /// Adds the constant `c` to every element.
    pub fn shift(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.check_id(x)?;
        let t = self.value(x);
        let data = t.data().iter().map(|v| v + c).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(Op::Shift { x: x.0 }, value))
    }

    /// Matrix product. Accepts `(m,k) @ (k,n) -> (m,n)` or a vector on the
    /// left: `(k,) @ (k,n) -> (n,)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        self.check_id(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        };
        if tb.rank() != 2 {
            return Err(mismatch());
        }
        let (k, n) = (tb.shape()[0], tb.shape()[1]);
        let value = match ta.rank() {
            1 => {
                if ta.shape()[0] != k {
                    return Err(mismatch());
                }
                Tensor::vector(matmul_kernel(ta.data(), tb.data(), 1, k, n))
            }
            2 => {
                if ta.shape()[1] != k {
                    return Err(mismatch());
                }
                let m = ta.shape()[0];
                Tensor::matrix(m, n, matmul_kernel(ta.data(), tb.data(), m, k, n))?
            }
            _ => return Err(mismatch()),
        };
        Ok(self.push(Op::MatMul { a: a.0, b: b.0 }, value))
    }

    /// Elementwise `max(x, 0)`.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        let t = self.value(x);
        let data = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(Op::Relu { x: x.0 }, value))
    }

    fn rows_cols(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
        match t.rank() {
            1 => Ok((1, t.shape()[0])),
            2 => Ok((t.shape()[0], t.shape()[1])),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![],
            }),
        }
    }

    /// Temperature softmax over the last axis. `tau` must be positive; the
    /// logits are divided by `tau` before max-subtraction stabilization.
    pub fn softmax_t(&mut self, x: NodeId, tau: f64) -> Result<NodeId> {
        self.check_id(x)?;
        if !(tau > 0.0) {
            return Err(Error::invalid(format!("softmax temperature {tau} must be > 0")));
        }
        let t = self.value(x);
        let (rows, cols) = Self::rows_cols(t, "softmax_t")?;
        let value = Tensor::new(
            t.shape().to_vec(),
            softmax_rows_kernel(t.data(), rows, cols, tau),
        )?;
        Ok(self.push(Op::SoftmaxT { x: x.0, tau }, value))
    }

    /// Temperature log-softmax over the last axis; same conventions as
    /// [`Tape::softmax_t`].
    pub fn log_softmax_t(&mut self, x: NodeId, tau: f64) -> Result<NodeId> {
        self.check_id(x)?;
        if !(tau > 0.0) {
            return Err(Error::invalid(format!("softmax temperature {tau} must be > 0")));
        }
        let t = self.value(x);
        let (rows, cols) = Self::rows_cols(t, "log_softmax_t")?;
        let value = Tensor::new(
            t.shape().to_vec(),
            log_softmax_rows_kernel(t.data(), rows, cols, tau),
        )?;
        Ok(self.push(Op::LogSoftmaxT { x: x.0, tau }, value))
    }

    fn reduce_axis(&mut self, x: NodeId, axis: Axis, mean: bool) -> Result<NodeId> {
        self.check_id(x)?;
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "reduce_axis",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let value = match axis {
            Axis::Rows => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        out[j] += t.data()[i * c + j];
                    }
                }
                if mean {
                    for v in &mut out {
                        *v /= r as f64;
                    }
                }
                Tensor::vector(out)
            }
            Axis::Cols => {
                let mut out = vec![0.0; r];
                for i in 0..r {
                    out[i] = sum_kernel(t.row(i));
                    if mean {
                        out[i] /= c as f64;
                    }
                }
                Tensor::vector(out)
            }
        };
        let op = if mean {
            Op::MeanAxis { x: x.0, axis }
        } else {
            Op::SumAxis { x: x.0, axis }
        };
        Ok(self.push(op, value))
    }

    /// Sum of a rank-2 tensor over one axis.
    pub fn sum_axis(&mut self, x: NodeId, axis: Axis) -> Result<NodeId> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean of a rank-2 tensor over one axis.
    pub fn mean_axis(&mut self, x: NodeId, axis: Axis) -> Result<NodeId> {
        self.reduce_axis(x, axis, true)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        let value = Tensor::scalar(sum_kernel(self.value(x).data()));
        Ok(self.push(Op::SumAll { x: x.0 }, value))
    }

    /// Mean of all elements, as a scalar node.
    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        let t = self.value(x);
        let value = Tensor::scalar(sum_kernel(t.data()) / t.numel() as f64);
        Ok(self.push(Op::MeanAll { x: x.0 }, value))
    }

    /// Euclidean norm of all elements, as a scalar node.
    pub fn norm2(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        let value = Tensor::scalar(norm2_kernel(self.value(x).data()));
        Ok(self.push(Op::Norm2 { x: x.0 }, value))
    }

    /// Dot product of two same-shape tensors, as a scalar node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        self.check_id(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let value = Tensor::scalar(dot_kernel(ta.data(), tb.data()));
        Ok(self.push(Op::Dot { a: a.0, b: b.0 }, value))
    }

    /// Gathers `x[idx[j]]` from a rank-1 tensor. Duplicate indices are
    /// allowed; their adjoints accumulate.
    pub fn select(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        self.check_id(x)?;
        let t = self.value(x);
        if t.rank() != 1 {
            return Err(Error::invalid("select requires a rank-1 input"));
        }
        if idx.is_empty() {
            return Err(Error::invalid("select with empty index list"));
        }
        let mut data = Vec::with_capacity(idx.len());
        for &i in &idx {
            if i >= t.numel() {
                return Err(Error::invalid(format!(
                    "select index {i} out of bounds for length {}",
                    t.numel()
                )));
            }
            data.push(t.data()[i]);
        }
        Ok(self.push(Op::Select { x: x.0, idx }, Tensor::vector(data)))
    }

    /// Copies `base` and replaces entries at `idx` with `values`. Indices
    /// must be distinct and in bounds; `values` must be rank 1 with one
    /// value per index. Replaced positions contribute no adjoint to `base`.
    pub fn scatter_replace(&mut self, base: NodeId, idx: Vec<usize>, values: NodeId) -> Result<NodeId> {
        self.check_id(base)?;
        self.check_id(values)?;
        let tb = self.value(base);
        let tv = self.value(values);
        if tb.rank() != 1 || tv.rank() != 1 {
            return Err(Error::invalid("scatter_replace requires rank-1 operands"));
        }
        if tv.numel() != idx.len() {
            return Err(Error::invalid(format!(
                "scatter_replace got {} values for {} indices",
                tv.numel(),
                idx.len()
            )));
        }
        let mut seen = vec![false; tb.numel()];
        for &i in &idx {
            if i >= tb.numel() {
                return Err(Error::invalid(format!(
                    "scatter_replace index {i} out of bounds for length {}",
                    tb.numel()
                )));
            }
            if seen[i] {
                return Err(Error::invalid(format!("scatter_replace duplicate index {i}")));
            }
            seen[i] = true;
        }
        let mut data = tb.data().to_vec();
        for (j, &i) in idx.iter().enumerate() {
            data[i] = tv.data()[j];
        }
        Ok(self.push(
            Op::ScatterReplace {
                base: base.0,
                idx,
                values: values.0,
            },
            Tensor::vector(data),
        ))
    }

    /// Minimum of two scalar nodes. On a tie the adjoint splits evenly.
    pub fn min_scalar(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        self.check_id(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_scalar() || !tb.is_scalar() {
            return Err(Error::invalid("min_scalar requires scalar operands"));
        }
        let value = Tensor::scalar(ta.scalar_value().min(tb.scalar_value()));
        Ok(self.push(Op::MinScalar { a: a.0, b: b.0 }, value))
    }

    /// Broadcasts a scalar node to a rank-1 tensor of length `n`.
    pub fn repeat(&mut self, x: NodeId, n: usize) -> Result<NodeId> {
        self.check_id(x)?;
        let t = self.value(x);
        if !t.is_scalar() {
            return Err(Error::invalid("repeat requires a scalar operand"));
        }
        if n == 0 {
            return Err(Error::invalid("repeat length must be positive"));
        }
        let value = Tensor::vector(vec![t.scalar_value(); n]);
        Ok(self.push(Op::Repeat { x: x.0, n }, value))
    }

    /// Spike nonlinearity on the distance above threshold (see
    /// [`SpikeMode`]). `width` is the rectangular surrogate window width and
    /// must be positive. In `Hard` mode the forward value is an exact step
    /// with ties firing; both modes share the rectangular backward rule.
    pub fn spike(&mut self, x: NodeId, width: f64, mode: SpikeMode) -> Result<NodeId> {
        self.check_id(x)?;
        if !(width > 0.0) {
            return Err(Error::invalid(format!("surrogate width {width} must be > 0")));
        }
        let t = self.value(x);
        let data: Vec<f64> = match mode {
            SpikeMode::Hard => t
                .data()
                .iter()
                .map(|&v| if v >= 0.0 { 1.0 } else { 0.0 })
                .collect(),
            SpikeMode::Relaxed => t
                .data()
                .iter()
                .map(|&v| (v / width + 0.5).clamp(0.0, 1.0))
                .collect(),
        };
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(Op::Spike { x: x.0, width }, value))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Accumulates gradients of the scalar node `output` with respect to
    /// every node it depends on. The tape is untouched, so repeated calls
    /// with different outputs reuse the same forward pass.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        self.check_id(output)?;
        if !self.value(output).is_scalar() {
            return Err(Error::invalid(format!(
                "backward requires a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::scalar(1.0));

        for i in (0..=output.0).rev() {
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.apply_backward(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], target: usize, delta: &[f64]) {
        let shape = self.nodes[target].value.shape().to_vec();
        debug_assert_eq!(delta.len(), self.nodes[target].value.numel());
        match &mut grads[target] {
            Some(existing) => {
                for (o, d) in existing.data_mut().iter_mut().zip(delta) {
                    *o += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(shape, delta.to_vec()).expect("gradient shape"));
            }
        }
    }

    fn apply_backward(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gv = g.data();
        match &self.nodes[i].op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add { a, b } => {
                self.accum(grads, *a, gv);
                self.accum(grads, *b, gv);
            }
            Op::AddN { xs } => {
                for &x in xs {
                    self.accum(grads, x, gv);
                }
            }
            Op::Mul { a, b } => {
                let da = mul_kernel(gv, self.nodes[*b].value.data());
                let db = mul_kernel(gv, self.nodes[*a].value.data());
                self.accum(grads, *a, &da);
                self.accum(grads, *b, &db);
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = gv.iter().map(|v| v * c).collect();
                self.accum(grads, *x, &dx);
            }
            Op::Shift { x } => {
                self.accum(grads, *x, gv);
            }
            Op::MatMul { a, b } => {
                let ta = &self.nodes[*a].value;
                let tb = &self.nodes[*b].value;
                let (k, n) = (tb.shape()[0], tb.shape()[1]);
                let m = if ta.rank() == 1 { 1 } else { ta.shape()[0] };
                // dA[i,p] = sum_j g[i,j] B[p,j]; dB[p,j] = sum_i A[i,p] g[i,j]
                let mut da = vec![0.0; m * k];
                for ii in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += gv[ii * n + j] * tb.data()[p * n + j];
                        }
                        da[ii * k + p] = acc;
                    }
                }
                let mut db = vec![0.0; k * n];
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for ii in 0..m {
                            acc += ta.data()[ii * k + p] * gv[ii * n + j];
                        }
                        db[p * n + j] = acc;
                    }
                }
                self.accum(grads, *a, &da);
                self.accum(grads, *b, &db);
            }
            Op::Relu { x } => {
                let tx = &self.nodes[*x].value;
                let dx: Vec<f64> = tx
                    .data()
                    .iter()
                    .zip(gv)
                    .map(|(&v, &gg)| if v > 0.0 { gg } else { 0.0 })
                    .collect();
                self.accum(grads, *x, &dx);
            }
            Op::SoftmaxT { x, tau } => {
                // y = softmax(x / tau); dx = (y * (g - <y, g>)) / tau per row
                let y = &self.nodes[i].value;
                let (rows, cols) = Self::rows_cols(y, "softmax_t").expect("checked at forward");
                let mut dx = vec![0.0; y.numel()];
                for r in 0..rows {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &gv[r * cols..(r + 1) * cols];
                    let inner = dot_kernel(yr, gr);
                    for j in 0..cols {
                        dx[r * cols + j] = yr[j] * (gr[j] - inner) / tau;
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::LogSoftmaxT { x, tau } => {
                // out = log softmax(x / tau); dx = (g - p * sum(g)) / tau per row
                let out = &self.nodes[i].value;
                let (rows, cols) = Self::rows_cols(out, "log_softmax_t").expect("checked at forward");
                let mut dx = vec![0.0; out.numel()];
                for r in 0..rows {
                    let or = &out.data()[r * cols..(r + 1) * cols];
                    let gr = &gv[r * cols..(r + 1) * cols];
                    let gsum = sum_kernel(gr);
                    for j in 0..cols {
                        dx[r * cols + j] = (gr[j] - or[j].exp() * gsum) / tau;
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let tx = &self.nodes[*x].value;
                let (r, c) = (tx.shape()[0], tx.shape()[1]);
                let mean = matches!(self.nodes[i].op, Op::MeanAxis { .. });
                let mut dx = vec![0.0; r * c];
                match axis {
                    Axis::Rows => {
                        let f = if mean { 1.0 / r as f64 } else { 1.0 };
                        for ii in 0..r {
                            for j in 0..c {
                                dx[ii * c + j] = gv[j] * f;
                            }
                        }
                    }
                    Axis::Cols => {
                        let f = if mean { 1.0 / c as f64 } else { 1.0 };
                        for ii in 0..r {
                            for j in 0..c {
                                dx[ii * c + j] = gv[ii] * f;
                            }
                        }
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::SumAll { x } => {
                let n = self.nodes[*x].value.numel();
                let dx = vec![gv[0]; n];
                self.accum(grads, *x, &dx);
            }
            Op::MeanAll { x } => {
                let n = self.nodes[*x].value.numel();
                let dx = vec![gv[0] / n as f64; n];
                self.accum(grads, *x, &dx);
            }
            Op::Norm2 { x } => {
                let tx = &self.nodes[*x].value;
                let n = self.nodes[i].value.scalar_value();
                let dx: Vec<f64> = if n == 0.0 {
                    vec![0.0; tx.numel()]
                } else {
                    tx.data().iter().map(|&v| gv[0] * v / n).collect()
                };
                self.accum(grads, *x, &dx);
            }
            Op::Dot { a, b } => {
                let da: Vec<f64> = self.nodes[*b].value.data().iter().map(|v| gv[0] * v).collect();
                let db: Vec<f64> = self.nodes[*a].value.data().iter().map(|v| gv[0] * v).collect();
                self.accum(grads, *a, &da);
                self.accum(grads, *b, &db);
            }
            Op::Select { x, idx } => {
                let mut dx = vec![0.0; self.nodes[*x].value.numel()];
                for (j, &src) in idx.iter().enumerate() {
                    dx[src] += gv[j];
                }
                self.accum(grads, *x, &dx);
            }
            Op::ScatterReplace { base, idx, values } => {
                let mut dbase = gv.to_vec();
                let mut dvalues = vec![0.0; idx.len()];
                for (j, &pos) in idx.iter().enumerate() {
                    dvalues[j] = gv[pos];
                    dbase[pos] = 0.0;
                }
                self.accum(grads, *base, &dbase);
                self.accum(grads, *values, &dvalues);
            }
            Op::MinScalar { a, b } => {
                let va = self.nodes[*a].value.scalar_value();
                let vb = self.nodes[*b].value.scalar_value();
                if va < vb {
                    self.accum(grads, *a, gv);
                } else if vb < va {
                    self.accum(grads, *b, gv);
                } else {
                    let half = [gv[0] * 0.5];
                    self.accum(grads, *a, &half);
                    self.accum(grads, *b, &half);
                }
            }
            Op::Repeat { x, n } => {
                let mut acc = 0.0;
                for j in 0..*n {
                    acc += gv[j];
                }
                self.accum(grads, *x, &[acc]);
            }
            Op::Spike { x, width } => {
                let tx = &self.nodes[*x].value;
                let half = width / 2.0;
                let dx: Vec<f64> = tx
                    .data()
                    .iter()
                    .zip(gv)
                    .map(|(&v, &gg)| if v.abs() < half { gg / width } else { 0.0 })
                    .collect();
                self.accum(grads, *x, &dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_leaf(tape: &mut Tape, v: f64) -> NodeId {
        tape.leaf(Tensor::scalar(v))
    }

    #[test]
    fn add_mul_chain_gradients() {
        // f = (a + b) * a; df/da = 2a + b, df/db = a
        let mut tape = Tape::new();
        let a = scalar_leaf(&mut tape, 3.0);
        let b = scalar_leaf(&mut tape, 5.0);
        let s = tape.add(a, b).unwrap();
        let f = tape.mul(s, a).unwrap();
        assert_eq!(tape.value(f).scalar_value(), 24.0);
        let g = tape.backward(f).unwrap();
        assert_eq!(g.wrt(a).unwrap().scalar_value(), 11.0);
        assert_eq!(g.wrt(b).unwrap().scalar_value(), 3.0);
    }

    #[test]
    fn matmul_identity_and_gradient() {
        let mut tape = Tape::new();
        let eye = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = tape.leaf(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let out = tape.matmul(eye, v).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0]);
        let s = tape.sum_all(out).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(v).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn vector_matmul_shapes_and_grads() {
        // x (2,) @ W (2,3) -> (3,)
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let w = tape.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let out = tape.matmul(x, w).unwrap();
        assert_eq!(tape.value(out).data(), &[9.0, 12.0, 15.0]);
        let s = tape.sum_all(out).unwrap();
        let g = tape.backward(s).unwrap();
        // d/dx_p = sum_j W[p, j]
        assert_eq!(g.wrt(x).unwrap().data(), &[6.0, 15.0]);
        // d/dW[p, j] = x_p
        assert_eq!(g.wrt(w).unwrap().data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn stop_grad_blocks_upstream_flow() {
        // f = a * stop(a); df/da = stop(a) only.
        let mut tape = Tape::new();
        let a = scalar_leaf(&mut tape, 3.0);
        let sg = tape.stop_grad(a).unwrap();
        let f = tape.mul(a, sg).unwrap();
        let g = tape.backward(f).unwrap();
        assert_eq!(g.wrt(a).unwrap().scalar_value(), 3.0);
    }

    #[test]
    fn min_scalar_tie_splits_gradient_evenly() {
        let mut tape = Tape::new();
        let a = scalar_leaf(&mut tape, 2.0);
        let b = scalar_leaf(&mut tape, 2.0);
        let m = tape.min_scalar(a, b).unwrap();
        let g = tape.backward(m).unwrap();
        assert_eq!(g.wrt(a).unwrap().scalar_value(), 0.5);
        assert_eq!(g.wrt(b).unwrap().scalar_value(), 0.5);

        let mut tape = Tape::new();
        let a = scalar_leaf(&mut tape, 2.0);
        let b = scalar_leaf(&mut tape, 5.0);
        let m = tape.min_scalar(a, b).unwrap();
        assert_eq!(tape.value(m).scalar_value(), 2.0);
        let g = tape.backward(m).unwrap();
        assert_eq!(g.wrt(a).unwrap().scalar_value(), 1.0);
        assert!(g.is_zero(b));
    }

    #[test]
    fn select_accumulates_duplicate_indices() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sel = tape.select(x, vec![1, 1, 2]).unwrap();
        assert_eq!(tape.value(sel).data(), &[2.0, 2.0, 3.0]);
        let s = tape.sum_all(sel).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 2.0, 1.0]);
    }

    #[test]
    fn scatter_replace_routes_gradients() {
        let mut tape = Tape::new();
        let base = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let vals = tape.leaf(Tensor::vector(vec![9.0]));
        let out = tape.scatter_replace(base, vec![1], vals).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 9.0, 3.0]);
        let s = tape.sum_all(out).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(base).unwrap().data(), &[1.0, 0.0, 1.0]);
        assert_eq!(g.wrt(vals).unwrap().data(), &[1.0]);
    }

    #[test]
    fn scatter_replace_rejects_duplicate_indices() {
        let mut tape = Tape::new();
        let base = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let vals = tape.leaf(Tensor::vector(vec![9.0, 8.0]));
        assert!(tape.scatter_replace(base, vec![1, 1], vals).is_err());
    }

    #[test]
    fn softmax_node_forward_matches_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let p = tape.softmax_t(x, 1.0).unwrap();
        for &v in tape.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.softmax_t(x, 0.0).is_err());
        assert!(tape.softmax_t(x, -1.0).is_err());
        assert!(tape.log_softmax_t(x, f64::NAN).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_output() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn repeated_backward_on_one_tape() {
        let mut tape = Tape::new();
        let x = scalar_leaf(&mut tape, 2.0);
        let sq = tape.mul(x, x).unwrap();
        let cube = tape.mul(sq, x).unwrap();
        let g1 = tape.backward(sq).unwrap();
        let g2 = tape.backward(cube).unwrap();
        assert_eq!(g1.wrt(x).unwrap().scalar_value(), 4.0);
        assert_eq!(g2.wrt(x).unwrap().scalar_value(), 12.0);
    }

    #[test]
    fn spike_forward_modes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-0.6, -0.2, 0.0, 0.3]));
        let hard = tape.spike(x, 1.0, SpikeMode::Hard).unwrap();
        assert_eq!(tape.value(hard).data(), &[0.0, 0.0, 1.0, 1.0]);
        let relaxed = tape.spike(x, 1.0, SpikeMode::Relaxed).unwrap();
        assert_eq!(tape.value(relaxed).data(), &[0.0, 0.3, 0.5, 0.8]);
    }

    #[test]
    fn spike_backward_is_rectangular_window() {
        for mode in [SpikeMode::Hard, SpikeMode::Relaxed] {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector(vec![-0.7, -0.3, 0.0, 0.49, 0.51]));
            let s = tape.spike(x, 1.0, mode).unwrap();
            let sum = tape.sum_all(s).unwrap();
            let g = tape.backward(sum).unwrap();
            assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0, 1.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn norm2_gradient_and_origin_subgradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
        let n = tape.norm2(x).unwrap();
        assert_eq!(tape.value(n).scalar_value(), 5.0);
        let g = tape.backward(n).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.6, 0.8]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let n = tape.norm2(x).unwrap();
        let g = tape.backward(n).unwrap();
        assert!(g.is_zero(x));
    }

    #[test]
    fn axis_reductions() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let rows = tape.sum_axis(x, Axis::Rows).unwrap();
        assert_eq!(tape.value(rows).data(), &[5.0, 7.0, 9.0]);
        let cols = tape.mean_axis(x, Axis::Cols).unwrap();
        assert_eq!(tape.value(cols).data(), &[2.0, 5.0]);
        let s = tape.sum_all(cols).unwrap();
        let g = tape.backward(s).unwrap();
        let third = 1.0 / 3.0;
        for &v in g.wrt(x).unwrap().data() {
            assert!((v - third).abs() < 1e-15);
        }
    }
}
