//! Gradient tape: records forward operations, replays them in reverse.
//!
//! Handles are indices into the tape's node list, so every operation can only
//! reference earlier nodes and a single reverse sweep is a valid topological
//! order. One tape per optimization step; tapes are never reused.

use crate::error::{Error, Result};
use crate::numerics::{dims2, dot, norm, Tensor, NORM_EPS};

pub type VarId = usize;

/// Variance epsilon for row layer normalization.
const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.044715;
// sqrt(2/pi)
const GELU_S: f64 = 0.797_884_560_802_865_4;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: VarId, b: VarId },
    Add { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    Scale { x: VarId, c: f64 },
    Exp { x: VarId },
    MinZero { x: VarId },
    Gelu { x: VarId },
    Sum { x: VarId },
    SoftmaxRows { x: VarId },
    L2NormalizeRows { x: VarId },
    LayerNormRows { x: VarId, gamma: VarId, beta: VarId },
    Transpose { x: VarId },
    ConcatRows { parts: Vec<VarId> },
    ConcatCols { parts: Vec<VarId> },
    SliceRows { x: VarId, start: usize, len: usize },
    SliceCols { x: VarId, start: usize, len: usize },
    CrossEntropy { logits: VarId, label: usize },
    Cosine { a: VarId, b: VarId },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
}

/// Accumulated gradients from one backward sweep, indexed by [`VarId`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to the given node. Zero-filled for
    /// tracked nodes the loss never reached.
    pub fn wrt(&self, id: VarId) -> &[f64] {
        self.grads[id]
            .as_deref()
            .expect("gradient requested for an untracked node")
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor as a constant leaf (never receives gradient).
    pub fn constant(&mut self, t: &Tensor) -> VarId {
        self.push(Op::Leaf, t.shape().to_vec(), t.values().to_vec(), false)
    }

    pub fn constant_values(&mut self, shape: Vec<usize>, values: Vec<f64>) -> VarId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.push(Op::Leaf, shape, values, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> VarId {
        self.push(Op::Leaf, vec![1], vec![v], false)
    }

    /// Register a tensor as a leaf, honoring its `requires_grad` flag, and
    /// record the handle back onto the tensor.
    pub fn watch(&mut self, t: &mut Tensor) -> VarId {
        let id = self.push(
            Op::Leaf,
            t.shape().to_vec(),
            t.values().to_vec(),
            t.requires_grad,
        );
        t.tape_id = Some(id);
        id
    }

    pub fn values(&self, id: VarId) -> &[f64] {
        &self.nodes[id].values
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn scalar(&self, id: VarId) -> f64 {
        debug_assert_eq!(self.nodes[id].values.len(), 1);
        self.nodes[id].values[0]
    }

    pub fn to_tensor(&self, id: VarId) -> Tensor {
        Tensor::new(self.nodes[id].shape.clone(), self.nodes[id].values.clone())
            .expect("tape node is shape-consistent")
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            op,
            shape,
            values,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn needs_grad(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn d2(&self, id: VarId) -> (usize, usize) {
        dims2(&self.nodes[id].shape)
    }

    // ── Forward operations ────────────────────────────────────────────

    /// `a @ b` for a: m×k, b: k×n.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, ka) = self.d2(a);
        let (kb, n) = self.d2(b);
        if ka != kb {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        let av = &self.nodes[a].values;
        let bv = &self.nodes[b].values;
        for i in 0..m {
            for p in 0..ka {
                let aip = av[i * ka + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Op::MatMul { a, b }, vec![m, n], out, rg))
    }

    /// Elementwise sum; shapes must agree exactly.
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(self.shape_err("add", a, b));
        }
        let out: Vec<f64> = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.needs_grad(&[a, b]);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::Add { a, b }, shape, out, rg))
    }

    /// Elementwise product; shapes must agree exactly.
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(self.shape_err("mul", a, b));
        }
        let out: Vec<f64> = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.needs_grad(&[a, b]);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::Mul { a, b }, shape, out, rg))
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        let out: Vec<f64> = self.nodes[x].values.iter().map(|v| v * c).collect();
        let rg = self.needs_grad(&[x]);
        let shape = self.nodes[x].shape.clone();
        self.push(Op::Scale { x, c }, shape, out, rg)
    }

    pub fn exp(&mut self, x: VarId) -> VarId {
        let out: Vec<f64> = self.nodes[x].values.iter().map(|v| v.exp()).collect();
        let rg = self.needs_grad(&[x]);
        let shape = self.nodes[x].shape.clone();
        self.push(Op::Exp { x }, shape, out, rg)
    }

    /// Elementwise `min(x, 0)`.
    pub fn min_zero(&mut self, x: VarId) -> VarId {
        let out: Vec<f64> = self.nodes[x].values.iter().map(|v| v.min(0.0)).collect();
        let rg = self.needs_grad(&[x]);
        let shape = self.nodes[x].shape.clone();
        self.push(Op::MinZero { x }, shape, out, rg)
    }

    /// Tanh-approximation GELU, smooth everywhere.
    pub fn gelu(&mut self, x: VarId) -> VarId {
        let out: Vec<f64> = self.nodes[x].values.iter().map(|&v| gelu_val(v)).collect();
        let rg = self.needs_grad(&[x]);
        let shape = self.nodes[x].shape.clone();
        self.push(Op::Gelu { x }, shape, out, rg)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: VarId) -> VarId {
        let s: f64 = self.nodes[x].values.iter().sum();
        let rg = self.needs_grad(&[x]);
        self.push(Op::Sum { x }, vec![1], vec![s], rg)
    }

    /// Row-wise stabilized softmax.
    pub fn softmax_rows(&mut self, x: VarId) -> VarId {
        let (r, c) = self.d2(x);
        let xv = &self.nodes[x].values;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_row(&xv[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let rg = self.needs_grad(&[x]);
        let shape = self.nodes[x].shape.clone();
        self.push(Op::SoftmaxRows { x }, shape, out, rg)
    }

    /// Row-wise L2 normalization; errors on any near-zero row.
    pub fn l2_normalize_rows(&mut self, x: VarId) -> Result<VarId> {
        let (r, c) = self.d2(x);
        let xv = &self.nodes[x].values;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let n = norm(row);
            if n < NORM_EPS {
                return Err(Error::DegenerateVector {
                    context: format!("l2_normalize_rows: row {i}"),
                    eps: NORM_EPS,
                });
            }
            for j in 0..c {
                out[i * c + j] = row[j] / n;
            }
        }
        let rg = self.needs_grad(&[x]);
        let shape = self.nodes[x].shape.clone();
        Ok(self.push(Op::L2NormalizeRows { x }, shape, out, rg))
    }

    /// Row-wise layer normalization with affine parameters (length = cols).
    pub fn layer_norm_rows(&mut self, x: VarId, gamma: VarId, beta: VarId) -> Result<VarId> {
        let (r, c) = self.d2(x);
        if self.nodes[gamma].values.len() != c || self.nodes[beta].values.len() != c {
            return Err(self.shape_err("layer_norm_rows", x, gamma));
        }
        let xv = &self.nodes[x].values;
        let gv = &self.nodes[gamma].values;
        let bv = &self.nodes[beta].values;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv * gv[j] + bv[j];
            }
        }
        let rg = self.needs_grad(&[x, gamma, beta]);
        let shape = self.nodes[x].shape.clone();
        Ok(self.push(Op::LayerNormRows { x, gamma, beta }, shape, out, rg))
    }

    pub fn transpose(&mut self, x: VarId) -> VarId {
        let (r, c) = self.d2(x);
        let xv = &self.nodes[x].values;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let rg = self.needs_grad(&[x]);
        self.push(Op::Transpose { x }, vec![c, r], out, rg)
    }

    /// Stack matrices vertically; all parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput { op: "concat_rows" });
        }
        let (_, c0) = self.d2(parts[0]);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.d2(p);
            if c != c0 {
                return Err(self.shape_err("concat_rows", parts[0], p));
            }
            rows += r;
            out.extend_from_slice(&self.nodes[p].values);
        }
        let rg = self.needs_grad(parts);
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            vec![rows, c0],
            out,
            rg,
        ))
    }

    /// Stack matrices side by side; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput { op: "concat_cols" });
        }
        let (r0, _) = self.d2(parts[0]);
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.d2(p);
            if r != r0 {
                return Err(self.shape_err("concat_cols", parts[0], p));
            }
            cols += c;
        }
        let mut out = vec![0.0; r0 * cols];
        let mut at = 0;
        for &p in parts {
            let (_, c) = self.d2(p);
            let pv = &self.nodes[p].values;
            for i in 0..r0 {
                out[i * cols + at..i * cols + at + c].copy_from_slice(&pv[i * c..(i + 1) * c]);
            }
            at += c;
        }
        let rg = self.needs_grad(parts);
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            vec![r0, cols],
            out,
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let (r, c) = self.d2(x);
        if start + len > r {
            return Err(Error::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                limit: r,
            });
        }
        let out = self.nodes[x].values[start * c..(start + len) * c].to_vec();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Op::SliceRows { x, start, len }, vec![len, c], out, rg))
    }

    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let (r, c) = self.d2(x);
        if start + len > c {
            return Err(Error::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                limit: c,
            });
        }
        let xv = &self.nodes[x].values;
        let mut out = vec![0.0; r * len];
        for i in 0..r {
            out[i * len..(i + 1) * len].copy_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Op::SliceCols { x, start, len }, vec![r, len], out, rg))
    }

    /// `-log softmax(logits)[label]`, computed with max subtraction.
    pub fn cross_entropy(&mut self, logits: VarId, label: usize) -> Result<VarId> {
        let n = self.nodes[logits].values.len();
        if label >= n {
            return Err(Error::IndexOutOfRange {
                op: "cross_entropy",
                index: label,
                limit: n,
            });
        }
        let lv = &self.nodes[logits].values;
        let m = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + lv.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - lv[label];
        let rg = self.needs_grad(&[logits]);
        Ok(self.push(Op::CrossEntropy { logits, label }, vec![1], vec![loss], rg))
    }

    /// Cosine similarity of two equal-length vectors, as a scalar node.
    pub fn cosine(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.nodes[a].values.len() != self.nodes[b].values.len() {
            return Err(self.shape_err("cosine", a, b));
        }
        let na = norm(&self.nodes[a].values);
        let nb = norm(&self.nodes[b].values);
        if na < NORM_EPS || nb < NORM_EPS {
            return Err(Error::DegenerateVector {
                context: "cosine".to_string(),
                eps: NORM_EPS,
            });
        }
        let c = dot(&self.nodes[a].values, &self.nodes[b].values) / (na * nb);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Op::Cosine { a, b }, vec![1], vec![c], rg))
    }

    /// Elementwise mean of the given same-shaped nodes.
    pub fn mean_of(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput { op: "mean_of" });
        }
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        Ok(self.scale(acc, 1.0 / parts.len() as f64))
    }

    fn shape_err(&self, op: &'static str, a: VarId, b: VarId) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.nodes[a].shape.clone(),
            rhs: self.nodes[b].shape.clone(),
        }
    }

    // ── Backward ──────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every tracked node reachable from
    /// the loss receives its accumulated gradient; tracked nodes the loss
    /// never touches come back zero-filled.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        if loss >= self.nodes.len() {
            return Err(Error::IndexOutOfRange {
                op: "backward",
                index: loss,
                limit: self.nodes.len(),
            });
        }
        if self.nodes[loss].values.len() != 1 {
            return Err(Error::LossNotScalar {
                shape: self.nodes[loss].shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad || grads[id].is_none() {
                continue;
            }
            let up = grads[id].take().expect("just checked");
            self.propagate(id, &up, &mut grads);
            grads[id] = Some(up);
        }

        // Tracked leaves the loss never reached get explicit zeros.
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[id].is_none() {
                grads[id] = Some(vec![0.0; node.values.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: VarId, delta: &[f64]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let slot = grads[id].get_or_insert_with(|| vec![0.0; self.nodes[id].values.len()]);
        for (g, d) in slot.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn propagate(&self, id: VarId, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.d2(*a);
                let (_, n) = self.d2(*b);
                if self.nodes[*a].requires_grad {
                    // dA = dC @ B^T
                    let bv = &self.nodes[*b].values;
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let u = up[i * n + j];
                            if u == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += u * bv[p * n + j];
                            }
                        }
                    }
                    self.accumulate(grads, *a, &da);
                }
                if self.nodes[*b].requires_grad {
                    // dB = A^T @ dC
                    let av = &self.nodes[*a].values;
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * up[i * n + j];
                            }
                        }
                    }
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, up);
                self.accumulate(grads, *b, up);
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].requires_grad {
                    let da: Vec<f64> = up
                        .iter()
                        .zip(&self.nodes[*b].values)
                        .map(|(u, y)| u * y)
                        .collect();
                    self.accumulate(grads, *a, &da);
                }
                if self.nodes[*b].requires_grad {
                    let db: Vec<f64> = up
                        .iter()
                        .zip(&self.nodes[*a].values)
                        .map(|(u, x)| u * x)
                        .collect();
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = up.iter().map(|u| u * c).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Exp { x } => {
                let dx: Vec<f64> = up
                    .iter()
                    .zip(&self.nodes[id].values)
                    .map(|(u, y)| u * y)
                    .collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::MinZero { x } => {
                let dx: Vec<f64> = up
                    .iter()
                    .zip(&self.nodes[*x].values)
                    .map(|(u, &v)| if v < 0.0 { *u } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Gelu { x } => {
                let dx: Vec<f64> = up
                    .iter()
                    .zip(&self.nodes[*x].values)
                    .map(|(u, &v)| u * gelu_grad(v))
                    .collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Sum { x } => {
                let dx = vec![up[0]; self.nodes[*x].values.len()];
                self.accumulate(grads, *x, &dx);
            }
            Op::SoftmaxRows { x } => {
                let (r, c) = self.d2(*x);
                let y = &self.nodes[id].values;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let ur = &up[i * c..(i + 1) * c];
                    let s = dot(yr, ur);
                    for j in 0..c {
                        dx[i * c + j] = yr[j] * (ur[j] - s);
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::L2NormalizeRows { x } => {
                let (r, c) = self.d2(*x);
                let xv = &self.nodes[*x].values;
                let y = &self.nodes[id].values;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let xr = &xv[i * c..(i + 1) * c];
                    let yr = &y[i * c..(i + 1) * c];
                    let ur = &up[i * c..(i + 1) * c];
                    let n = norm(xr);
                    let s = dot(yr, ur);
                    for j in 0..c {
                        dx[i * c + j] = (ur[j] - yr[j] * s) / n;
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::LayerNormRows { x, gamma, beta } => {
                let (r, c) = self.d2(*x);
                let xv = &self.nodes[*x].values;
                let gv = &self.nodes[*gamma].values;
                let cf = c as f64;
                let mut dx = vec![0.0; r * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..r {
                    let xr = &xv[i * c..(i + 1) * c];
                    let ur = &up[i * c..(i + 1) * c];
                    let (mean, var) = mean_var(xr);
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    // xhat_j = (x_j - mean) * inv ; dxhat_j = u_j * gamma_j
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..c {
                        let xhat = (xr[j] - mean) * inv;
                        let dxhat = ur[j] * gv[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgamma[j] += ur[j] * xhat;
                        dbeta[j] += ur[j];
                    }
                    for j in 0..c {
                        let xhat = (xr[j] - mean) * inv;
                        let dxhat = ur[j] * gv[j];
                        dx[i * c + j] =
                            inv * (dxhat - sum_dxhat / cf - xhat * sum_dxhat_xhat / cf);
                    }
                }
                self.accumulate(grads, *x, &dx);
                self.accumulate(grads, *gamma, &dgamma);
                self.accumulate(grads, *beta, &dbeta);
            }
            Op::Transpose { x } => {
                let (r, c) = self.d2(*x);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = up[j * r + i];
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::ConcatRows { parts } => {
                let mut at = 0;
                for &p in parts {
                    let len = self.nodes[p].values.len();
                    self.accumulate(grads, p, &up[at..at + len]);
                    at += len;
                }
            }
            Op::ConcatCols { parts } => {
                let (r, total) = self.d2(id);
                let mut at = 0;
                for &p in parts {
                    let (_, c) = self.d2(p);
                    if self.nodes[p].requires_grad {
                        let mut dp = vec![0.0; r * c];
                        for i in 0..r {
                            dp[i * c..(i + 1) * c]
                                .copy_from_slice(&up[i * total + at..i * total + at + c]);
                        }
                        self.accumulate(grads, p, &dp);
                    }
                    at += c;
                }
            }
            Op::SliceRows { x, start, len } => {
                let (_, c) = self.d2(*x);
                let mut dx = vec![0.0; self.nodes[*x].values.len()];
                dx[start * c..(start + len) * c].copy_from_slice(up);
                self.accumulate(grads, *x, &dx);
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = self.d2(*x);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len]
                        .copy_from_slice(&up[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::CrossEntropy { logits, label } => {
                let lv = &self.nodes[*logits].values;
                let mut p = vec![0.0; lv.len()];
                softmax_row(lv, &mut p);
                p[*label] -= 1.0;
                for v in &mut p {
                    *v *= up[0];
                }
                self.accumulate(grads, *logits, &p);
            }
            Op::Cosine { a, b } => {
                let av = &self.nodes[*a].values;
                let bv = &self.nodes[*b].values;
                let na = norm(av);
                let nb = norm(bv);
                let c = self.nodes[id].values[0];
                let u = up[0];
                if self.nodes[*a].requires_grad {
                    let da: Vec<f64> = av
                        .iter()
                        .zip(bv)
                        .map(|(&x, &y)| u * (y / (na * nb) - c * x / (na * na)))
                        .collect();
                    self.accumulate(grads, *a, &da);
                }
                if self.nodes[*b].requires_grad {
                    let db: Vec<f64> = av
                        .iter()
                        .zip(bv)
                        .map(|(&x, &y)| u * (x / (na * nb) - c * y / (nb * nb)))
                        .collect();
                    self.accumulate(grads, *b, &db);
                }
            }
        }
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_S * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_S * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_S * (1.0 + 3.0 * GELU_C * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn randvec(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn softmax_of_uniform_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant_values(vec![3], vec![0.0, 0.0, 0.0]);
        let y = tape.softmax_rows(x);
        for v in tape.values(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn l2_normalize_345_triangle() {
        let mut tape = Tape::new();
        let x = tape.constant_values(vec![1, 2], vec![3.0, 4.0]);
        let y = tape.l2_normalize_rows(x).unwrap();
        assert!((tape.values(y)[0] - 0.6).abs() < 1e-15);
        assert!((tape.values(y)[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_rejects_zero_row() {
        let mut tape = Tape::new();
        let x = tape.constant_values(vec![2, 2], vec![1.0, 1.0, 0.0, 0.0]);
        let err = tape.l2_normalize_rows(x).unwrap_err();
        assert!(err.to_string().contains("row 1"));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let a = randvec(&mut rng, 3 * 4);
        let b = randvec(&mut rng, 4 * 2);
        // Oracle: plain three-nested-loop product.
        let mut expect = vec![0.0; 3 * 2];
        for i in 0..3 {
            for j in 0..2 {
                for p in 0..4 {
                    expect[i * 2 + j] += a[i * 4 + p] * b[p * 2 + j];
                }
            }
        }
        let mut tape = Tape::new();
        let av = tape.constant_values(vec![3, 4], a);
        let bv = tape.constant_values(vec![4, 2], b);
        let c = tape.matmul(av, bv).unwrap();
        for (got, want) in tape.values(c).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_operation() {
        let mut tape = Tape::new();
        let a = tape.constant_values(vec![2, 3], vec![0.0; 6]);
        let b = tape.constant_values(vec![2, 2], vec![0.0; 4]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2, 2]"));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.constant_values(vec![4], vec![0.5; 4]);
        let loss = tape.cross_entropy(logits, 2).unwrap();
        assert!((tape.scalar(loss) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_closed_form_two_class() {
        let mut tape = Tape::new();
        let logits = tape.constant_values(vec![2], vec![10.0, 0.0]);
        let loss = tape.cross_entropy(logits, 0).unwrap();
        assert!((tape.scalar(loss) - (1.0 + (-10.0f64).exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_matches_naive_oracle_at_moderate_magnitudes() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..50 {
            let c = rng.random_range(2..8);
            let logits = randvec(&mut rng, c);
            let label = rng.random_range(0..c);
            // Oracle: the unstabilized definition.
            let denom: f64 = logits.iter().map(|v| v.exp()).sum();
            let expect = -(logits[label].exp() / denom).ln();
            let mut tape = Tape::new();
            let l = tape.constant_values(vec![c], logits);
            let loss = tape.cross_entropy(l, label).unwrap();
            assert!((tape.scalar(loss) - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let logits = tape.constant_values(vec![3], vec![0.0; 3]);
        assert!(tape.cross_entropy(logits, 3).is_err());
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut tape = Tape::new();
        let mut p = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0])
            .unwrap()
            .with_requires_grad(true);
        let pid = tape.watch(&mut p);
        let loss = tape.sum(pid);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(pid), &[1.0; 6]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let mut p = Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true);
        let pid = tape.watch(&mut p);
        assert!(matches!(
            tape.backward(pid),
            Err(Error::LossNotScalar { .. })
        ));
    }

    #[test]
    fn unreachable_tracked_tensor_gets_zero_gradient() {
        let mut tape = Tape::new();
        let mut a = Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true);
        let mut b = Tensor::vector(vec![3.0, 4.0]).with_requires_grad(true);
        let aid = tape.watch(&mut a);
        let bid = tape.watch(&mut b);
        let loss = tape.sum(aid);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(bid), &[0.0, 0.0]);
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let base = randvec(&mut rng, 5);
        let fixed = randvec(&mut rng, 5);
        let grad = {
            let mut tape = Tape::new();
            let mut a = Tensor::vector(base.clone()).with_requires_grad(true);
            let aid = tape.watch(&mut a);
            let bid = tape.constant_values(vec![5], fixed.clone());
            let loss = tape.cosine(aid, bid).unwrap();
            tape.backward(loss).unwrap().wrt(aid).to_vec()
        };
        let h = 1e-5;
        for i in 0..5 {
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                let mut tape = Tape::new();
                let a = tape.constant_values(vec![5], v);
                let b = tape.constant_values(vec![5], fixed.clone());
                let c = tape.cosine(a, b).unwrap();
                tape.scalar(c)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let denom = fd.abs().max(1e-7);
            assert!(
                (grad[i] - fd).abs() / denom <= 1e-4,
                "component {i}: analytic {} vs fd {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn tape_replay_is_bit_deterministic() {
        let run = || {
            let mut rng = ChaCha20Rng::seed_from_u64(99);
            let mut tape = Tape::new();
            let mut w = Tensor::new(vec![3, 3], randvec(&mut rng, 9))
                .unwrap()
                .with_requires_grad(true);
            let wid = tape.watch(&mut w);
            let x = tape.constant_values(vec![2, 3], randvec(&mut rng, 6));
            let h = tape.matmul(x, wid).unwrap();
            let g = tape.gelu(h);
            let s = tape.softmax_rows(g);
            let loss = tape.sum(s);
            let grads = tape.backward(loss).unwrap();
            grads.wrt(wid).to_vec()
        };
        let g1 = run();
        let g2 = run();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
