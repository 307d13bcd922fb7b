//! Reverse-mode autodiff on a flat tape of rank-0/1/2 f64 tensors.
//!
//! The tape owns every intermediate value; nodes reference their inputs by
//! index, and `backward` walks the tape in reverse accumulating gradients
//! with a fixed left-to-right reduction order so runs are bitwise
//! reproducible. Loss nodes cache their logit gradients at forward time,
//! which keeps the backward pass a single scale-and-accumulate.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::losses;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Index of a node on the tape.
pub type VarId = usize;

/// A value held by the tape. Scalars use an empty shape.
#[derive(Debug, Clone)]
pub struct Value {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Value {
    pub fn scalar(v: f64) -> Self {
        Value { shape: vec![], data: vec![v] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Value { shape: vec![rows, cols], data }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

enum Op {
    Leaf,
    Add(VarId, VarId),
    /// x: [r,c], bias: [c]
    AddBias(VarId, VarId),
    Scale(VarId, f64),
    /// [m,k] x [k,n]
    MatMul(VarId, VarId),
    /// [m,k] x [n,k]^T
    MatMulNT(VarId, VarId),
    Gelu(VarId),
    LayerNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    /// Output value holds the probabilities; backward uses them directly.
    SoftmaxRows(VarId),
    Dropout {
        x: VarId,
        keep: Vec<bool>,
        scale: f64,
    },
    SliceCols {
        x: VarId,
        start: usize,
    },
    ConcatCols(Vec<VarId>),
    EmbedRows {
        table: VarId,
        ids: Vec<usize>,
    },
    /// Scalar loss; `grad` is d loss / d logits cached at forward time.
    CachedLoss {
        logits: VarId,
        grad: Vec<f64>,
    },
    WeightedSum {
        xs: Vec<VarId>,
        ws: Vec<f64>,
    },
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Build a graph with the op methods, call `backward`
/// on a scalar node, then read gradients of leaves with `grad`.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Value {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: VarId) -> Option<&[f64]> {
        self.grads[id].as_deref()
    }

    fn push(&mut self, value: Value, op: Op, requires_grad: bool) -> VarId {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    fn requires(&self, id: VarId) -> bool {
        self.nodes[id].requires_grad
    }

    fn dims(&self, id: VarId) -> (usize, usize) {
        (self.nodes[id].value.rows(), self.nodes[id].value.cols())
    }

    /// Insert a leaf. `requires_grad` leaves receive gradients in `backward`.
    pub fn leaf(&mut self, value: Value, requires_grad: bool) -> Result<VarId> {
        let expect: usize = value.shape.iter().product();
        if value.data.len() != expect {
            return Err(Error::Shape(format!(
                "leaf data length {} does not match shape {:?}",
                value.data.len(),
                value.shape
            )));
        }
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Value) -> Result<VarId> {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.nodes[a].value.shape != self.nodes[b].value.shape {
            return Err(Error::Shape(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.nodes[a].value.shape, self.nodes[b].value.shape
            )));
        }
        let data: Vec<f64> = self.nodes[a]
            .value
            .data
            .iter()
            .zip(&self.nodes[b].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let value = Value { shape: self.nodes[a].value.shape.clone(), data };
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn add_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let (r, c) = self.dims(x);
        if self.nodes[bias].value.data.len() != c {
            return Err(Error::Shape(format!(
                "bias length {} does not match {c} columns",
                self.nodes[bias].value.data.len()
            )));
        }
        let mut data = self.nodes[x].value.data.clone();
        let b = &self.nodes[bias].value.data;
        for row in 0..r {
            for col in 0..c {
                data[row * c + col] += b[col];
            }
        }
        let value = Value { shape: self.nodes[x].value.shape.clone(), data };
        let rg = self.requires(x) || self.requires(bias);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: VarId, factor: f64) -> Result<VarId> {
        let data: Vec<f64> = self.nodes[x].value.data.iter().map(|v| v * factor).collect();
        let value = Value { shape: self.nodes[x].value.shape.clone(), data };
        let rg = self.requires(x);
        Ok(self.push(value, Op::Scale(x, factor), rg))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner mismatch: [{m},{k}] x [{k2},{n}]"
            )));
        }
        let data = kernels::matmul(&self.nodes[a].value.data, &self.nodes[b].value.data, m, k, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Value::matrix(m, n, data), Op::MatMul(a, b), rg))
    }

    /// a [m,k] x b [n,k] transposed -> [m,n]. Used for projections stored
    /// as [out,in] and for attention score matrices.
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_nt inner mismatch: [{m},{k}] x [{n},{k2}]^T"
            )));
        }
        let data =
            kernels::matmul_nt(&self.nodes[a].value.data, &self.nodes[b].value.data, m, k, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Value::matrix(m, n, data), Op::MatMulNT(a, b), rg))
    }

    pub fn gelu(&mut self, x: VarId) -> Result<VarId> {
        if self.nodes[x].value.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gelu input contains a non-finite value".into()));
        }
        let data: Vec<f64> =
            self.nodes[x].value.data.iter().map(|&v| kernels::gelu_scalar(v)).collect();
        let value = Value { shape: self.nodes[x].value.shape.clone(), data };
        let rg = self.requires(x);
        Ok(self.push(value, Op::Gelu(x), rg))
    }

    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId) -> Result<VarId> {
        let (r, c) = self.dims(x);
        if self.nodes[gamma].value.data.len() != c || self.nodes[beta].value.data.len() != c {
            return Err(Error::Shape(format!("layer norm gain/bias must have length {c}")));
        }
        let (data, mean, rstd) = kernels::layer_norm_rows(
            &self.nodes[x].value.data,
            &self.nodes[gamma].value.data,
            &self.nodes[beta].value.data,
            r,
            c,
            LAYER_NORM_EPS,
        );
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            Value::matrix(r, c, data),
            Op::LayerNorm { x, gamma, beta, mean, rstd },
            rg,
        ))
    }

    /// Row-wise softmax with additive-mask semantics expressed as a boolean
    /// validity mask: invalid positions get probability exactly zero.
    pub fn softmax_rows(&mut self, x: VarId, mask: Option<&[bool]>) -> Result<VarId> {
        let (r, c) = self.dims(x);
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::Shape(format!(
                    "softmax mask length {} does not match {r}x{c}",
                    m.len()
                )));
            }
            if m.chunks(c).any(|row| row.iter().all(|&v| !v)) {
                return Err(Error::Shape("softmax row has no valid entries".into()));
            }
        }
        let data = kernels::softmax_rows(&self.nodes[x].value.data, mask, r, c);
        let rg = self.requires(x);
        Ok(self.push(Value::matrix(r, c, data), Op::SoftmaxRows(x), rg))
    }

    /// Inverted dropout: keeps activations with probability 1-rate and
    /// rescales them by 1/(1-rate). `rate = 0` is an identity pass-through.
    pub fn dropout(&mut self, x: VarId, rate: f64, rng: &mut ChaCha12Rng) -> Result<VarId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidConfig(format!("dropout rate must be in [0,1), got {rate}")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep: Vec<bool> =
            (0..self.nodes[x].value.data.len()).map(|_| rng.gen::<f64>() >= rate).collect();
        let scale = 1.0 / (1.0 - rate);
        let data: Vec<f64> = self.nodes[x]
            .value
            .data
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * scale } else { 0.0 })
            .collect();
        let value = Value { shape: self.nodes[x].value.shape.clone(), data };
        let rg = self.requires(x);
        Ok(self.push(value, Op::Dropout { x, keep, scale }, rg))
    }

    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let (r, c) = self.dims(x);
        if start + len > c {
            return Err(Error::Shape(format!(
                "column slice {start}..{} out of range for {c} columns",
                start + len
            )));
        }
        let src = &self.nodes[x].value.data;
        let mut data = Vec::with_capacity(r * len);
        for row in 0..r {
            data.extend_from_slice(&src[row * c + start..row * c + start + len]);
        }
        let rg = self.requires(x);
        Ok(self.push(Value::matrix(r, len, data), Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, xs: &[VarId]) -> Result<VarId> {
        if xs.is_empty() {
            return Err(Error::Shape("concat_cols needs at least one input".into()));
        }
        let r = self.dims(xs[0]).0;
        if xs.iter().any(|&x| self.dims(x).0 != r) {
            return Err(Error::Shape("concat_cols inputs must share a row count".into()));
        }
        let total: usize = xs.iter().map(|&x| self.dims(x).1).sum();
        let mut data = Vec::with_capacity(r * total);
        for row in 0..r {
            for &x in xs {
                let c = self.dims(x).1;
                data.extend_from_slice(&self.nodes[x].value.data[row * c..(row + 1) * c]);
            }
        }
        let rg = xs.iter().any(|&x| self.requires(x));
        Ok(self.push(Value::matrix(r, total, data), Op::ConcatCols(xs.to_vec()), rg))
    }

    /// Gather rows of an embedding table.
    pub fn embed_rows(&mut self, table: VarId, ids: &[usize]) -> Result<VarId> {
        let (rows, d) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!(
                "embedding id {bad} out of range for table with {rows} rows"
            )));
        }
        let src = &self.nodes[table].value.data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.requires(table);
        Ok(self.push(
            Value::matrix(ids.len(), d, data),
            Op::EmbedRows { table, ids: ids.to_vec() },
            rg,
        ))
    }

    /// Label-smoothed cross entropy over non-pad rows (scalar node).
    pub fn label_smoothed_ce(
        &mut self,
        logits: VarId,
        targets: &[usize],
        pad_id: usize,
        eps: f64,
    ) -> Result<VarId> {
        let (r, c) = self.dims(logits);
        let out = losses::label_smoothed_ce_with_grad(
            &self.nodes[logits].value.data,
            r,
            c,
            targets,
            pad_id,
            eps,
        )?;
        let rg = self.requires(logits);
        Ok(self.push(
            Value::scalar(out.loss),
            Op::CachedLoss { logits, grad: out.grad },
            rg,
        ))
    }

    /// KL(teacher ‖ student) against fixed teacher probabilities (scalar
    /// node). The teacher is a constant: no gradient flows into it.
    pub fn kl_from_teacher(
        &mut self,
        student_logits: VarId,
        teacher_probs: &[f64],
        valid: &[bool],
    ) -> Result<VarId> {
        let (r, c) = self.dims(student_logits);
        let out = losses::kl_from_teacher_with_grad(
            &self.nodes[student_logits].value.data,
            r,
            c,
            teacher_probs,
            valid,
        )?;
        let rg = self.requires(student_logits);
        Ok(self.push(
            Value::scalar(out.loss),
            Op::CachedLoss { logits: student_logits, grad: out.grad },
            rg,
        ))
    }

    /// Weighted sum of scalar nodes (used to mix CE and KL terms).
    pub fn weighted_sum(&mut self, xs: &[VarId], ws: &[f64]) -> Result<VarId> {
        if xs.len() != ws.len() || xs.is_empty() {
            return Err(Error::Shape("weighted_sum needs matching non-empty inputs".into()));
        }
        let mut total = 0.0;
        for (&x, &w) in xs.iter().zip(ws) {
            if self.nodes[x].value.data.len() != 1 {
                return Err(Error::Shape("weighted_sum inputs must be scalars".into()));
            }
            total += w * self.nodes[x].value.item();
        }
        let rg = xs.iter().any(|&x| self.requires(x));
        Ok(self.push(
            Value::scalar(total),
            Op::WeightedSum { xs: xs.to_vec(), ws: ws.to_vec() },
            rg,
        ))
    }

    fn accumulate(&mut self, id: VarId, contrib: Vec<f64>) {
        match &mut self.grads[id] {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(&contrib) {
                    *gi += ci;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    /// Propagate gradients from a scalar node back to every contributing
    /// node with `requires_grad`. Gradients accumulate across calls until
    /// the tape is dropped.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.nodes[loss].value.data.len() != 1 {
            return Err(Error::Shape("backward requires a scalar loss node".into()));
        }
        if !self.nodes[loss].value.item().is_finite() {
            return Err(Error::NonFinite("loss is non-finite before backward".into()));
        }
        self.accumulate(loss, vec![1.0]);
        for i in (0..=loss).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].clone() else { continue };
            // Collect per-parent contributions first, then accumulate, so the
            // immutable reads of node values never alias the gradient writes.
            let mut contribs: Vec<(VarId, Vec<f64>)> = Vec::new();
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if self.requires(*a) {
                        contribs.push((*a, g.clone()));
                    }
                    if self.requires(*b) {
                        contribs.push((*b, g.clone()));
                    }
                }
                Op::AddBias(x, bias) => {
                    let (r, c) = self.dims(*x);
                    if self.requires(*x) {
                        contribs.push((*x, g.clone()));
                    }
                    if self.requires(*bias) {
                        let mut db = vec![0.0; c];
                        for row in 0..r {
                            for col in 0..c {
                                db[col] += g[row * c + col];
                            }
                        }
                        contribs.push((*bias, db));
                    }
                }
                Op::Scale(x, factor) => {
                    if self.requires(*x) {
                        contribs.push((*x, g.iter().map(|v| v * factor).collect()));
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = self.dims(*b).1;
                    if self.requires(*a) {
                        // dA = dC * B^T
                        let da = kernels::matmul_nt(&g, &self.nodes[*b].value.data, m, n, k);
                        contribs.push((*a, da));
                    }
                    if self.requires(*b) {
                        // dB = A^T * dC
                        let mut db = vec![0.0; k * n];
                        kernels::matmul_tn_acc(&self.nodes[*a].value.data, &g, m, k, n, &mut db);
                        contribs.push((*b, db));
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = self.dims(*b).0;
                    if self.requires(*a) {
                        // dA = dC * B
                        let da = kernels::matmul(&g, &self.nodes[*b].value.data, m, n, k);
                        contribs.push((*a, da));
                    }
                    if self.requires(*b) {
                        // dB = dC^T * A
                        let mut db = vec![0.0; n * k];
                        kernels::matmul_tn_acc(&g, &self.nodes[*a].value.data, m, n, k, &mut db);
                        contribs.push((*b, db));
                    }
                }
                Op::Gelu(x) => {
                    if self.requires(*x) {
                        let dx: Vec<f64> = self.nodes[*x]
                            .value
                            .data
                            .iter()
                            .zip(&g)
                            .map(|(&v, &gi)| gi * kernels::gelu_grad_scalar(v))
                            .collect();
                        contribs.push((*x, dx));
                    }
                }
                Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                    let (r, c) = self.dims(*x);
                    let xd = &self.nodes[*x].value.data;
                    let gm = &self.nodes[*gamma].value.data;
                    if self.requires(*x) {
                        let mut dx = vec![0.0; r * c];
                        for row in 0..r {
                            let mu = mean[row];
                            let rs = rstd[row];
                            // dyg = dy * gamma; m1 = mean(dyg); m2 = mean(dyg * xhat)
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for col in 0..c {
                                let xhat = (xd[row * c + col] - mu) * rs;
                                let dyg = g[row * c + col] * gm[col];
                                m1 += dyg;
                                m2 += dyg * xhat;
                            }
                            m1 /= c as f64;
                            m2 /= c as f64;
                            for col in 0..c {
                                let xhat = (xd[row * c + col] - mu) * rs;
                                let dyg = g[row * c + col] * gm[col];
                                dx[row * c + col] = rs * (dyg - m1 - xhat * m2);
                            }
                        }
                        contribs.push((*x, dx));
                    }
                    if self.requires(*gamma) {
                        let mut dg = vec![0.0; c];
                        for row in 0..r {
                            let mu = mean[row];
                            let rs = rstd[row];
                            for col in 0..c {
                                let xhat = (xd[row * c + col] - mu) * rs;
                                dg[col] += g[row * c + col] * xhat;
                            }
                        }
                        contribs.push((*gamma, dg));
                    }
                    if self.requires(*beta) {
                        let mut db = vec![0.0; c];
                        for row in 0..r {
                            for col in 0..c {
                                db[col] += g[row * c + col];
                            }
                        }
                        contribs.push((*beta, db));
                    }
                }
                Op::SoftmaxRows(x) => {
                    if self.requires(*x) {
                        let (r, c) = self.dims(i);
                        let p = &self.nodes[i].value.data;
                        let mut dx = vec![0.0; r * c];
                        for row in 0..r {
                            let mut dot = 0.0;
                            for col in 0..c {
                                dot += g[row * c + col] * p[row * c + col];
                            }
                            for col in 0..c {
                                dx[row * c + col] =
                                    p[row * c + col] * (g[row * c + col] - dot);
                            }
                        }
                        contribs.push((*x, dx));
                    }
                }
                Op::Dropout { x, keep, scale } => {
                    if self.requires(*x) {
                        let dx: Vec<f64> = g
                            .iter()
                            .zip(keep)
                            .map(|(&gi, &k)| if k { gi * scale } else { 0.0 })
                            .collect();
                        contribs.push((*x, dx));
                    }
                }
                Op::SliceCols { x, start } => {
                    if self.requires(*x) {
                        let (r, c) = self.dims(*x);
                        let len = self.dims(i).1;
                        let mut dx = vec![0.0; r * c];
                        for row in 0..r {
                            for col in 0..len {
                                dx[row * c + start + col] = g[row * len + col];
                            }
                        }
                        contribs.push((*x, dx));
                    }
                }
                Op::ConcatCols(xs) => {
                    let r = self.dims(i).0;
                    let total = self.dims(i).1;
                    let mut offset = 0;
                    for &x in xs {
                        let c = self.dims(x).1;
                        if self.requires(x) {
                            let mut dx = vec![0.0; r * c];
                            for row in 0..r {
                                dx[row * c..(row + 1) * c].copy_from_slice(
                                    &g[row * total + offset..row * total + offset + c],
                                );
                            }
                            contribs.push((x, dx));
                        }
                        offset += c;
                    }
                }
                Op::EmbedRows { table, ids } => {
                    if self.requires(*table) {
                        let (rows, d) = self.dims(*table);
                        let mut dt = vec![0.0; rows * d];
                        for (r, &id) in ids.iter().enumerate() {
                            for col in 0..d {
                                dt[id * d + col] += g[r * d + col];
                            }
                        }
                        contribs.push((*table, dt));
                    }
                }
                Op::CachedLoss { logits, grad } => {
                    if self.requires(*logits) {
                        contribs.push((*logits, grad.iter().map(|v| v * g[0]).collect()));
                    }
                }
                Op::WeightedSum { xs, ws } => {
                    for (&x, &w) in xs.iter().zip(ws) {
                        if self.requires(x) {
                            contribs.push((x, vec![g[0] * w]));
                        }
                    }
                }
            }
            for (id, contrib) in contribs {
                self.accumulate(id, contrib);
            }
        }
        Ok(())
    }
}
