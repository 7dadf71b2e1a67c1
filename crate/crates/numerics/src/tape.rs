//! Reverse-mode differentiation over a linear recording of operations.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and backward is a single reverse sweep.

use std::collections::BTreeMap;

use crate::error::{NumericsError, Result};
use crate::tensor::{matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, transpose_kernel, Tensor};

/// Floor applied before taking a logarithm.
pub const DEFAULT_LOG_FLOOR: f64 = 1e-12;
/// Variance epsilon used by layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
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
    AddBias,
    Mul,
    Scale,
    Softmax,
    LayerNorm,
    Gelu,
    Embedding,
    SliceRows,
    SliceCols,
    SelectRows,
    SelectCols,
    ConcatRows,
    ConcatCols,
    Transpose,
    Log,
    Sum,
    Mean,
    Detach,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    SelectCols {
        x: Var,
        cols: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Log {
        x: Var,
        floor: f64,
    },
    Sum(Var),
    Mean(Var),
    Detach(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::SelectRows { .. } => OpKind::SelectRows,
            Op::SelectCols { .. } => OpKind::SelectCols,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Log { .. } => OpKind::Log,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Detach(..) => OpKind::Detach,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward computation.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    log_floor: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_log_floor(DEFAULT_LOG_FLOOR)
    }

    pub fn with_log_floor(log_floor: f64) -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            log_floor,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// The node a detached copy was taken from.
    pub fn detached_source(&self, v: Var) -> Option<Var> {
        match self.nodes[v.0].op {
            Op::Detach(src) => Some(src),
            _ => None,
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registered trainable leaves in binding order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// Trainable leaf addressable by name in [`Gradients`].
    pub fn param(&mut self, name: &str, value: &Tensor) -> Result<Var> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(NumericsError::DuplicateParameter(name.to_string()));
        }
        let v = self.push("param", value.clone(), Op::Leaf, true)?;
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    /// Same value as `x`, but no gradient flows back through it.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.push("detach", value, Op::Detach(x), false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NumericsError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).require_matrix("matmul")?;
        let (k2, n) = self.value(b).require_matrix("matmul")?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push("add", out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= v;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", out, Op::Sub(a, b), rg)
    }

    /// `x + bias` where `bias` is 1-d and matches the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        let bshape = self.value(bias).shape();
        if bshape != [d] {
            return Err(NumericsError::ShapeMismatch {
                op: "add_bias",
                lhs: self.value(x).shape().to_vec(),
                rhs: bshape.to_vec(),
            });
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push("add_bias", out, Op::AddBias(x, bias), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * k);
        let rg = self.rg(x);
        self.push("scale", out, Op::Scale(x, k), rg)
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        let d = input.last_dim();
        if d == 0 {
            return Err(NumericsError::InvalidShape {
                op: "softmax",
                shape: input.shape().to_vec(),
                reason: "empty last axis".into(),
            });
        }
        let mut out = input.clone();
        for row in out.data_mut().chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.rg(x);
        self.push("softmax", out, Op::Softmax(x), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        for p in [gamma, beta] {
            if self.value(p).shape() != [d] {
                return Err(NumericsError::ShapeMismatch {
                    op: "layernorm",
                    lhs: self.value(x).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let input = self.value(x);
        let rows = input.outer_len();
        let mut xhat = vec![0.0; input.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = input.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std[r] = is;
            for (c, v) in row.iter().enumerate() {
                xhat[r * d + c] = (v - mean) * is;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let data: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, h)| h * g[i % d] + b[i % d])
            .collect();
        let out = Tensor::new(input.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            "layernorm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()));
        let rg = self.rg(x);
        self.push("gelu", out, Op::Gelu(x), rg)
    }

    /// Gathers rows of a `V×d` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.value(table).require_matrix("embedding")?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(NumericsError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    extent: vocab,
                });
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(table);
        self.push(
            "embedding",
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).require_matrix("slice_rows")?;
        if start > end || end > rows {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                extent: rows,
            });
        }
        let data = self.value(x).data()[start * cols..end * cols].to_vec();
        let out = Tensor::new(vec![end - start, cols], data)?;
        let rg = self.rg(x);
        self.push("slice_rows", out, Op::SliceRows { x, start }, rg)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).require_matrix("slice_cols")?;
        if start > end || end > cols {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                extent: cols,
            });
        }
        let src = self.value(x).data();
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        let out = Tensor::new(vec![rows, w], data)?;
        let rg = self.rg(x);
        self.push("slice_cols", out, Op::SliceCols { x, start }, rg)
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = self.value(x).require_matrix("select_rows")?;
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(NumericsError::IndexOutOfRange {
                    op: "select_rows",
                    index: r,
                    extent: n,
                });
            }
            data.extend_from_slice(self.value(x).row(r));
        }
        let out = Tensor::new(vec![rows.len(), cols], data)?;
        let rg = self.rg(x);
        self.push(
            "select_rows",
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (rows, n) = self.value(x).require_matrix("select_cols")?;
        if let Some(&c) = cols.iter().find(|&&c| c >= n) {
            return Err(NumericsError::IndexOutOfRange {
                op: "select_cols",
                index: c,
                extent: n,
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * cols.len());
        for r in 0..rows {
            data.extend(cols.iter().map(|&c| src[r * n + c]));
        }
        let out = Tensor::new(vec![rows, cols.len()], data)?;
        let rg = self.rg(x);
        self.push(
            "select_cols",
            out,
            Op::SelectCols {
                x,
                cols: cols.to_vec(),
            },
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.concat_check("concat_rows", parts, 1)?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
            rows += self.value(p).shape()[0];
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.concat_check("concat_cols", parts, 0)?;
        let total: usize = parts.iter().map(|&p| self.value(p).shape()[1]).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), rg)
    }

    fn concat_check(&self, op: &'static str, parts: &[Var], fixed_axis: usize) -> Result<usize> {
        let first = parts.first().ok_or_else(|| NumericsError::InvalidShape {
            op,
            shape: vec![],
            reason: "nothing to concatenate".into(),
        })?;
        let (r, c) = self.value(*first).require_matrix(op)?;
        let fixed = if fixed_axis == 0 { r } else { c };
        for &p in parts {
            let s = self.value(p).require_matrix(op)?;
            let other = if fixed_axis == 0 { s.0 } else { s.1 };
            if other != fixed {
                return Err(NumericsError::ShapeMismatch {
                    op,
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        Ok(fixed)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).require_matrix("transpose")?;
        let data = transpose_kernel(self.value(x).data(), r, c);
        let out = Tensor::new(vec![c, r], data)?;
        let rg = self.rg(x);
        self.push("transpose", out, Op::Transpose(x), rg)
    }

    /// `ln(max(x, floor))` with the tape's floor.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let floor = self.log_floor;
        let out = self.value(x).map(|v| v.max(floor).ln());
        let rg = self.rg(x);
        self.push("log", out, Op::Log { x, floor }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push("sum", out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(NumericsError::InvalidShape {
                op: "mean",
                shape: t.shape().to_vec(),
                reason: "mean of an empty tensor".into(),
            });
        }
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(x);
        self.push("mean", out, Op::Mean(x), rg)
    }

    /// Sum of several scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut iter = terms.iter();
        let first = *iter.next().ok_or_else(|| NumericsError::InvalidShape {
            op: "add_all",
            shape: vec![],
            reason: "no terms".into(),
        })?;
        let mut acc = first;
        for &t in iter {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(NumericsError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        for (name, v) in &self.params {
            if let Some(g) = &grads[v.0] {
                if !g.is_finite() {
                    return Err(NumericsError::NonFiniteGradient(name.clone()));
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, contribution: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contribution),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf | Op::Detach(_) => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.rg(*a) {
                    let da = matmul_nt_kernel(g.data(), bv.data(), m, n, k);
                    acc(*a, Tensor::new(vec![m, k], da)?);
                }
                if self.rg(*b) {
                    let db = matmul_tn_kernel(av.data(), g.data(), m, k, n);
                    acc(*b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::AddBias(x, bias) => {
                acc(*x, g.clone());
                if self.rg(*bias) {
                    let d = g.last_dim();
                    let mut db = vec![0.0; d];
                    for row in g.data().chunks(d) {
                        for (o, v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(*bias, Tensor::vector(db));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let mut da = g.clone();
                    for (o, v) in da.data_mut().iter_mut().zip(bv.data()) {
                        *o *= v;
                    }
                    acc(*a, da);
                }
                if self.rg(*b) {
                    let mut db = g.clone();
                    for (o, v) in db.data_mut().iter_mut().zip(av.data()) {
                        *o *= v;
                    }
                    acc(*b, db);
                }
            }
            Op::Scale(x, k) => acc(*x, g.map(|v| v * k)),
            Op::Softmax(x) => {
                let y = &node.value;
                let d = y.last_dim();
                let mut dx = g.clone();
                for (dx_row, y_row) in dx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                    let dot: f64 = dx_row.iter().zip(y_row).map(|(a, b)| a * b).sum();
                    for (o, yv) in dx_row.iter_mut().zip(y_row) {
                        *o = yv * (*o - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = g.last_dim();
                let gam = self.value(*gamma).data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (grow, hrow) in g.data().chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            dg[c] += grow[c] * hrow[c];
                            db[c] += grow[c];
                        }
                    }
                    acc(*gamma, Tensor::vector(dg));
                    acc(*beta, Tensor::vector(db));
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let df = d as f64;
                    for (r, (grow, hrow)) in g.data().chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let gh: Vec<f64> = grow.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let sum_gh: f64 = gh.iter().sum();
                        let sum_ghx: f64 = gh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                        for c in 0..d {
                            dx[r * d + c] =
                                inv_std[r] / df * (df * gh[c] - sum_gh - hrow[c] * sum_ghx);
                        }
                    }
                    acc(*x, Tensor::new(g.shape().to_vec(), dx)?);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (o, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                    *o *= 0.5 * (1.0 + t) + 0.5 * v * dt;
                }
                acc(*x, dx);
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.shape()[1];
                let mut dt = Tensor::zeros(tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt.data_mut()[id * d..(id + 1) * d];
                    for (o, v) in dst.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*table, dt);
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let cols = xv.shape()[1];
                let mut dx = Tensor::zeros(xv.shape());
                dx.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                acc(*x, dx);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let cols = xv.shape()[1];
                let w = g.shape()[1];
                let mut dx = Tensor::zeros(xv.shape());
                for r in 0..g.shape()[0] {
                    dx.data_mut()[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
                }
                acc(*x, dx);
            }
            Op::SelectRows { x, rows } => {
                let xv = self.value(*x);
                let cols = xv.shape()[1];
                let mut dx = Tensor::zeros(xv.shape());
                for (i, &r) in rows.iter().enumerate() {
                    let dst = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                    for (o, v) in dst.iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                acc(*x, dx);
            }
            Op::SelectCols { x, cols } => {
                let xv = self.value(*x);
                let n = xv.shape()[1];
                let mut dx = Tensor::zeros(xv.shape());
                let w = cols.len();
                for r in 0..xv.shape()[0] {
                    for (j, &c) in cols.iter().enumerate() {
                        dx.data_mut()[r * n + c] += g.data()[r * w + j];
                    }
                }
                acc(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let cols = g.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let n = shape[0] * cols;
                    let slice = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    acc(p, Tensor::new(shape, slice)?);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.shape()[0];
                let total = g.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let mut data = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        data.extend_from_slice(&g.data()[r * total + col..r * total + col + w]);
                    }
                    col += w;
                    acc(p, Tensor::new(vec![rows, w], data)?);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                acc(*x, Tensor::new(vec![c, r], transpose_kernel(g.data(), r, c))?);
            }
            Op::Log { x, floor } => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (o, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    *o = if v > *floor { *o / v } else { 0.0 };
                }
                acc(*x, dx);
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                acc(*x, Tensor::filled(&shape, g.item()));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                acc(*x, Tensor::filled(xv.shape(), g.item() / xv.len() as f64));
            }
        }
        Ok(())
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient with respect to any node; `None` when it is unreachable
    /// from the loss or does not require gradient.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Gradients of every reached parameter, keyed by name.
    pub fn by_name(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(n, v)| self.wrt(*v).map(|g| (n.clone(), g.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_symmetric() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let y = t.softmax(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![2.0, 0.0])).unwrap();
        let y = t.softmax(x).unwrap();
        let e2 = 2f64.exp();
        assert!(close(t.value(y).data()[0], e2 / (e2 + 1.0), 1e-15));
        assert!(close(t.value(y).data()[0], 0.8808, 1e-4));
        assert!(close(t.value(y).data()[1], 0.1192, 1e-4));
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1000.0, 999.0, -1000.0])).unwrap();
        let y = t.softmax(x).unwrap();
        assert!(t.value(y).is_finite());
        assert!(close(t.value(y).sum(), 1.0, 1e-12));
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::matrix(3, 3, (1..=9).map(|v| v as f64 * 0.7).collect()).unwrap();
        let mut t = Tape::new();
        let i = t.constant(Tensor::identity(3)).unwrap();
        let av = t.constant(a.clone()).unwrap();
        let y = t.matmul(i, av).unwrap();
        assert_eq!(t.value(y), &a);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = t.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        assert!(matches!(err, NumericsError::ShapeMismatch { op: "matmul", .. }));
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn add_bias_rejects_wrong_extent() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = t.constant(Tensor::zeros(&[2])).unwrap();
        assert!(t.add_bias(a, b).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let w = t.param("w", &Tensor::vector(vec![0.3, -1.0, 2.0])).unwrap();
        let s = t.sum(w).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.param("w").unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn constant_factor_scales_gradient() {
        let w0 = Tensor::vector(vec![0.3, -1.0, 2.0]);
        let grad_for = |c: f64| {
            let mut t = Tape::new();
            let w = t.param("w", &w0).unwrap();
            let sq = t.mul(w, w).unwrap();
            let s = t.sum(sq).unwrap();
            let l = t.scale(s, c).unwrap();
            t.backward(l).unwrap().param("w").unwrap().clone()
        };
        let g1 = grad_for(1.0);
        let g3 = grad_for(3.0);
        for (a, b) in g1.data().iter().zip(g3.data()) {
            assert!(close(3.0 * a, *b, 1e-14));
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let w = t.param("w", &Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(t.backward(w), Err(NumericsError::NonScalarLoss(_))));
    }

    #[test]
    fn detached_branch_gets_no_gradient() {
        let mut t = Tape::new();
        let w = t.param("w", &Tensor::vector(vec![2.0])).unwrap();
        let d = t.detach(w).unwrap();
        let y = t.mul(w, d).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        // d(w * const)/dw = const = 2, not 2w = 4.
        assert_eq!(g.param("w").unwrap().data(), &[2.0]);
        assert!(g.wrt(d).is_none());
    }

    #[test]
    fn log_is_clamped() {
        let mut t = Tape::new();
        let x = t.param("x", &Tensor::vector(vec![0.0, 1.0])).unwrap();
        let y = t.log(x).unwrap();
        assert!(close(t.value(y).data()[0], DEFAULT_LOG_FLOOR.ln(), 1e-12));
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.param("x").unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn duplicate_param_rejected() {
        let mut t = Tape::new();
        t.param("w", &Tensor::scalar(1.0)).unwrap();
        assert!(t.param("w", &Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn unreached_param_has_no_gradient() {
        let mut t = Tape::new();
        let a = t.param("a", &Tensor::scalar(1.0)).unwrap();
        let _b = t.param("b", &Tensor::scalar(1.0)).unwrap();
        let s = t.sum(a).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.param("b").is_none());
        assert_eq!(g.by_name().len(), 1);
    }

    #[test]
    fn embedding_out_of_range() {
        let mut t = Tape::new();
        let e = t.param("e", &Tensor::zeros(&[3, 2])).unwrap();
        assert!(matches!(
            t.embedding(e, &[0, 3]),
            Err(NumericsError::IndexOutOfRange { .. })
        ));
    }
}
