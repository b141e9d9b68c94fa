//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value and enough
//! saved state to replay the chain rule. Nodes only ever reference earlier
//! nodes, so a single reverse sweep visits them in topological order.
//! Parameters are read through a borrowed [`ParamStore`]; their gradients
//! come back as a [`Gradients`] buffer after [`Tape::backward`].

use std::sync::OnceLock;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{matmul_at_raw, matmul_bt_raw, matmul_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attention mask, `true` where a position may be attended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::dim("mask", &[rows, cols], &[allowed.len()]));
        }
        Ok(Self {
            rows,
            cols,
            allowed,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Self {
            rows,
            cols,
            allowed,
        }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| true)
    }

    /// Position `i` sees positions `j <= i`.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i)
    }

    /// Every row shares the same column pattern.
    pub fn broadcast_row(rows: usize, row: &[bool]) -> Self {
        Self::from_fn(rows, row.len(), |_, j| row[j])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn is_full(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embed {
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
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherCols {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterCols {
        x: Var,
        idx: Vec<usize>,
    },
    PickRows {
        x: Var,
        cols: Vec<usize>,
    },
    Log {
        x: Var,
        floor: f64,
    },
    Sum(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    // `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
}

/// Floor applied to row norms before dividing in [`Tape::normalize_rows`].
pub const NORM_FLOOR: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn empty_store() -> &'static ParamStore {
    static EMPTY: OnceLock<ParamStore> = OnceLock::new();
    EMPTY.get_or_init(ParamStore::new)
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

/// Result of a reverse sweep.
pub struct Backward {
    node_grads: Vec<Option<Tensor>>,
    pub params: Gradients,
}

impl Backward {
    /// Gradient of the loss with respect to any node, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.node_grads[v.0].as_ref()
    }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match (&self.nodes[v.0].value, &self.nodes[v.0].op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.value(v).dims2().expect("tape values are rank <= 2")
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push2(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op) -> Var {
        let t = Tensor::new(vec![rows, cols], data).expect("internal shape");
        self.push(t, op)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push2(m, n, out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul_bt", self.value(a).shape(), self.value(b).shape()));
        }
        let out = matmul_bt_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push2(m, n, out, Op::MatMulBt(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let da = self.dims(a);
        if da != self.dims(b) {
            return Err(Error::dim(op, self.value(a).shape(), self.value(b).shape()));
        }
        Ok(da)
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.same_shape(op_name, a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok(self.push2(r, c, out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a row vector (any tensor with `cols` values) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.value(row).numel() != c {
            return Err(Error::dim("add_row", self.value(a).shape(), self.value(row).shape()));
        }
        let rv = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, b) in chunk.iter_mut().zip(rv) {
                *o += *b;
            }
        }
        Ok(self.push2(r, c, out, Op::AddRow(a, row)))
    }

    /// Multiplies row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.value(col).numel() != r {
            return Err(Error::dim("mul_col", self.value(a).shape(), self.value(col).shape()));
        }
        let cv = self.value(col).data();
        let mut out = self.value(a).data().to_vec();
        for (i, chunk) in out.chunks_mut(c.max(1)).enumerate() {
            for o in chunk.iter_mut() {
                *o *= cv[i];
            }
        }
        Ok(self.push2(r, c, out, Op::MulCol(a, col)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).data().iter().map(|x| x * factor).collect();
        self.push2(r, c, out, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, shift: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).data().iter().map(|x| x + shift).collect();
        self.push2(r, c, out, Op::AddScalar(a))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    /// Multiplies every element of `a` by the scalar node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let (r, c) = self.dims(a);
        let out = self.value(a).data().iter().map(|x| x * sv).collect();
        Ok(self.push2(r, c, out, Op::ScaleBy(a, s)))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self
            .value(a)
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        self.push2(r, c, out, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        self.push2(r, c, out, Op::Sigmoid(a))
    }

    /// Row-wise softmax with max subtraction. Masked positions come out as
    /// exactly zero; a row with no unmasked position is an error.
    pub fn softmax(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let (r, c) = self.dims(a);
        if let Some(m) = mask {
            if m.rows != r || m.cols != c {
                return Err(Error::dim("softmax mask", &[r, c], &[m.rows, m.cols]));
            }
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let allowed = |j: usize| mask.is_none_or(|m| m.allowed(i, j));
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::Degenerate(format!(
                    "softmax row {i} has no unmasked position"
                )));
            }
            let orow = &mut out[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (v - max).exp();
                    orow[j] = e;
                    sum += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        Ok(self.push2(r, c, out, Op::Softmax(a)))
    }

    /// Row-wise `log(softmax(a))`, computed without forming the softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        self.push2(r, c, out, Op::LogSoftmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::dim("layer_norm", self.value(x).shape(), self.value(gamma).shape()));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        Ok(self.push2(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Gathers rows of `table` by id.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::dim("embed", &[n, d], &[bad]));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        Ok(self.push2(
            ids.len(),
            d,
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > r {
            return Err(Error::dim("slice_rows", &[r, c], &[start, len]));
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        Ok(self.push2(len, c, out, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > c {
            return Err(Error::dim("slice_cols", &[r, c], &[start, len]));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        Ok(self.push2(r, len, out, Op::SliceCols { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_rows of nothing".into()));
        };
        let c = self.dims(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(Error::dim("concat_rows", self.value(first).shape(), self.value(p).shape()));
            }
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        Ok(self.push2(rows, c, out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_cols of nothing".into()));
        };
        let r = self.dims(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(Error::dim("concat_cols", self.value(first).shape(), self.value(p).shape()));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push2(r, total, out, Op::ConcatCols(parts.to_vec())))
    }

    /// `out[i, j] = x[i, idx[j]]`.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::dim("gather_cols", &[r, c], &[bad]));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            out.extend(idx.iter().map(|&j| xv[i * c + j]));
        }
        Ok(self.push2(
            r,
            idx.len(),
            out,
            Op::GatherCols {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// `out[i, idx[j]] += x[i, j]` into a `rows × width` zero matrix.
    pub fn scatter_cols(&mut self, x: Var, idx: &[usize], width: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if idx.len() != c {
            return Err(Error::dim("scatter_cols", &[r, c], &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= width) {
            return Err(Error::dim("scatter_cols", &[width], &[bad]));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; r * width];
        for i in 0..r {
            for (j, &t) in idx.iter().enumerate() {
                out[i * width + t] += xv[i * c + j];
            }
        }
        Ok(self.push2(
            r,
            width,
            out,
            Op::ScatterCols {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// `out[i, 0] = x[i, cols[i]]`.
    pub fn pick_rows(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if cols.len() != r {
            return Err(Error::dim("pick_rows", &[r, c], &[cols.len()]));
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::dim("pick_rows", &[r, c], &[bad]));
        }
        let xv = self.value(x).data();
        let out = cols.iter().enumerate().map(|(i, &j)| xv[i * c + j]).collect();
        Ok(self.push2(
            r,
            1,
            out,
            Op::PickRows {
                x,
                cols: cols.to_vec(),
            },
        ))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log(&mut self, x: Var, floor: f64) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).data().iter().map(|&v| v.max(floor).ln()).collect();
        self.push2(r, c, out, Op::Log { x, floor })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push2(1, 1, vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Divides each row by its L2 norm, floored at [`NORM_FLOOR`].
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let xv = self.value(x).data();
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        self.push2(r, c, out, Op::NormalizeRows { x, norms })
    }

    /// `x · W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (_, d_in) = self.dims(x);
        let (w_in, w_out) = self.dims(w);
        if d_in != w_in {
            return Err(Error::dim("affine", self.value(x).shape(), self.value(w).shape()));
        }
        if self.value(b).numel() != w_out {
            return Err(Error::dim("affine bias", self.value(w).shape(), self.value(b).shape()));
        }
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Scaled dot-product attention with `1/√d` scaling.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&Mask>,
        additive_bias: Option<Var>,
    ) -> Result<(Var, Var)> {
        let d = self.dims(q).1;
        self.attention_scaled(q, k, v, mask, additive_bias, 1.0 / (d as f64).sqrt())
    }

    /// `softmax(scale · Q Kᵀ + bias, mask) · V`, returning `(output, weights)`.
    /// The bias is one value per key, broadcast over query rows.
    pub fn attention_scaled(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&Mask>,
        additive_bias: Option<Var>,
        scale: f64,
    ) -> Result<(Var, Var)> {
        let (_, dq) = self.dims(q);
        let (tk, dk) = self.dims(k);
        let (tv, _) = self.dims(v);
        if dq != dk || tk != tv {
            return Err(Error::dim("attention", self.value(q).shape(), self.value(k).shape()));
        }
        let scores = self.matmul_bt(q, k)?;
        let mut logits = self.scale(scores, scale);
        if let Some(bias) = additive_bias {
            logits = self.add_row(logits, bias)?;
        }
        let weights = self.softmax(logits, mask)?;
        let out = self.matmul(weights, v)?;
        Ok((out, weights))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Backward> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = Gradients::zeros_like(self.store);
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let out = self.nodes[idx].value.as_ref();
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Param(id) => {
                    params.get_mut(*id).data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = self.dims(*b).1;
                    let ga = matmul_bt_raw(g.data(), self.value(*b).data(), m, n, k);
                    let gb = matmul_at_raw(self.value(*a).data(), g.data(), m, k, n);
                    self.acc(&mut grads, *a, &ga);
                    self.acc(&mut grads, *b, &gb);
                }
                Op::MatMulBt(a, b) => {
                    // out = a bᵀ, a: m×k, b: n×k
                    let (m, k) = self.dims(*a);
                    let n = self.dims(*b).0;
                    let ga = matmul_raw(g.data(), self.value(*b).data(), m, n, k);
                    let gb = matmul_at_raw(g.data(), self.value(*a).data(), m, n, k);
                    self.acc(&mut grads, *a, &ga);
                    self.acc(&mut grads, *b, &gb);
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, g.data());
                    self.acc(&mut grads, *b, g.data());
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, g.data());
                    let neg: Vec<f64> = g.data().iter().map(|v| -v).collect();
                    self.acc(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let ga: Vec<f64> = g.data().iter().zip(bv).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = g.data().iter().zip(av).map(|(x, y)| x * y).collect();
                    self.acc(&mut grads, *a, &ga);
                    self.acc(&mut grads, *b, &gb);
                }
                Op::AddRow(a, row) => {
                    self.acc(&mut grads, *a, g.data());
                    let c = g.cols();
                    let mut gr = vec![0.0; c];
                    for chunk in g.data().chunks(c.max(1)) {
                        for (s, v) in gr.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                    self.acc(&mut grads, *row, &gr);
                }
                Op::MulCol(a, col) => {
                    let c = g.cols();
                    let cv = self.value(*col).data();
                    let av = self.value(*a).data();
                    let mut ga = g.data().to_vec();
                    let mut gc = vec![0.0; cv.len()];
                    for i in 0..cv.len() {
                        for j in 0..c {
                            let gij = g.data()[i * c + j];
                            ga[i * c + j] = gij * cv[i];
                            gc[i] += gij * av[i * c + j];
                        }
                    }
                    self.acc(&mut grads, *a, &ga);
                    self.acc(&mut grads, *col, &gc);
                }
                Op::Scale(a, f) => {
                    let ga: Vec<f64> = g.data().iter().map(|v| v * f).collect();
                    self.acc(&mut grads, *a, &ga);
                }
                Op::AddScalar(a) => self.acc(&mut grads, *a, g.data()),
                Op::ScaleBy(a, s) => {
                    let sv = self.value(*s).data()[0];
                    let av = self.value(*a).data();
                    let ga: Vec<f64> = g.data().iter().map(|v| v * sv).collect();
                    let gs: f64 = g.data().iter().zip(av).map(|(x, y)| x * y).sum();
                    self.acc(&mut grads, *a, &ga);
                    self.acc(&mut grads, *s, &[gs]);
                }
                Op::Gelu(a) => {
                    let ga: Vec<f64> = self
                        .value(*a)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gv)| {
                            let inner = GELU_C * (x + GELU_A * x * x * x);
                            let t = inner.tanh();
                            let d = 0.5 * (1.0 + t)
                                + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                            gv * d
                        })
                        .collect();
                    self.acc(&mut grads, *a, &ga);
                }
                Op::Sigmoid(a) => {
                    let y = out.expect("value").data();
                    let ga: Vec<f64> = y.iter().zip(g.data()).map(|(s, gv)| gv * s * (1.0 - s)).collect();
                    self.acc(&mut grads, *a, &ga);
                }
                Op::Softmax(a) => {
                    let y = out.expect("value");
                    let c = y.cols();
                    let mut ga = vec![0.0; y.numel()];
                    for (i, (yr, gr)) in y.data().chunks(c).zip(g.data().chunks(c)).enumerate() {
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[i * c + j] = yr[j] * (gr[j] - inner);
                        }
                    }
                    self.acc(&mut grads, *a, &ga);
                }
                Op::LogSoftmax(a) => {
                    let y = out.expect("value");
                    let c = y.cols();
                    let mut ga = vec![0.0; y.numel()];
                    for (i, (yr, gr)) in y.data().chunks(c).zip(g.data().chunks(c)).enumerate() {
                        let total: f64 = gr.iter().sum();
                        for j in 0..c {
                            ga[i * c + j] = gr[j] - yr[j].exp() * total;
                        }
                    }
                    self.acc(&mut grads, *a, &ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let c = g.cols();
                    let gv = self.value(*gamma).data();
                    let mut gx = vec![0.0; g.numel()];
                    let mut gg = vec![0.0; c];
                    let mut gb = vec![0.0; c];
                    for (i, inv) in inv_std.iter().enumerate() {
                        let gr = &g.data()[i * c..(i + 1) * c];
                        let hr = &xhat[i * c..(i + 1) * c];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                            gb[j] += gr[j];
                            let d = gr[j] * gv[j];
                            sum_d += d;
                            sum_dh += d * hr[j];
                        }
                        let n = c as f64;
                        for j in 0..c {
                            let d = gr[j] * gv[j];
                            gx[i * c + j] = inv / n * (n * d - sum_d - hr[j] * sum_dh);
                        }
                    }
                    self.acc(&mut grads, *x, &gx);
                    self.acc(&mut grads, *gamma, &gg);
                    self.acc(&mut grads, *beta, &gb);
                }
                Op::Embed { table, ids } => {
                    let (n, d) = self.dims(*table);
                    let slot = self.slot(&mut grads, *table);
                    debug_assert_eq!(slot.numel(), n * d);
                    let s = slot.data_mut();
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            s[id * d + j] += g.data()[r * d + j];
                        }
                    }
                }
                Op::SliceRows { x, start } => {
                    let c = g.cols();
                    let slot = self.slot(&mut grads, *x).data_mut();
                    for (o, v) in slot[start * c..].iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (r, len) = (g.rows(), g.cols());
                    let c = self.dims(*x).1;
                    let slot = self.slot(&mut grads, *x).data_mut();
                    for i in 0..r {
                        for j in 0..len {
                            slot[i * c + start + j] += g.data()[i * len + j];
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).numel();
                        self.acc(&mut grads, p, &g.data()[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let (r, total) = (g.rows(), g.cols());
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.dims(p).1;
                        let mut gp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            gp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        self.acc(&mut grads, p, &gp);
                        offset += w;
                    }
                }
                Op::GatherCols { x, idx } => {
                    let c = self.dims(*x).1;
                    let w = idx.len();
                    let slot = self.slot(&mut grads, *x).data_mut();
                    for i in 0..g.rows() {
                        for (j, &src) in idx.iter().enumerate() {
                            slot[i * c + src] += g.data()[i * w + j];
                        }
                    }
                }
                Op::ScatterCols { x, idx } => {
                    let width = g.cols();
                    let c = idx.len();
                    let mut gx = vec![0.0; g.rows() * c];
                    for i in 0..g.rows() {
                        for (j, &t) in idx.iter().enumerate() {
                            gx[i * c + j] = g.data()[i * width + t];
                        }
                    }
                    self.acc(&mut grads, *x, &gx);
                }
                Op::PickRows { x, cols } => {
                    let c = self.dims(*x).1;
                    let slot = self.slot(&mut grads, *x).data_mut();
                    for (i, &j) in cols.iter().enumerate() {
                        slot[i * c + j] += g.data()[i];
                    }
                }
                Op::Log { x, floor } => {
                    let gx: Vec<f64> = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v > *floor { gv / v } else { 0.0 })
                        .collect();
                    self.acc(&mut grads, *x, &gx);
                }
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    let n = self.value(*x).numel();
                    self.acc(&mut grads, *x, &vec![gv; n]);
                }
                Op::NormalizeRows { x, norms } => {
                    let y = out.expect("value");
                    let c = y.cols();
                    let mut gx = vec![0.0; y.numel()];
                    for (i, &n) in norms.iter().enumerate() {
                        let yr = &y.data()[i * c..(i + 1) * c];
                        let gr = &g.data()[i * c..(i + 1) * c];
                        if n > NORM_FLOOR {
                            let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                gx[i * c + j] = (gr[j] - yr[j] * proj) / n;
                            }
                        } else {
                            for j in 0..c {
                                gx[i * c + j] = gr[j] / n;
                            }
                        }
                    }
                    self.acc(&mut grads, *x, &gx);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Backward {
            node_grads: grads,
            params,
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut Tensor {
        let shape = self.value(v).shape().to_vec();
        grads[v.0].get_or_insert_with(|| Tensor::zeros(&shape))
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: &[f64]) {
        let slot = self.slot(grads, v);
        for (a, b) in slot.data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }
}

impl Default for Tape<'static> {
    fn default() -> Self {
        Tape::new(empty_store())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
