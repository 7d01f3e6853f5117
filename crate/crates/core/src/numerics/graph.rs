//! Append-only computation tape with reverse-mode differentiation.
//!
//! Nodes are 2-D row-major f64 tensors. Values are computed eagerly when an
//! op is appended; `backward` replays the tape in reverse and accumulates
//! gradients additively across fan-out. Reductions that mix sequence
//! positions (masked softmax normalizers, attention mixes, masked pooling)
//! use exact summation so forward results are independent of token order.

use super::kernels::{self, ExactSum};
use super::params::{GradStore, ParamId, ParamStore};
use super::NumericsError;
use crate::rng::Rng64;
use std::sync::Arc;

pub type TensorId = usize;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    fn pair(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[derive(Clone, Debug)]
enum Data {
    Owned(Vec<f64>),
    Shared(Arc<Vec<f64>>),
}

impl Data {
    fn as_slice(&self) -> &[f64] {
        match self {
            Data::Owned(v) => v,
            Data::Shared(a) => a,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    MatMul(TensorId, TensorId),
    MatMulTransB(TensorId, TensorId),
    Add(TensorId, TensorId),
    AddConst(TensorId),
    AddRow(TensorId, TensorId),
    MulRow(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    LayerNorm { x: TensorId, eps: f64 },
    MaskedSoftmax { x: TensorId, mask: Option<Arc<Vec<bool>>> },
    Gelu(TensorId),
    Dropout { x: TensorId, keep: Arc<Vec<bool>>, inv: f64 },
    EmbedLookup { table: TensorId, ids: Arc<Vec<usize>> },
    ConcatCols(Vec<TensorId>),
    SliceCols { x: TensorId, start: usize },
    MeanRows { x: TensorId, valid: Option<Arc<Vec<bool>>> },
    AttnMix { probs: TensorId, values: TensorId, valid: Option<Arc<Vec<bool>>> },
    SumSqDiff(TensorId, TensorId),
    Mse(TensorId, TensorId),
    MeanScalars(Vec<TensorId>),
    Reshape(TensorId),
}

#[derive(Clone, Debug)]
struct Node {
    shape: Shape,
    data: Data,
    op: Op,
    needs_grad: bool,
}

const GELU_C: f64 = 0.044715;
// sqrt(2/pi)
const GELU_S: f64 = 0.797_884_560_802_865_4;

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_S * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_S * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_S * (1.0 + 3.0 * GELU_C * x * x)
}

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    train: bool,
    backward_done: bool,
}

impl Graph {
    pub fn new(train: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            train,
            backward_done: false,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn shape(&self, id: TensorId) -> Shape {
        self.nodes[id].shape
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        self.nodes[id].data.as_slice()
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert!(self.nodes[id].shape.is_scalar());
        self.nodes[id].data.as_slice()[0]
    }

    /// Gradient of the last `backward` target w.r.t. node `id`, if any.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Shape, data: Data, op: Op, needs_grad: bool) -> TensorId {
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Non-differentiable input tensor.
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<TensorId, NumericsError> {
        self.leaf(rows, cols, data, false)
    }

    /// Leaf tensor, differentiable if `requires_grad`.
    pub fn leaf(
        &mut self,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        requires_grad: bool,
    ) -> Result<TensorId, NumericsError> {
        let shape = Shape::new(rows, cols);
        if data.len() != shape.len() {
            return Err(NumericsError::Contract(format!(
                "leaf data length {} does not match shape {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(self.push(shape, Data::Owned(data), Op::Leaf { param: None }, requires_grad))
    }

    /// Parameter leaf sharing the store's buffer; always differentiable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> TensorId {
        let e = store.entry(id);
        self.push(
            Shape::new(e.rows, e.cols),
            Data::Shared(store.shared_data(id)),
            Op::Leaf { param: Some(id) },
            true,
        )
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.rows {
            return Err(NumericsError::Shape {
                op: "matmul",
                lhs: sa.pair(),
                rhs: sb.pair(),
            });
        }
        let mut out = vec![0.0; sa.rows * sb.cols];
        kernels::matmul_acc(self.value(a), self.value(b), sa.rows, sa.cols, sb.cols, &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Shape::new(sa.rows, sb.cols), Data::Owned(out), Op::MatMul(a, b), ng))
    }

    /// `a * b^T`, the query-key product shape of attention scores.
    pub fn matmul_tb(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.cols {
            return Err(NumericsError::Shape {
                op: "matmul_tb",
                lhs: sa.pair(),
                rhs: sb.pair(),
            });
        }
        let mut out = vec![0.0; sa.rows * sb.rows];
        kernels::matmul_tb_acc(self.value(a), self.value(b), sa.rows, sa.cols, sb.rows, &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            Shape::new(sa.rows, sb.rows),
            Data::Owned(out),
            Op::MatMulTransB(a, b),
            ng,
        ))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(NumericsError::Shape {
                op: "add",
                lhs: sa.pair(),
                rhs: sb.pair(),
            });
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(sa, Data::Owned(out), Op::Add(a, b), ng))
    }

    pub fn add_const(&mut self, x: TensorId, c: f64) -> TensorId {
        let out = self.value(x).iter().map(|v| v + c).collect();
        let ng = self.needs(x);
        self.push(self.shape(x), Data::Owned(out), Op::AddConst(x), ng)
    }

    /// Adds a 1xM row vector to every row of an NxM matrix.
    pub fn add_row(&mut self, x: TensorId, row: TensorId) -> Result<TensorId, NumericsError> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sr.rows != 1 || sr.cols != sx.cols {
            return Err(NumericsError::Shape {
                op: "add_row",
                lhs: sx.pair(),
                rhs: sr.pair(),
            });
        }
        let r = self.value(row).to_vec();
        let out = self
            .value(x)
            .chunks(sx.cols)
            .flat_map(|chunk| chunk.iter().zip(&r).map(|(a, b)| a + b).collect::<Vec<_>>())
            .collect();
        let ng = self.needs(x) || self.needs(row);
        Ok(self.push(sx, Data::Owned(out), Op::AddRow(x, row), ng))
    }

    /// Multiplies every row of an NxM matrix elementwise by a 1xM row.
    pub fn mul_row(&mut self, x: TensorId, row: TensorId) -> Result<TensorId, NumericsError> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sr.rows != 1 || sr.cols != sx.cols {
            return Err(NumericsError::Shape {
                op: "mul_row",
                lhs: sx.pair(),
                rhs: sr.pair(),
            });
        }
        let r = self.value(row).to_vec();
        let out = self
            .value(x)
            .chunks(sx.cols)
            .flat_map(|chunk| chunk.iter().zip(&r).map(|(a, b)| a * b).collect::<Vec<_>>())
            .collect();
        let ng = self.needs(x) || self.needs(row);
        Ok(self.push(sx, Data::Owned(out), Op::MulRow(x, row), ng))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(NumericsError::Shape {
                op: "mul",
                lhs: sa.pair(),
                rhs: sb.pair(),
            });
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(sa, Data::Owned(out), Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let ng = self.needs(x);
        self.push(self.shape(x), Data::Owned(out), Op::Scale(x, c), ng)
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&mut self, x: TensorId, eps: f64) -> TensorId {
        let s = self.shape(x);
        let m = s.cols as f64;
        let mut out = Vec::with_capacity(s.len());
        for row in self.value(x).chunks(s.cols) {
            let mean = row.iter().sum::<f64>() / m;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let inv = 1.0 / (var + eps).sqrt();
            out.extend(row.iter().map(|v| (v - mean) * inv));
        }
        let ng = self.needs(x);
        self.push(s, Data::Owned(out), Op::LayerNorm { x, eps }, ng)
    }

    /// Row softmax. Masked columns get exactly zero weight; rows whose valid
    /// set is empty come out all-zero. The normalizer is an exact sum, so the
    /// output is independent of key order.
    pub fn masked_softmax(
        &mut self,
        x: TensorId,
        mask: Option<Arc<Vec<bool>>>,
    ) -> Result<TensorId, NumericsError> {
        let s = self.shape(x);
        if let Some(m) = &mask {
            if m.len() != s.cols {
                return Err(NumericsError::Shape {
                    op: "masked_softmax",
                    lhs: s.pair(),
                    rhs: (1, m.len()),
                });
            }
        }
        let valid = |j: usize| mask.as_ref().map_or(true, |m| m[j]);
        let mut out = vec![0.0; s.len()];
        let mut acc = ExactSum::new();
        for (i, row) in self.value(x).chunks(s.cols).enumerate() {
            let mut max = f64::NEG_INFINITY;
            for (j, v) in row.iter().enumerate() {
                if valid(j) && *v > max {
                    max = *v;
                }
            }
            if max == f64::NEG_INFINITY {
                continue; // fully masked row stays all-zero
            }
            acc.clear();
            let orow = &mut out[i * s.cols..(i + 1) * s.cols];
            for (j, v) in row.iter().enumerate() {
                if valid(j) {
                    let e = (v - max).exp();
                    orow[j] = e;
                    acc.add(e);
                }
            }
            let denom = acc.value();
            for (j, o) in orow.iter_mut().enumerate() {
                if valid(j) {
                    *o /= denom;
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(s, Data::Owned(out), Op::MaskedSoftmax { x, mask }, ng))
    }

    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId, NumericsError> {
        self.masked_softmax(x, None)
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let out = self.value(x).iter().map(|v| gelu_val(*v)).collect();
        let ng = self.needs(x);
        self.push(self.shape(x), Data::Owned(out), Op::Gelu(x), ng)
    }

    /// Inverted dropout: in train mode keeps each element with probability
    /// `1 - p` and rescales by `1/(1-p)`; otherwise the identity.
    pub fn dropout(
        &mut self,
        x: TensorId,
        p: f64,
        rng: &mut Rng64,
    ) -> Result<TensorId, NumericsError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::Contract(format!(
                "dropout probability {p} outside [0,1)"
            )));
        }
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        let s = self.shape(x);
        let keep: Vec<bool> = (0..s.len()).map(|_| rng.uniform() >= p).collect();
        let inv = 1.0 / (1.0 - p);
        let out = self
            .value(x)
            .iter()
            .zip(&keep)
            .map(|(v, k)| if *k { v * inv } else { 0.0 })
            .collect();
        let ng = self.needs(x);
        Ok(self.push(
            s,
            Data::Owned(out),
            Op::Dropout {
                x,
                keep: Arc::new(keep),
                inv,
            },
            ng,
        ))
    }

    /// Gathers rows of `table` (VxD) at `ids`, producing len(ids) x D.
    pub fn embed(&mut self, table: TensorId, ids: Vec<usize>) -> Result<TensorId, NumericsError> {
        let s = self.shape(table);
        if let Some(bad) = ids.iter().find(|i| **i >= s.rows) {
            return Err(NumericsError::Contract(format!(
                "embedding id {bad} outside table with {} rows",
                s.rows
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * s.cols);
        for &i in &ids {
            out.extend_from_slice(&self.value(table)[i * s.cols..(i + 1) * s.cols]);
        }
        let ng = self.needs(table);
        Ok(self.push(
            Shape::new(ids.len(), s.cols),
            Data::Owned(out),
            Op::EmbedLookup {
                table,
                ids: Arc::new(ids),
            },
            ng,
        ))
    }

    /// Concatenates tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::Contract("concat of zero tensors".into()));
        }
        let rows = self.shape(parts[0]).rows;
        let mut cols = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.rows != rows {
                return Err(NumericsError::Shape {
                    op: "concat_cols",
                    lhs: (rows, cols),
                    rhs: sp.pair(),
                });
            }
            cols += sp.cols;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let sp = self.shape(p);
                out.extend_from_slice(&self.value(p)[r * sp.cols..(r + 1) * sp.cols]);
            }
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(
            Shape::new(rows, cols),
            Data::Owned(out),
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    /// Column slice `[start, start + len)` of every row.
    pub fn slice_cols(
        &mut self,
        x: TensorId,
        start: usize,
        len: usize,
    ) -> Result<TensorId, NumericsError> {
        let s = self.shape(x);
        if start + len > s.cols {
            return Err(NumericsError::Shape {
                op: "slice_cols",
                lhs: s.pair(),
                rhs: (start, len),
            });
        }
        let mut out = Vec::with_capacity(s.rows * len);
        for r in 0..s.rows {
            out.extend_from_slice(&self.value(x)[r * s.cols + start..r * s.cols + start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(
            Shape::new(s.rows, len),
            Data::Owned(out),
            Op::SliceCols { x, start },
            ng,
        ))
    }

    /// Mean over rows, restricted to `valid` rows when a mask is given.
    /// Column sums are exact, so the result ignores row order.
    pub fn mean_rows(
        &mut self,
        x: TensorId,
        valid: Option<Arc<Vec<bool>>>,
    ) -> Result<TensorId, NumericsError> {
        let s = self.shape(x);
        if let Some(v) = &valid {
            if v.len() != s.rows {
                return Err(NumericsError::Shape {
                    op: "mean_rows",
                    lhs: s.pair(),
                    rhs: (v.len(), 1),
                });
            }
        }
        let row_ok = |i: usize| valid.as_ref().map_or(true, |v| v[i]);
        let n_valid = (0..s.rows).filter(|i| row_ok(*i)).count();
        if n_valid == 0 {
            return Err(NumericsError::Contract(
                "mean over zero valid rows".into(),
            ));
        }
        let data = self.value(x);
        let mut out = vec![0.0; s.cols];
        let mut acc = ExactSum::new();
        for (c, o) in out.iter_mut().enumerate() {
            acc.clear();
            for r in 0..s.rows {
                if row_ok(r) {
                    acc.add(data[r * s.cols + c]);
                }
            }
            *o = acc.value() / n_valid as f64;
        }
        let ng = self.needs(x);
        Ok(self.push(
            Shape::new(1, s.cols),
            Data::Owned(out),
            Op::MeanRows { x, valid },
            ng,
        ))
    }

    /// Attention value mix `probs (NxS) * values (SxD)` where masked key
    /// positions are skipped outright. Each output element is an exact sum,
    /// making the result independent of key order and of padded-row content.
    pub fn attn_mix(
        &mut self,
        probs: TensorId,
        values: TensorId,
        valid: Option<Arc<Vec<bool>>>,
    ) -> Result<TensorId, NumericsError> {
        let (sp, sv) = (self.shape(probs), self.shape(values));
        if sp.cols != sv.rows {
            return Err(NumericsError::Shape {
                op: "attn_mix",
                lhs: sp.pair(),
                rhs: sv.pair(),
            });
        }
        if let Some(v) = &valid {
            if v.len() != sp.cols {
                return Err(NumericsError::Shape {
                    op: "attn_mix",
                    lhs: sp.pair(),
                    rhs: (v.len(), 1),
                });
            }
        }
        let key_ok = |j: usize| valid.as_ref().map_or(true, |v| v[j]);
        let p = self.value(probs);
        let v = self.value(values);
        let mut out = vec![0.0; sp.rows * sv.cols];
        let mut acc = ExactSum::new();
        for i in 0..sp.rows {
            for c in 0..sv.cols {
                acc.clear();
                for j in 0..sp.cols {
                    if key_ok(j) {
                        acc.add(p[i * sp.cols + j] * v[j * sv.cols + c]);
                    }
                }
                out[i * sv.cols + c] = acc.value();
            }
        }
        let ng = self.needs(probs) || self.needs(values);
        Ok(self.push(
            Shape::new(sp.rows, sv.cols),
            Data::Owned(out),
            Op::AttnMix {
                probs,
                values,
                valid,
            },
            ng,
        ))
    }

    /// Squared Euclidean distance between two equal-shape tensors (scalar).
    pub fn sum_sq_diff(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(NumericsError::Shape {
                op: "sum_sq_diff",
                lhs: sa.pair(),
                rhs: sb.pair(),
            });
        }
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            Shape::new(1, 1),
            Data::Owned(vec![s]),
            Op::SumSqDiff(a, b),
            ng,
        ))
    }

    /// Mean squared error over all elements (scalar).
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(NumericsError::Shape {
                op: "mse",
                lhs: sa.pair(),
                rhs: sb.pair(),
            });
        }
        let n = sa.len() as f64;
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Shape::new(1, 1), Data::Owned(vec![s]), Op::Mse(a, b), ng))
    }

    /// Reinterprets the row-major data under a new shape of equal length.
    pub fn reshape(
        &mut self,
        x: TensorId,
        rows: usize,
        cols: usize,
    ) -> Result<TensorId, NumericsError> {
        let s = self.shape(x);
        if s.len() != rows * cols {
            return Err(NumericsError::Shape {
                op: "reshape",
                lhs: s.pair(),
                rhs: (rows, cols),
            });
        }
        let data = self.value(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(
            Shape::new(rows, cols),
            Data::Owned(data),
            Op::Reshape(x),
            ng,
        ))
    }

    /// Mean of scalar nodes (scalar).
    pub fn mean_scalars(&mut self, parts: &[TensorId]) -> Result<TensorId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::Contract("mean of zero scalars".into()));
        }
        for &p in parts {
            if !self.shape(p).is_scalar() {
                return Err(NumericsError::Shape {
                    op: "mean_scalars",
                    lhs: self.shape(p).pair(),
                    rhs: (1, 1),
                });
            }
        }
        let s: f64 =
            parts.iter().map(|p| self.scalar_value(*p)).sum::<f64>() / parts.len() as f64;
        let ng = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(
            Shape::new(1, 1),
            Data::Owned(vec![s]),
            Op::MeanScalars(parts.to_vec()),
            ng,
        ))
    }

    /// Propagates gradients from a scalar loss to every reachable
    /// differentiable node. Calling it twice on one graph is an error.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), NumericsError> {
        if self.backward_done {
            return Err(NumericsError::Contract(
                "backward called twice without rebuilding the graph".into(),
            ));
        }
        if !self.nodes[loss].shape.is_scalar() {
            return Err(NumericsError::Contract(format!(
                "backward target must be scalar, got {}x{}",
                self.nodes[loss].shape.rows, self.nodes[loss].shape.cols
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss].needs_grad {
            return Ok(()); // nothing differentiable upstream
        }
        self.grads[loss] = Some(vec![1.0]);

        for id in (0..self.nodes.len()).rev() {
            if self.grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = self.grads[id].take().expect("grad present");
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, id: TensorId, g: &[f64]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                if self.needs(a) {
                    let bv = self.node_data(b);
                    let da = self.grad_buf(a);
                    kernels::matmul_tb_acc(g, &bv, sa.rows, sb.cols, sa.cols, da);
                }
                if self.needs(b) {
                    let av = self.node_data(a);
                    let db = self.grad_buf(b);
                    kernels::matmul_ta_acc(&av, g, sa.rows, sa.cols, sb.cols, db);
                }
            }
            Op::MatMulTransB(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                if self.needs(a) {
                    let bv = self.node_data(b);
                    let da = self.grad_buf(a);
                    kernels::matmul_acc(g, &bv, sa.rows, sb.rows, sa.cols, da);
                }
                if self.needs(b) {
                    let av = self.node_data(a);
                    let db = self.grad_buf(b);
                    kernels::matmul_ta_acc(g, &av, sa.rows, sb.rows, sa.cols, db);
                }
            }
            Op::Add(a, b) => {
                if self.needs(a) {
                    kernels::axpy(1.0, g, self.grad_buf(a));
                }
                if self.needs(b) {
                    kernels::axpy(1.0, g, self.grad_buf(b));
                }
            }
            Op::AddConst(x) => {
                if self.needs(x) {
                    kernels::axpy(1.0, g, self.grad_buf(x));
                }
            }
            Op::AddRow(x, row) => {
                let cols = self.shape(x).cols;
                if self.needs(x) {
                    kernels::axpy(1.0, g, self.grad_buf(x));
                }
                if self.needs(row) {
                    let dr = self.grad_buf(row);
                    for chunk in g.chunks(cols) {
                        for (d, gv) in dr.iter_mut().zip(chunk) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::MulRow(x, row) => {
                let cols = self.shape(x).cols;
                if self.needs(x) {
                    let rv = self.node_data(row);
                    let dx = self.grad_buf(x);
                    for (chunk, gchunk) in dx.chunks_mut(cols).zip(g.chunks(cols)) {
                        for ((d, gv), r) in chunk.iter_mut().zip(gchunk).zip(rv.iter()) {
                            *d += gv * r;
                        }
                    }
                }
                if self.needs(row) {
                    let xv = self.node_data(x);
                    let dr = self.grad_buf(row);
                    for (xchunk, gchunk) in xv.chunks(cols).zip(g.chunks(cols)) {
                        for ((d, gv), x) in dr.iter_mut().zip(gchunk).zip(xchunk) {
                            *d += gv * x;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let bv = self.node_data(b);
                    let da = self.grad_buf(a);
                    for ((d, gv), b) in da.iter_mut().zip(g).zip(bv.iter()) {
                        *d += gv * b;
                    }
                }
                if self.needs(b) {
                    let av = self.node_data(a);
                    let db = self.grad_buf(b);
                    for ((d, gv), a) in db.iter_mut().zip(g).zip(av.iter()) {
                        *d += gv * a;
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.needs(x) {
                    kernels::axpy(c, g, self.grad_buf(x));
                }
            }
            Op::LayerNorm { x, eps } => {
                if !self.needs(x) {
                    return;
                }
                let s = self.shape(x);
                let m = s.cols as f64;
                let xv = self.node_data(x);
                let yv = self.node_data(id);
                let dx = self.grad_buf(x);
                for r in 0..s.rows {
                    let xs = &xv[r * s.cols..(r + 1) * s.cols];
                    let ys = &yv[r * s.cols..(r + 1) * s.cols];
                    let gs = &g[r * s.cols..(r + 1) * s.cols];
                    let mean = xs.iter().sum::<f64>() / m;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mean_g = gs.iter().sum::<f64>() / m;
                    let mean_gy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / m;
                    let drow = &mut dx[r * s.cols..(r + 1) * s.cols];
                    for ((d, gv), y) in drow.iter_mut().zip(gs).zip(ys) {
                        *d += inv * (gv - mean_g - y * mean_gy);
                    }
                }
            }
            Op::MaskedSoftmax { x, ref mask } => {
                if !self.needs(x) {
                    return;
                }
                let s = self.shape(x);
                let valid = |j: usize| mask.as_ref().map_or(true, |m| m[j]);
                let yv = self.node_data(id);
                let dx = self.grad_buf(x);
                for r in 0..s.rows {
                    let ys = &yv[r * s.cols..(r + 1) * s.cols];
                    let gs = &g[r * s.cols..(r + 1) * s.cols];
                    let mut dot = 0.0;
                    for j in 0..s.cols {
                        if valid(j) {
                            dot += gs[j] * ys[j];
                        }
                    }
                    let drow = &mut dx[r * s.cols..(r + 1) * s.cols];
                    for j in 0..s.cols {
                        if valid(j) {
                            drow[j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if self.needs(x) {
                    let xv = self.node_data(x);
                    let dx = self.grad_buf(x);
                    for ((d, gv), x) in dx.iter_mut().zip(g).zip(xv.iter()) {
                        *d += gv * gelu_grad(*x);
                    }
                }
            }
            Op::Dropout { x, ref keep, inv } => {
                if self.needs(x) {
                    let dx = self.grad_buf(x);
                    for ((d, gv), k) in dx.iter_mut().zip(g).zip(keep.iter()) {
                        if *k {
                            *d += gv * inv;
                        }
                    }
                }
            }
            Op::EmbedLookup { table, ref ids } => {
                if self.needs(table) {
                    let cols = self.shape(table).cols;
                    let dt = self.grad_buf(table);
                    for (r, &i) in ids.iter().enumerate() {
                        let grow = &g[r * cols..(r + 1) * cols];
                        let drow = &mut dt[i * cols..(i + 1) * cols];
                        for (d, gv) in drow.iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::ConcatCols(ref parts) => {
                let rows = self.shape(id).rows;
                let total = self.shape(id).cols;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p).cols;
                    if self.needs(p) {
                        let dp = self.grad_buf(p);
                        for r in 0..rows {
                            let grow = &g[r * total + offset..r * total + offset + pc];
                            let drow = &mut dp[r * pc..(r + 1) * pc];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += gv;
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(x) {
                    let sc = self.shape(x).cols;
                    let len = self.shape(id).cols;
                    let rows = self.shape(id).rows;
                    let dx = self.grad_buf(x);
                    for r in 0..rows {
                        let grow = &g[r * len..(r + 1) * len];
                        let drow = &mut dx[r * sc + start..r * sc + start + len];
                        for (d, gv) in drow.iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::MeanRows { x, ref valid } => {
                if self.needs(x) {
                    let s = self.shape(x);
                    let row_ok = |i: usize| valid.as_ref().map_or(true, |v| v[i]);
                    let n_valid = (0..s.rows).filter(|i| row_ok(*i)).count() as f64;
                    let dx = self.grad_buf(x);
                    for r in 0..s.rows {
                        if row_ok(r) {
                            let drow = &mut dx[r * s.cols..(r + 1) * s.cols];
                            for (d, gv) in drow.iter_mut().zip(g) {
                                *d += gv / n_valid;
                            }
                        }
                    }
                }
            }
            Op::AttnMix {
                probs,
                values,
                ref valid,
            } => {
                let (sp, sv) = (self.shape(probs), self.shape(values));
                let key_ok = |j: usize| valid.as_ref().map_or(true, |v| v[j]);
                if self.needs(probs) {
                    let vv = self.node_data(values);
                    let dp = self.grad_buf(probs);
                    for i in 0..sp.rows {
                        for j in 0..sp.cols {
                            if !key_ok(j) {
                                continue;
                            }
                            let mut acc = 0.0;
                            for c in 0..sv.cols {
                                acc += g[i * sv.cols + c] * vv[j * sv.cols + c];
                            }
                            dp[i * sp.cols + j] += acc;
                        }
                    }
                }
                if self.needs(values) {
                    let pv = self.node_data(probs);
                    let dv = self.grad_buf(values);
                    for j in 0..sp.cols {
                        if !key_ok(j) {
                            continue;
                        }
                        for i in 0..sp.rows {
                            let p = pv[i * sp.cols + j];
                            if p == 0.0 {
                                continue;
                            }
                            let grow = &g[i * sv.cols..(i + 1) * sv.cols];
                            let drow = &mut dv[j * sv.cols..(j + 1) * sv.cols];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += p * gv;
                            }
                        }
                    }
                }
            }
            Op::SumSqDiff(a, b) => {
                let g0 = g[0];
                let (av, bv) = (self.node_data(a), self.node_data(b));
                if self.needs(a) {
                    let da = self.grad_buf(a);
                    for ((d, x), y) in da.iter_mut().zip(av.iter()).zip(bv.iter()) {
                        *d += g0 * 2.0 * (x - y);
                    }
                }
                if self.needs(b) {
                    let db = self.grad_buf(b);
                    for ((d, x), y) in db.iter_mut().zip(av.iter()).zip(bv.iter()) {
                        *d -= g0 * 2.0 * (x - y);
                    }
                }
            }
            Op::Mse(a, b) => {
                let g0 = g[0];
                let n = self.shape(a).len() as f64;
                let (av, bv) = (self.node_data(a), self.node_data(b));
                if self.needs(a) {
                    let da = self.grad_buf(a);
                    for ((d, x), y) in da.iter_mut().zip(av.iter()).zip(bv.iter()) {
                        *d += g0 * 2.0 / n * (x - y);
                    }
                }
                if self.needs(b) {
                    let db = self.grad_buf(b);
                    for ((d, x), y) in db.iter_mut().zip(av.iter()).zip(bv.iter()) {
                        *d -= g0 * 2.0 / n * (x - y);
                    }
                }
            }
            Op::MeanScalars(ref parts) => {
                let share = g[0] / parts.len() as f64;
                for &p in parts {
                    if self.needs(p) {
                        self.grad_buf(p)[0] += share;
                    }
                }
            }
            Op::Reshape(x) => {
                if self.needs(x) {
                    kernels::axpy(1.0, g, self.grad_buf(x));
                }
            }
        }
    }

    fn node_data(&self, id: TensorId) -> Vec<f64> {
        self.nodes[id].data.as_slice().to_vec()
    }

    fn grad_buf(&mut self, id: TensorId) -> &mut [f64] {
        let len = self.nodes[id].shape.len();
        self.grads[id]
            .get_or_insert_with(|| vec![0.0; len])
            .as_mut_slice()
    }

    /// Adds `scale` times the accumulated parameter gradients into `sink`.
    pub fn add_param_grads(&self, sink: &mut GradStore, scale: f64) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(pid) } = node.op {
                if let Some(g) = self.grads.get(i).and_then(|g| g.as_ref()) {
                    sink.accumulate(pid, g, scale);
                }
            }
        }
    }
}
