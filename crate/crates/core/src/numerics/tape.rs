//! Reverse-mode autodiff over a per-step tape.
//!
//! Ops are recorded eagerly with their forward values; `backward` walks the
//! record in reverse. A tape lives for one forward/backward pass and is
//! dropped afterwards, so graph memory never outlives the step. Gradients
//! only propagate into nodes reachable from trainable leaves; constants and
//! frozen parameters are recorded as plain values.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowVec(Var, Var),
    MulRowVec(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    TakeDiag(Var),
    MeanAll(Var),
    InstanceNormCols { x: Var, eps: f64 },
    LayerNormRows { x: Var, eps: f64 },
    Conv1d { x: Var, kernel: Var, stride: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    TakeRow { x: Var, row: usize },
    StackRows(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRowVec(..) => "add_row_vec",
            Op::MulRowVec(..) => "mul_row_vec",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Gelu(..) => "gelu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSumExpRows(..) => "logsumexp_rows",
            Op::TakeDiag(..) => "take_diag",
            Op::MeanAll(..) => "mean_all",
            Op::InstanceNormCols { .. } => "instance_norm_cols",
            Op::LayerNormRows { .. } => "layer_norm_rows",
            Op::Conv1d { .. } => "conv1d",
            Op::GatherRows { .. } => "gather_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::TakeRow { .. } => "take_row",
            Op::StackRows(..) => "stack_rows",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Gradients extracted by `Tape::backward`.
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient for a named parameter; absent means the parameter did not
    /// participate in the loss (or was frozen).
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Deterministic (id-ordered) iteration, used by the optimizer.
    pub fn iter_params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, t)| (*id, t))
    }

    /// Gradient for an anonymous trainable leaf.
    pub fn leaf(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for t in self.params.values() {
            for x in t.data() {
                acc += x * x;
            }
        }
        acc.sqrt()
    }

    pub fn scale_all(&mut self, c: f64) {
        for t in self.params.values_mut() {
            for x in t.data_mut() {
                *x *= c;
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Anonymous trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const, false)
    }

    /// Bind a stored parameter, memoized per tape. Frozen parameters enter
    /// as constants, which is what makes a frozen teacher's gradients
    /// identically zero rather than merely discarded.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let p = store.get(id);
        let v = if p.frozen {
            self.constant(p.tensor.clone())
        } else {
            let var = self.push(p.tensor.clone(), Op::Leaf, true);
            self.nodes[var.0].param = Some(id);
            var
        };
        self.bound.insert(id, v);
        v
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn zip_op(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::Dim(format!(
                "{}: {:?} vs {:?}",
                op.name(),
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, op, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|x| x * c).collect(),
        )
        .expect("same shape");
        let rg = self.requires(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|&x| gelu(x)).collect(),
        )
        .expect("same shape");
        let rg = self.requires(a);
        self.push(value, Op::Gelu(a), rg)
    }

    // ---- broadcasting over rows ----

    pub fn add_row_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_vec_op(x, v, true)
    }

    pub fn mul_row_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_vec_op(x, v, false)
    }

    fn row_vec_op(&mut self, x: Var, v: Var, add: bool) -> Result<Var> {
        let (tx, tv) = (self.value(x), self.value(v));
        if tx.rank() != 2 || tv.rank() != 1 || tx.cols() != tv.cols() {
            return Err(Error::Dim(format!(
                "row_vec op: {:?} with {:?}",
                tx.shape(),
                tv.shape()
            )));
        }
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for (xv, vv) in tx.row(i).iter().zip(tv.data()) {
                data.push(if add { xv + vv } else { xv * vv });
            }
        }
        let value = Tensor::matrix(rows, cols, data)?;
        let rg = self.requires(x) || self.requires(v);
        let op = if add {
            Op::AddRowVec(x, v)
        } else {
            Op::MulRowVec(x, v)
        };
        Ok(self.push(value, op, rg))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(Error::Dim(format!(
                "matmul: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let value = matmul_2d(ta, tb);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::Dim(format!("transpose: {:?}", ta.shape())));
        }
        let value = transpose_2d(ta);
        let rg = self.requires(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    // ---- rows and columns ----

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || start + len > tx.cols() {
            return Err(Error::Dim(format!(
                "slice_cols [{start}, {start}+{len}) of {:?}",
                tx.shape()
            )));
        }
        let rows = tx.rows();
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        let value = Tensor::matrix(rows, len, data)?;
        let rg = self.requires(x);
        Ok(self.push(value, Op::SliceCols { x, start, len }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_cols".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.rows() != rows {
                return Err(Error::Dim(format!("concat_cols: {:?}", t.shape())));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::matrix(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_rows".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.cols() != cols {
                return Err(Error::Dim(format!("concat_rows: {:?}", t.shape())));
            }
            rows += t.rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::matrix(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn take_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || row >= tx.rows() {
            return Err(Error::Dim(format!("take_row {row} of {:?}", tx.shape())));
        }
        let value = Tensor::vector(tx.row(row).to_vec());
        let rg = self.requires(x);
        Ok(self.push(value, Op::TakeRow { x, row }, rg))
    }

    /// Stack 1-D vectors of equal length into a matrix, one per row.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("stack_rows".into()));
        }
        let cols = self.value(parts[0]).numel();
        let mut data = Vec::with_capacity(parts.len() * cols);
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 1 || t.numel() != cols {
                return Err(Error::Dim(format!("stack_rows: {:?}", t.shape())));
            }
            data.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(parts.len(), cols, data)?;
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(value, Op::StackRows(parts.to_vec()), rg))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(Error::Dim(format!("gather_rows from {:?}", tt.shape())));
        }
        if ids.is_empty() {
            return Err(Error::EmptyInput("gather_rows with no ids".into()));
        }
        let rows = tt.rows();
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Dim(format!(
                "gather_rows: id {bad} outside table with {rows} rows"
            )));
        }
        let cols = tt.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(tt.row(i));
        }
        let value = Tensor::matrix(ids.len(), cols, data)?;
        let rg = self.requires(table);
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    // ---- reductions and row-wise nonlinearities ----

    /// Softmax over the last axis; 1-D input is treated as a single row.
    /// The row max is subtracted before exponentiation.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() > 2 {
            return Err(Error::Dim(format!("softmax_rows: {:?}", tx.shape())));
        }
        let (rows, cols) = (tx.rows(), tx.cols());
        if cols == 0 {
            return Err(Error::EmptyInput("softmax_rows over zero columns".into()));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let row = &tx.data()[i * cols..(i + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            let exps: Vec<f64> = row
                .iter()
                .map(|&v| {
                    let e = (v - m).exp();
                    denom += e;
                    e
                })
                .collect();
            data.extend(exps.into_iter().map(|e| e / denom));
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.requires(x);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    /// Row-wise log-sum-exp of a matrix, stabilized by the row max. The max
    /// shift is treated as a constant, so the backward pass is exactly the
    /// row softmax.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || tx.cols() == 0 {
            return Err(Error::Dim(format!("logsumexp_rows: {:?}", tx.shape())));
        }
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(rows);
        for i in 0..rows {
            data.push(logsumexp(&tx.data()[i * cols..(i + 1) * cols]));
        }
        let value = Tensor::vector(data);
        let rg = self.requires(x);
        Ok(self.push(value, Op::LogSumExpRows(x), rg))
    }

    pub fn take_diag(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || tx.rows() != tx.cols() {
            return Err(Error::Dim(format!("take_diag: {:?}", tx.shape())));
        }
        let n = tx.rows();
        let value = Tensor::vector((0..n).map(|i| tx.at2(i, i)).collect());
        let rg = self.requires(x);
        Ok(self.push(value, Op::TakeDiag(x), rg))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let n = tx.numel() as f64;
        let value = Tensor::scalar(tx.data().iter().sum::<f64>() / n);
        let rg = self.requires(x);
        self.push(value, Op::MeanAll(x), rg)
    }

    // ---- normalization ----

    /// Normalize each column to zero mean and unit variance over the time
    /// axis (population variance, epsilon inside the square root).
    pub fn instance_norm_cols(&mut self, x: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || tx.rows() == 0 {
            return Err(Error::Dim(format!("instance_norm_cols: {:?}", tx.shape())));
        }
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; rows * cols];
        for j in 0..cols {
            let mut mean = 0.0;
            for i in 0..rows {
                mean += tx.at2(i, j);
            }
            mean /= rows as f64;
            let mut var = 0.0;
            for i in 0..rows {
                let d = tx.at2(i, j) - mean;
                var += d * d;
            }
            var /= rows as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for i in 0..rows {
                data[i * cols + j] = (tx.at2(i, j) - mean) * inv;
            }
        }
        let value = Tensor::matrix(rows, cols, data)?;
        let rg = self.requires(x);
        Ok(self.push(value, Op::InstanceNormCols { x, eps }, rg))
    }

    /// Normalize each row to zero mean and unit variance (population
    /// variance). Affine terms are separate ops so this stays affine-free.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || tx.cols() == 0 {
            return Err(Error::Dim(format!("layer_norm_rows: {:?}", tx.shape())));
        }
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            data.extend(row.iter().map(|v| (v - mean) * inv));
        }
        let value = Tensor::matrix(rows, cols, data)?;
        let rg = self.requires(x);
        Ok(self.push(value, Op::LayerNormRows { x, eps }, rg))
    }

    // ---- convolution ----

    /// Valid 1-D convolution along the time axis. Input is [T, D_in],
    /// kernel is [k, D_in, D_out], output is [(T-k)/stride + 1, D_out].
    pub fn conv1d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        if tx.rank() != 2 || tk.rank() != 3 {
            return Err(Error::Dim(format!(
                "conv1d: input {:?}, kernel {:?}",
                tx.shape(),
                tk.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv1d stride must be positive".into()));
        }
        let (t, d_in) = (tx.rows(), tx.cols());
        let (k, kd_in, d_out) = (tk.shape()[0], tk.shape()[1], tk.shape()[2]);
        if kd_in != d_in {
            return Err(Error::Dim(format!(
                "conv1d: input has {d_in} channels, kernel expects {kd_in}"
            )));
        }
        if t < k {
            return Err(Error::SequenceTooShort {
                utterance: "<input>".into(),
                got: t,
                min: k,
            });
        }
        let t_out = (t - k) / stride + 1;
        let mut data = vec![0.0; t_out * d_out];
        let kd = tk.data();
        for ti in 0..t_out {
            let base = ti * stride;
            let out_row = &mut data[ti * d_out..(ti + 1) * d_out];
            for dk in 0..k {
                let in_row = tx.row(base + dk);
                for (di, &xv) in in_row.iter().enumerate() {
                    let krow = &kd[(dk * d_in + di) * d_out..(dk * d_in + di + 1) * d_out];
                    for (o, &kv) in out_row.iter_mut().zip(krow) {
                        *o += xv * kv;
                    }
                }
            }
        }
        let value = Tensor::matrix(t_out, d_out, data)?;
        let rg = self.requires(x) || self.requires(kernel);
        Ok(self.push(value, Op::Conv1d { x, kernel, stride }, rg))
    }

    // ---- diagnostics ----

    /// First node whose value contains a non-finite entry, as an error
    /// naming the offending operation.
    pub fn check_finite(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "op {} at tape position {i}",
                    node.op.name()
                )));
            }
        }
        Ok(())
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Consumes nothing; the tape can
    /// still be read afterwards, but is normally dropped.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Dim(format!(
                "backward from non-scalar {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().expect("checked above");
            self.accumulate(id, &g, &mut grads);
            if self.nodes[id].param.is_some() || matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        let mut params = BTreeMap::new();
        let mut leaves = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(g) = grads[i].take() {
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                match node.param {
                    Some(pid) => {
                        params.insert(pid, t);
                    }
                    None => {
                        leaves.insert(i, t);
                    }
                }
            }
        }
        Ok(Gradients { params, leaves })
    }

    fn accumulate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let add_to = |grads: &mut [Option<Vec<f64>>], v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot =
                grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };

        match &self.nodes[id].op {
            Op::Leaf | Op::Const => {}

            Op::Add(a, b) => {
                add_to(grads, *a, &mut |d| axpy(d, g, 1.0));
                add_to(grads, *b, &mut |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, &mut |d| axpy(d, g, 1.0));
                add_to(grads, *b, &mut |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                add_to(grads, *a, &mut |d| {
                    for ((di, gi), bi) in d.iter_mut().zip(g).zip(tb.data()) {
                        *di += gi * bi;
                    }
                });
                add_to(grads, *b, &mut |d| {
                    for ((di, gi), ai) in d.iter_mut().zip(g).zip(ta.data()) {
                        *di += gi * ai;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                add_to(grads, *a, &mut |d| axpy(d, g, c));
            }
            Op::AddRowVec(x, v) => {
                let cols = self.value(*v).numel();
                add_to(grads, *x, &mut |d| axpy(d, g, 1.0));
                add_to(grads, *v, &mut |d| {
                    for (i, gi) in g.iter().enumerate() {
                        d[i % cols] += gi;
                    }
                });
            }
            Op::MulRowVec(x, v) => {
                let tv = self.value(*v);
                let tx = self.value(*x);
                let cols = tv.numel();
                add_to(grads, *x, &mut |d| {
                    for (i, (di, gi)) in d.iter_mut().zip(g).enumerate() {
                        *di += gi * tv.data()[i % cols];
                    }
                });
                add_to(grads, *v, &mut |d| {
                    for (i, gi) in g.iter().enumerate() {
                        d[i % cols] += gi * tx.data()[i];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = g . B^T
                add_to(grads, *a, &mut |d| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let drow = &mut d[i * k..(i + 1) * k];
                        for (p, dv) in drow.iter_mut().enumerate() {
                            let brow = tb.row(p);
                            let mut acc = 0.0;
                            for (gv, bv) in grow.iter().zip(brow) {
                                acc += gv * bv;
                            }
                            *dv += acc;
                        }
                    }
                });
                // dB = A^T . g
                add_to(grads, *b, &mut |d| {
                    for i in 0..m {
                        let arow = ta.row(i);
                        let grow = &g[i * n..(i + 1) * n];
                        for (p, &av) in arow.iter().enumerate() {
                            if av == 0.0 {
                                continue;
                            }
                            let drow = &mut d[p * n..(p + 1) * n];
                            for (dv, gv) in drow.iter_mut().zip(grow) {
                                *dv += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (rows, cols) = {
                    let t = self.value(*a);
                    (t.rows(), t.cols())
                };
                add_to(grads, *a, &mut |d| {
                    for i in 0..rows {
                        for j in 0..cols {
                            d[i * cols + j] += g[j * rows + i];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                add_to(grads, *a, &mut |d| {
                    for ((di, gi), &x) in d.iter_mut().zip(g).zip(ta.data()) {
                        *di += gi * gelu_grad(x);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[id].value;
                let (rows, cols) = (y.rows(), y.cols());
                add_to(grads, *x, &mut |d| {
                    for i in 0..rows {
                        let yr = &y.data()[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let dr = &mut d[i * cols..(i + 1) * cols];
                        for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *dv += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LogSumExpRows(x) => {
                let tx = self.value(*x);
                let (rows, cols) = (tx.rows(), tx.cols());
                add_to(grads, *x, &mut |d| {
                    for i in 0..rows {
                        let row = tx.row(i);
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                        let dr = &mut d[i * cols..(i + 1) * cols];
                        for (dv, &xv) in dr.iter_mut().zip(row) {
                            *dv += g[i] * (xv - m).exp() / denom;
                        }
                    }
                });
            }
            Op::TakeDiag(x) => {
                let n = self.value(*x).rows();
                add_to(grads, *x, &mut |d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i * n + i] += gv;
                    }
                });
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel() as f64;
                add_to(grads, *x, &mut |d| {
                    let c = g[0] / n;
                    for dv in d.iter_mut() {
                        *dv += c;
                    }
                });
            }
            Op::InstanceNormCols { x, eps } => {
                let tx = self.value(*x);
                let y = &self.nodes[id].value;
                let (rows, cols) = (tx.rows(), tx.cols());
                let eps = *eps;
                add_to(grads, *x, &mut |d| {
                    for j in 0..cols {
                        let mut mean = 0.0;
                        for i in 0..rows {
                            mean += tx.at2(i, j);
                        }
                        mean /= rows as f64;
                        let mut var = 0.0;
                        for i in 0..rows {
                            let dv = tx.at2(i, j) - mean;
                            var += dv * dv;
                        }
                        var /= rows as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut g_mean = 0.0;
                        let mut gx_mean = 0.0;
                        for i in 0..rows {
                            let gi = g[i * cols + j];
                            g_mean += gi;
                            gx_mean += gi * y.at2(i, j);
                        }
                        g_mean /= rows as f64;
                        gx_mean /= rows as f64;
                        for i in 0..rows {
                            let gi = g[i * cols + j];
                            d[i * cols + j] += inv * (gi - g_mean - y.at2(i, j) * gx_mean);
                        }
                    }
                });
            }
            Op::LayerNormRows { x, eps } => {
                let tx = self.value(*x);
                let y = &self.nodes[id].value;
                let (rows, cols) = (tx.rows(), tx.cols());
                let eps = *eps;
                add_to(grads, *x, &mut |d| {
                    for i in 0..rows {
                        let row = tx.row(i);
                        let mean = row.iter().sum::<f64>() / cols as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let yr = y.row(i);
                        let gr = &g[i * cols..(i + 1) * cols];
                        let g_mean = gr.iter().sum::<f64>() / cols as f64;
                        let gx_mean =
                            gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        let dr = &mut d[i * cols..(i + 1) * cols];
                        for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv += inv * (gv - g_mean - yv * gx_mean);
                        }
                    }
                });
            }
            Op::Conv1d { x, kernel, stride } => {
                let tx = self.value(*x);
                let tk = self.value(*kernel);
                let (d_in, k, d_out) = (tx.cols(), tk.shape()[0], tk.shape()[2]);
                let t_out = self.nodes[id].value.rows();
                let stride = *stride;
                add_to(grads, *x, &mut |d| {
                    for ti in 0..t_out {
                        let base = ti * stride;
                        let grow = &g[ti * d_out..(ti + 1) * d_out];
                        for dk in 0..k {
                            let drow = &mut d[(base + dk) * d_in..(base + dk + 1) * d_in];
                            for (di, dv) in drow.iter_mut().enumerate() {
                                let krow = &tk.data()
                                    [(dk * d_in + di) * d_out..(dk * d_in + di + 1) * d_out];
                                let mut acc = 0.0;
                                for (gv, kv) in grow.iter().zip(krow) {
                                    acc += gv * kv;
                                }
                                *dv += acc;
                            }
                        }
                    }
                });
                add_to(grads, *kernel, &mut |d| {
                    for ti in 0..t_out {
                        let base = ti * stride;
                        let grow = &g[ti * d_out..(ti + 1) * d_out];
                        for dk in 0..k {
                            let xrow = tx.row(base + dk);
                            for (di, &xv) in xrow.iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                let drow =
                                    &mut d[(dk * d_in + di) * d_out..(dk * d_in + di + 1) * d_out];
                                for (dv, gv) in drow.iter_mut().zip(grow) {
                                    *dv += xv * gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let cols = self.value(*table).cols();
                add_to(grads, *table, &mut |d| {
                    for (out_row, &src) in ids.iter().enumerate() {
                        let grow = &g[out_row * cols..(out_row + 1) * cols];
                        let drow = &mut d[src * cols..(src + 1) * cols];
                        for (dv, gv) in drow.iter_mut().zip(grow) {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::SliceCols { x, start, len } => {
                let cols = self.value(*x).cols();
                let rows = self.value(*x).rows();
                let (start, len) = (*start, *len);
                add_to(grads, *x, &mut |d| {
                    for i in 0..rows {
                        for j in 0..len {
                            d[i * cols + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                let rows = self.value(parts[0]).rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let off = offset;
                    add_to(grads, p, &mut |d| {
                        for i in 0..rows {
                            for j in 0..w {
                                d[i * w + j] += g[i * total + off + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let off = offset;
                    add_to(grads, p, &mut |d| {
                        axpy(d, &g[off..off + n], 1.0);
                    });
                    offset += n;
                }
            }
            Op::TakeRow { x, row } => {
                let cols = self.value(*x).cols();
                let row = *row;
                add_to(grads, *x, &mut |d| {
                    for (j, gv) in g.iter().enumerate() {
                        d[row * cols + j] += gv;
                    }
                });
            }
            Op::StackRows(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    let n = self.value(p).numel();
                    add_to(grads, p, &mut |d| {
                        axpy(d, &g[i * n..(i + 1) * n], 1.0);
                    });
                }
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

pub(crate) fn matmul_2d(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), b.cols());
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut data[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = b.row(p);
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, data).expect("shape checked by caller")
}

pub(crate) fn transpose_2d(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = a.at2(i, j);
        }
    }
    Tensor::matrix(n, m, data).expect("shape checked by caller")
}

const GELU_C: f64 = 0.044_715;
/// sqrt(2/pi), written out so forward and backward share the exact bits.
const GELU_S: f64 = 0.797_884_560_802_865_4;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_S * (x + GELU_C * x * x * x)).tanh())
}

/// Analytic derivative of the same approximation, so gradient checks are
/// self-consistent with the forward definition.
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_S * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_S * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_known_product() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.matmul(eye, eye).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0, 0.0, 1.0]);

        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ones = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let p = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(p).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.0; 6]));
        let b = tape.constant(t(&[2, 2], &[0.0; 4]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn softmax_uniform_and_large_inputs() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let big = tape.constant(t(&[3], &[1000.0, 1000.0, 1000.0]));
        let yb = tape.softmax_rows(big).unwrap();
        for v in tape.value(yb).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
            assert!(v.is_finite());
        }
    }

    #[test]
    fn logsumexp_is_stable_for_large_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1000.0, 1000.0]));
        let y = tape.logsumexp_rows(x).unwrap();
        let expected = 1000.0 + 2.0f64.ln();
        assert!((tape.value(y).data()[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn instance_norm_normalizes_each_column() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 1], &[1.0, 3.0]));
        let y = tape.instance_norm_cols(x, 1e-5).unwrap();
        let got = tape.value(y).data();
        assert!((got[0] + 1.0).abs() < 1e-4);
        assert!((got[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn conv1d_running_average_with_stride_two() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[5, 1], &[1.0, 2.0, 3.0, 4.0, 5.0]));
        let k = tape.constant(t(&[2, 1, 1], &[0.5, 0.5]));
        let y = tape.conv1d(x, k, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 1]);
        assert_eq!(tape.value(y).data(), &[1.5, 3.5]);
    }

    #[test]
    fn conv1d_downsamples_120_frames_to_10_steps() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[120, 3]));
        let k1 = tape.constant(Tensor::zeros(&[4, 3, 5]));
        let h = tape.conv1d(x, k1, 4).unwrap();
        assert_eq!(tape.value(h).shape(), &[30, 5]);
        let k2 = tape.constant(Tensor::zeros(&[3, 5, 5]));
        let out = tape.conv1d(h, k2, 3).unwrap();
        assert_eq!(tape.value(out).shape(), &[10, 5]);
    }

    #[test]
    fn conv1d_rejects_input_shorter_than_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        let k = tape.constant(Tensor::zeros(&[4, 2, 2]));
        match tape.conv1d(x, k, 4) {
            Err(crate::error::Error::SequenceTooShort { got, min, .. }) => {
                assert_eq!((got, min), (3, 4));
            }
            other => panic!("expected SequenceTooShort, got {other:?}"),
        }
    }

    #[test]
    fn gelu_matches_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-6);
        assert!(gelu(-10.0).abs() < 1e-6);
        // sqrt(2/pi) constant agrees with the runtime value.
        assert!((GELU_S - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-15);
        // Analytic derivative agrees with a central difference.
        for &x in &[-2.0, -0.5, 0.0, 0.3, 1.7] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x = {x}");
        }
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let prod = tape.mul(x, c).unwrap();
        let loss = tape.mean_all(prod);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.leaf(x).is_some());
        assert!(grads.leaf(c).is_none());
        assert_eq!(grads.leaf(x).unwrap().data(), &[1.5, 2.0]);
    }

    #[test]
    fn check_finite_names_the_offending_op() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[f64::MAX]));
        let y = tape.scale(x, 2.0);
        let _ = y;
        let err = tape.check_finite().unwrap_err();
        assert!(err.to_string().contains("scale"), "{err}");
    }
}
