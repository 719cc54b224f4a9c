//! Dense row-major tensors and a tape-based reverse-mode autodiff graph.
//!
//! The graph records every operation in execution order. `backward` walks the
//! tape in reverse and accumulates gradients into the leaves that requested
//! them. Only the operations needed by the Transformer training loop exist.

use thiserror::Error;

use crate::quant::QuantParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("batchnorm running statistics are not initialized")]
    UninitializedStats,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::Shape {
                    op: "from_rows",
                    lhs: vec![r, c],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![r, c], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a matrix; a vector of length `n` is treated as `1×n`.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }
}

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics of a batch normalization layer.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BatchNormStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub initialized: bool,
}

impl BatchNormStats {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Transpose(Var),
    Sum(Var),
    SoftmaxRows(Var),
    /// Forward value substituted by an approximation; `exact` holds the float
    /// softmax used for the backward pass.
    SoftmaxApprox {
        x: Var,
        exact: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MeanBlocks {
        x: Var,
        block: usize,
    },
    BlockMatMulT {
        a: Var,
        b: Var,
        block: usize,
    },
    BlockMatMul {
        a: Var,
        b: Var,
        block: usize,
    },
    FakeQuant {
        x: Var,
        pass: Vec<bool>,
    },
    RoundGrid(Var),
    Mse {
        pred: Var,
        diff: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Execution tape for one forward/backward pass.
///
/// With `ste_surrogate` set, quantizing ops skip their rounding step and only
/// clamp. The forward then computes exactly the piecewise-linear function whose
/// derivative the straight-through estimator returns, which makes the recorded
/// backward pass checkable against finite differences.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    ste_surrogate: bool,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let orow = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

// out[p×r] += a[p×q] · b[r×q]ᵀ
fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        for j in 0..r {
            let brow = &b[j * q..(j + 1) * q];
            out[i * r + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// out[q×r] += a[p×q]ᵀ · b[p×r]
fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let brow = &b[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[k * r..(k + 1) * r];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

pub fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_ste_surrogate() -> Self {
        Self {
            nodes: Vec::new(),
            ste_surrogate: true,
        }
    }

    pub fn ste_surrogate(&self) -> bool {
        self.ste_surrogate
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Its `requires_grad` flag decides whether it receives a
    /// gradient in [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?.with_grad()))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (p, q, r) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; p * r];
        matmul_into(&ta.data, &tb.data, &mut out, p, q, r);
        Ok(self.push(Tensor::new(vec![p, r], out)?, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b)))
    }

    /// Adds a length-`q` vector to every row of a `p×q` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let q = tx.cols();
        if tb.numel() != q {
            return Err(shape_err("add_row", tx, tb));
        }
        let data = tx
            .data
            .chunks(q)
            .flat_map(|row| row.iter().zip(&tb.data).map(|(a, b)| a + b))
            .collect();
        let shape = tx.shape.clone();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let tx = self.value(x);
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|v| v * c).collect(),
            requires_grad: false,
            grad: None,
        };
        self.push(t, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|v| v.max(0.0)).collect(),
            requires_grad: false,
            grad: None,
        };
        self.push(t, Op::Relu(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape.len() != 2 {
            return Err(shape_err("transpose", tx, tx));
        }
        let (p, q) = (tx.shape[0], tx.shape[1]);
        let mut out = vec![0.0; p * q];
        for i in 0..p {
            for j in 0..q {
                out[j * p + i] = tx.data[i * q + j];
            }
        }
        Ok(self.push(Tensor::new(vec![q, p], out)?, Op::Transpose(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let q = tx.cols();
        let mut out = vec![0.0; tx.numel()];
        for (row, orow) in tx.data.chunks(q).zip(out.chunks_mut(q)) {
            softmax_row(row, orow);
        }
        let t = Tensor {
            shape: tx.shape.clone(),
            data: out,
            requires_grad: false,
            grad: None,
        };
        self.push(t, Op::SoftmaxRows(x))
    }

    /// Row-wise softmax whose forward value is replaced by `approx` (e.g. a
    /// fixed-point evaluation) while the backward pass differentiates the
    /// exact softmax.
    pub fn softmax_rows_approx(&mut self, x: Var, approx: Vec<f64>) -> Result<Var> {
        let tx = self.value(x);
        if approx.len() != tx.numel() {
            return Err(TensorError::Shape {
                op: "softmax_rows_approx",
                lhs: tx.shape.clone(),
                rhs: vec![approx.len()],
            });
        }
        let q = tx.cols();
        let mut exact = vec![0.0; tx.numel()];
        for (row, orow) in tx.data.chunks(q).zip(exact.chunks_mut(q)) {
            softmax_row(row, orow);
        }
        let t = Tensor {
            shape: tx.shape.clone(),
            data: approx,
            requires_grad: false,
            grad: None,
        };
        Ok(self.push(t, Op::SoftmaxApprox { x, exact }))
    }

    /// Batch normalization over the rows of an `n×d` matrix.
    ///
    /// Train mode normalizes with the biased batch variance and folds the
    /// unbiased variance into the running statistics. Eval mode treats the
    /// running statistics as constants.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats,
        mode: BnMode,
    ) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = (tx.rows(), tx.cols());
        if self.value(gamma).numel() != d || self.value(beta).numel() != d || stats.channels() != d {
            return Err(shape_err("batchnorm", tx, self.value(gamma)));
        }
        if n == 0 {
            return Err(TensorError::Empty("batchnorm"));
        }
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; d];
                for row in tx.data.chunks(d) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; d];
                for row in tx.data.chunks(d) {
                    for c in 0..d {
                        let dv = row[c] - mean[c];
                        var[c] += dv * dv;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                let unbias = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
                let mom = stats.momentum;
                for c in 0..d {
                    stats.running_mean[c] = (1.0 - mom) * stats.running_mean[c] + mom * mean[c];
                    stats.running_var[c] =
                        (1.0 - mom) * stats.running_var[c] + mom * var[c] * unbias;
                }
                stats.initialized = true;
                (mean, var)
            }
            BnMode::Eval => {
                if !stats.initialized {
                    return Err(TensorError::UninitializedStats);
                }
                (stats.running_mean.clone(), stats.running_var.clone())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut xhat = vec![0.0; n * d];
        let mut out = vec![0.0; n * d];
        let tx = self.value(x);
        for r in 0..n {
            for c in 0..d {
                let i = r * d + c;
                xhat[i] = (tx.data[i] - mean[c]) * inv_std[c];
                out[i] = g[c] * xhat[i] + b[c];
            }
        }
        let shape = tx.shape.clone();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == BnMode::Train,
            },
        ))
    }

    /// Column means of consecutive blocks of `block` rows: `[B·block × d] → [B × d]`.
    pub fn mean_blocks(&mut self, x: Var, block: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, d) = (tx.rows(), tx.cols());
        if block == 0 || rows == 0 {
            return Err(TensorError::Empty("global_avg_pool"));
        }
        if rows % block != 0 {
            return Err(TensorError::Shape {
                op: "mean_blocks",
                lhs: tx.shape.clone(),
                rhs: vec![block],
            });
        }
        let nb = rows / block;
        let mut out = vec![0.0; nb * d];
        for (r, row) in tx.data.chunks(d).enumerate() {
            let o = &mut out[(r / block) * d..(r / block + 1) * d];
            for (ov, v) in o.iter_mut().zip(row) {
                *ov += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= block as f64);
        Ok(self.push(Tensor::new(vec![nb, d], out)?, Op::MeanBlocks { x, block }))
    }

    /// Global average pooling over all rows: `[n × d] → [1 × d]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let rows = self.value(x).rows();
        self.mean_blocks(x, rows)
    }

    /// Per block of rows, `a_i · b_iᵀ` with `a_i, b_i` of shape `block×q`.
    pub fn block_matmul_t(&mut self, a: Var, b: Var, block: usize) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape || block == 0 || ta.rows() % block != 0 {
            return Err(shape_err("block_matmul_t", ta, tb));
        }
        let q = ta.cols();
        let nb = ta.rows() / block;
        let mut out = vec![0.0; nb * block * block];
        for i in 0..nb {
            let sa = &ta.data[i * block * q..(i + 1) * block * q];
            let sb = &tb.data[i * block * q..(i + 1) * block * q];
            let so = &mut out[i * block * block..(i + 1) * block * block];
            matmul_nt_into(sa, sb, so, block, q, block);
        }
        Ok(self.push(
            Tensor::new(vec![nb * block, block], out)?,
            Op::BlockMatMulT { a, b, block },
        ))
    }

    /// Per block of rows, `a_i · b_i` with `a_i` of shape `block×block` and `b_i` of `block×q`.
    pub fn block_matmul(&mut self, a: Var, b: Var, block: usize) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if block == 0
            || ta.cols() != block
            || ta.rows() != tb.rows()
            || ta.rows() % block != 0
        {
            return Err(shape_err("block_matmul", ta, tb));
        }
        let q = tb.cols();
        let nb = ta.rows() / block;
        let mut out = vec![0.0; nb * block * q];
        for i in 0..nb {
            let sa = &ta.data[i * block * block..(i + 1) * block * block];
            let sb = &tb.data[i * block * q..(i + 1) * block * q];
            let so = &mut out[i * block * q..(i + 1) * block * q];
            matmul_into(sa, sb, so, block, block, q);
        }
        Ok(self.push(
            Tensor::new(vec![nb * block, q], out)?,
            Op::BlockMatMul { a, b, block },
        ))
    }

    /// Quantize-dequantize with a straight-through backward pass. Gradients
    /// pass where the input lies inside the representable real interval.
    pub fn fake_quantize(&mut self, x: Var, qp: &QuantParams) -> Var {
        let (lo, hi) = (qp.real_min(), qp.real_max());
        let tx = self.value(x);
        let pass: Vec<bool> = tx.data.iter().map(|&v| v >= lo && v <= hi).collect();
        let data = if self.ste_surrogate {
            tx.data.iter().map(|&v| v.clamp(lo, hi)).collect()
        } else {
            tx.data
                .iter()
                .map(|&v| qp.dequantize_value(qp.quantize_value(v)))
                .collect()
        };
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
            requires_grad: false,
            grad: None,
        };
        self.push(t, Op::FakeQuant { x, pass })
    }

    /// Snaps values to the grid `scale·ℤ` without clamping; identity gradient.
    pub fn round_to_grid(&mut self, x: Var, scale: f64) -> Var {
        let tx = self.value(x);
        let data = if self.ste_surrogate {
            tx.data.clone()
        } else {
            tx.data.iter().map(|&v| (v / scale).round() * scale).collect()
        };
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
            requires_grad: false,
            grad: None,
        };
        self.push(t, Op::RoundGrid(x))
    }

    /// Replaces the forward value of `x` by `data` (an exact integer-domain
    /// evaluation of the same quantity); the gradient passes straight through.
    pub fn substitute(&mut self, x: Var, data: Vec<f64>) -> Result<Var> {
        let tx = self.value(x);
        if data.len() != tx.numel() {
            return Err(TensorError::Shape {
                op: "substitute",
                lhs: tx.shape.clone(),
                rhs: vec![data.len()],
            });
        }
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
            requires_grad: false,
            grad: None,
        };
        Ok(self.push(t, Op::RoundGrid(x)))
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let tp = self.value(pred);
        if tp.numel() != target.numel() {
            return Err(shape_err("mse_loss", tp, target));
        }
        let diff: Vec<f64> = tp.data.iter().zip(&target.data).map(|(p, t)| p - t).collect();
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / diff.len().max(1) as f64;
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, diff }))
    }

    /// Mean cross-entropy of `B×k` logits against class indices.
    pub fn cross_entropy_loss(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let k = tl.cols();
        let b = tl.rows();
        if targets.len() != b {
            return Err(TensorError::Shape {
                op: "cross_entropy_loss",
                lhs: tl.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= k {
                return Err(TensorError::ClassIndex {
                    index: t,
                    classes: k,
                });
            }
            let row = &tl.data[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_row(row, &mut probs[i * k..(i + 1) * k]);
        }
        loss /= b as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar loss. Leaf gradients accumulate across calls
    /// until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NonScalarLoss(lt.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gout);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (p, q, r) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                    let ga = acc(&mut grads, *a, p * q);
                    matmul_nt_into(&gout, &tb.data, ga, p, r, q);
                    let gb = acc(&mut grads, *b, q * r);
                    matmul_tn_into(&ta.data, &gout, gb, p, q, r);
                }
                Op::Add(a, b) => {
                    let n = gout.len();
                    for v in [*a, *b] {
                        let g = acc(&mut grads, v, n);
                        g.iter_mut().zip(&gout).for_each(|(x, y)| *x += y);
                    }
                }
                Op::AddRow(x, bias) => {
                    let n = gout.len();
                    let q = self.nodes[bias.0].value.numel();
                    let gx = acc(&mut grads, *x, n);
                    gx.iter_mut().zip(&gout).for_each(|(a, b)| *a += b);
                    let gb = acc(&mut grads, *bias, q);
                    for row in gout.chunks(q) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
                Op::Scale(x, c) => {
                    let gx = acc(&mut grads, *x, gout.len());
                    gx.iter_mut().zip(&gout).for_each(|(a, b)| *a += c * b);
                }
                Op::Relu(x) => {
                    let tx = &self.nodes[x.0].value;
                    let gx = acc(&mut grads, *x, gout.len());
                    for ((g, go), v) in gx.iter_mut().zip(&gout).zip(&tx.data) {
                        if *v > 0.0 {
                            *g += go;
                        }
                    }
                }
                Op::Transpose(x) => {
                    let tx = &self.nodes[x.0].value;
                    let (p, q) = (tx.shape[0], tx.shape[1]);
                    let gx = acc(&mut grads, *x, p * q);
                    for i in 0..p {
                        for j in 0..q {
                            gx[i * q + j] += gout[j * p + i];
                        }
                    }
                }
                Op::Sum(x) => {
                    let n = self.nodes[x.0].value.numel();
                    let gx = acc(&mut grads, *x, n);
                    gx.iter_mut().for_each(|g| *g += gout[0]);
                }
                Op::SoftmaxRows(_) | Op::SoftmaxApprox { .. } => {
                    let (x, y) = match &node.op {
                        Op::SoftmaxApprox { x, exact } => (x, exact.as_slice()),
                        Op::SoftmaxRows(x) => (x, node.value.data.as_slice()),
                        _ => unreachable!(),
                    };
                    let q = node.value.cols();
                    let gx = acc(&mut grads, *x, gout.len());
                    for ((yr, gr), xr) in y.chunks(q).zip(gout.chunks(q)).zip(gx.chunks_mut(q)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..q {
                            xr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let d = inv_std.len();
                    let n = gout.len() / d;
                    let g = self.nodes[gamma.0].value.data.clone();
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for r in 0..n {
                        for c in 0..d {
                            let i = r * d + c;
                            dgamma[c] += gout[i] * xhat[i];
                            dbeta[c] += gout[i];
                        }
                    }
                    let gx = acc(&mut grads, *x, n * d);
                    if *batch_stats {
                        let nf = n as f64;
                        for r in 0..n {
                            for c in 0..d {
                                let i = r * d + c;
                                gx[i] += g[c] * inv_std[c] / nf
                                    * (nf * gout[i] - dbeta[c] - xhat[i] * dgamma[c]);
                            }
                        }
                    } else {
                        for r in 0..n {
                            for c in 0..d {
                                let i = r * d + c;
                                gx[i] += g[c] * inv_std[c] * gout[i];
                            }
                        }
                    }
                    let gg = acc(&mut grads, *gamma, d);
                    gg.iter_mut().zip(&dgamma).for_each(|(a, b)| *a += b);
                    let gb = acc(&mut grads, *beta, d);
                    gb.iter_mut().zip(&dbeta).for_each(|(a, b)| *a += b);
                }
                Op::MeanBlocks { x, block } => {
                    let tx = &self.nodes[x.0].value;
                    let d = tx.cols();
                    let n = tx.numel();
                    let inv = 1.0 / *block as f64;
                    let block = *block;
                    let gx = acc(&mut grads, *x, n);
                    for (r, row) in gx.chunks_mut(d).enumerate() {
                        let go = &gout[(r / block) * d..(r / block + 1) * d];
                        row.iter_mut().zip(go).for_each(|(a, b)| *a += b * inv);
                    }
                }
                Op::BlockMatMulT { a, b, block } => {
                    let block = *block;
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let q = ta.cols();
                    let nb = ta.rows() / block;
                    let mut ga = vec![0.0; ta.numel()];
                    let mut gb = vec![0.0; tb.numel()];
                    for i in 0..nb {
                        let go = &gout[i * block * block..(i + 1) * block * block];
                        let sa = &ta.data[i * block * q..(i + 1) * block * q];
                        let sb = &tb.data[i * block * q..(i + 1) * block * q];
                        matmul_into(go, sb, &mut ga[i * block * q..(i + 1) * block * q], block, block, q);
                        matmul_tn_into(go, sa, &mut gb[i * block * q..(i + 1) * block * q], block, block, q);
                    }
                    let (na, nbl) = (ga.len(), gb.len());
                    acc(&mut grads, *a, na).iter_mut().zip(&ga).for_each(|(x, y)| *x += y);
                    acc(&mut grads, *b, nbl).iter_mut().zip(&gb).for_each(|(x, y)| *x += y);
                }
                Op::BlockMatMul { a, b, block } => {
                    let block = *block;
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let q = tb.cols();
                    let nb = ta.rows() / block;
                    let mut ga = vec![0.0; ta.numel()];
                    let mut gb = vec![0.0; tb.numel()];
                    for i in 0..nb {
                        let go = &gout[i * block * q..(i + 1) * block * q];
                        let sa = &ta.data[i * block * block..(i + 1) * block * block];
                        let sb = &tb.data[i * block * q..(i + 1) * block * q];
                        matmul_nt_into(go, sb, &mut ga[i * block * block..(i + 1) * block * block], block, q, block);
                        matmul_tn_into(sa, go, &mut gb[i * block * q..(i + 1) * block * q], block, block, q);
                    }
                    let (na, nbl) = (ga.len(), gb.len());
                    acc(&mut grads, *a, na).iter_mut().zip(&ga).for_each(|(x, y)| *x += y);
                    acc(&mut grads, *b, nbl).iter_mut().zip(&gb).for_each(|(x, y)| *x += y);
                }
                Op::FakeQuant { x, pass } => {
                    let gx = acc(&mut grads, *x, gout.len());
                    for ((g, go), p) in gx.iter_mut().zip(&gout).zip(pass) {
                        if *p {
                            *g += go;
                        }
                    }
                }
                Op::RoundGrid(x) => {
                    let gx = acc(&mut grads, *x, gout.len());
                    gx.iter_mut().zip(&gout).for_each(|(a, b)| *a += b);
                }
                Op::Mse { pred, diff } => {
                    let scale = 2.0 * gout[0] / diff.len().max(1) as f64;
                    let gp = acc(&mut grads, *pred, diff.len());
                    gp.iter_mut().zip(diff).for_each(|(a, d)| *a += scale * d);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let b = targets.len();
                    let k = probs.len() / b.max(1);
                    let scale = gout[0] / b as f64;
                    let gl = acc(&mut grads, *logits, probs.len());
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let ind = if j == t { 1.0 } else { 0.0 };
                            gl[i * k + j] += scale * (probs[i * k + j] - ind);
                        }
                    }
                }
            }
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if !matches!(node.op, Op::Leaf) || !node.value.requires_grad {
                continue;
            }
            let n = node.value.numel();
            let slot = node.value.grad.get_or_insert_with(|| vec![0.0; n]);
            if let Some(g) = g {
                slot.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
        }
        Ok(())
    }
}
