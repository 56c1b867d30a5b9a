//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends one node holding its output value and enough saved
//! state to run its backward rule. Node inputs always precede the node, so a
//! single reverse sweep visits each node once in topological order.
//!
//! Two backward modes exist:
//!
//! * [`Tape::backward`] evaluates vector-Jacobian products numerically and
//!   writes `d(loss)/d(leaf)` into the `grad` field of each tracked leaf.
//! * [`Tape::grad_graph`] records the backward computation itself as new tape
//!   nodes, so the resulting gradients can be differentiated again. Only the
//!   dense algebra used by classifier heads supports this mode; convolution,
//!   pooling and normalization nodes must not lie between the output and the
//!   requested variables.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    MulScalar(usize, usize),
    MulConst(usize, Vec<f64>),
    Matmul(usize, usize),
    Transpose(usize),
    AddRowVec(usize, usize),
    SumRows(usize),
    BroadcastRows(usize),
    RowSum(usize),
    BroadcastCols(usize),
    SumAll(usize),
    Expand(usize),
    Reshape(usize),
    Sqrt(usize),
    Relu(usize),
    Softmax(usize),
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        geom: ConvGeom,
        cols: Option<Vec<f64>>,
    },
    MaxPool2d {
        input: usize,
        argmax: Vec<usize>,
    },
    MeanPool {
        input: usize,
        spatial: usize,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        dims: (usize, usize, usize),
    },
    BatchNormFrozen {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        dims: (usize, usize, usize),
    },
    FilterScale {
        weight: usize,
        scale: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::MulScalar(..) => "mul_scalar",
            Op::MulConst(..) => "mul_const",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::AddRowVec(..) => "add_row_vec",
            Op::SumRows(..) => "sum_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::RowSum(..) => "row_sum",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::SumAll(..) => "sum_all",
            Op::Expand(..) => "expand",
            Op::Reshape(..) => "reshape",
            Op::Sqrt(..) => "sqrt",
            Op::Relu(..) => "relu",
            Op::Softmax(..) => "softmax",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::MeanPool { .. } => "mean_pool",
            Op::BatchNorm { .. } => "batch_norm",
            Op::BatchNormFrozen { .. } => "batch_norm_frozen",
            Op::FilterScale { .. } => "filter_scale",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MulScalar(a, b)
            | Op::Matmul(a, b)
            | Op::AddRowVec(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::MulConst(a, _)
            | Op::Transpose(a)
            | Op::SumRows(a)
            | Op::BroadcastRows(a)
            | Op::RowSum(a)
            | Op::BroadcastCols(a)
            | Op::SumAll(a)
            | Op::Expand(a)
            | Op::Reshape(a)
            | Op::Sqrt(a)
            | Op::Relu(a)
            | Op::Softmax(a) => vec![a],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => vec![input, weight, bias],
            Op::MaxPool2d { input, .. } | Op::MeanPool { input, .. } => vec![input],
            Op::BatchNorm {
                input, gamma, beta, ..
            }
            | Op::BatchNormFrozen {
                input, gamma, beta, ..
            } => vec![input, gamma, beta],
            Op::FilterScale { weight, scale } => vec![weight, scale],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    pub count: usize,
}

/// An append-only record of executed operations.
///
/// A tape and its values belong to one thread at a time; separate tapes are
/// fully independent.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "variable {v:?} does not belong to tape {}",
                self.id
            )));
        }
        Ok(v.idx)
    }

    fn tracked(&self, idx: usize) -> bool {
        self.nodes[idx].value.requires_grad()
    }

    fn push(&mut self, shape: &[usize], data: Vec<f64>, op: Op) -> Result<Var> {
        let tracked = op.inputs().iter().any(|&i| self.tracked(i));
        let value = Tensor::new(shape, data)?.with_requires_grad(tracked);
        self.nodes.push(Node { value, op });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    /// Record a leaf. Its `requires_grad` flag decides whether gradients flow
    /// to it; any existing gradient buffer is dropped.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        let _ = value.set_grad(None);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    /// Record a leaf that never receives gradients.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(&t.detached())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.check(v).expect("foreign variable")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient stored on a leaf by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.value(v).grad()
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.idx].op, Op::Leaf)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::dim(op, self.val(a).shape(), self.val(b).shape()));
        }
        Ok(())
    }

    fn as_matrix(&self, op: &'static str, a: usize) -> Result<(usize, usize)> {
        match *self.val(a).shape() {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::dim(op, s, &[0, 0])),
        }
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape(name, ia, ib)?;
        let data = self
            .val(ia)
            .data()
            .iter()
            .zip(self.val(ib).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.val(ia).shape().to_vec();
        self.push(&shape, data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", Op::Add(a.idx, b.idx), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", Op::Sub(a.idx, b.idx), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", Op::Mul(a.idx, b.idx), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "div", Op::Div(a.idx, b.idx), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia).map(|v| v * c);
        let shape = t.shape().to_vec();
        self.push(&shape, t.into_data(), Op::Scale(ia, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia).map(|v| v + c);
        let shape = t.shape().to_vec();
        self.push(&shape, t.into_data(), Op::AddConst(ia))
    }

    /// Elementwise product with a fixed (non-differentiable) mask.
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let ia = self.check(a)?;
        if mask.len() != self.val(ia).numel() {
            return Err(Error::dim("mul_const", self.val(ia).shape(), &[mask.len()]));
        }
        let data = self.val(ia).data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.val(ia).shape().to_vec();
        self.push(&shape, data, Op::MulConst(ia, mask))
    }

    /// Tensor times a one-element variable.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ia, is) = (self.check(a)?, self.check(s)?);
        if self.val(is).numel() != 1 {
            return Err(Error::dim("mul_scalar", self.val(ia).shape(), self.val(is).shape()));
        }
        let sv = self.val(is).data()[0];
        let t = self.val(ia).map(|v| v * sv);
        let shape = t.shape().to_vec();
        self.push(&shape, t.into_data(), Op::MulScalar(ia, is))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (r, k) = self.as_matrix("matmul", ia)?;
        let (k2, c) = self.as_matrix("matmul", ib)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.val(ia).shape(), self.val(ib).shape()));
        }
        let data = kernels::matmul(self.val(ia).data(), self.val(ib).data(), r, k, c);
        self.push(&[r, c], data, Op::Matmul(ia, ib))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (r, c) = self.as_matrix("transpose", ia)?;
        let src = self.val(ia).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.push(&[c, r], data, Op::Transpose(ia))
    }

    /// `a[B×M] + v[M]` broadcast over rows.
    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (ia, iv) = (self.check(a)?, self.check(v)?);
        let (b, m) = self.as_matrix("add_row_vec", ia)?;
        if self.val(iv).numel() != m {
            return Err(Error::dim("add_row_vec", self.val(ia).shape(), self.val(iv).shape()));
        }
        let vv = self.val(iv).data();
        let data = self
            .val(ia)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + vv[i % m])
            .collect();
        debug_assert_eq!(b * m, self.val(ia).numel());
        self.push(&[b, m], data, Op::AddRowVec(ia, iv))
    }

    /// Column sums: `[B×M] -> [M]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (b, m) = self.as_matrix("sum_rows", ia)?;
        let src = self.val(ia).data();
        let mut data = vec![0.0; m];
        for i in 0..b {
            for j in 0..m {
                data[j] += src[i * m + j];
            }
        }
        self.push(&[m], data, Op::SumRows(ia))
    }

    /// `[M] -> [B×M]` by repeating the vector as every row.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let iv = self.check(v)?;
        let m = self.val(iv).numel();
        let data = self.val(iv).data().repeat(rows);
        self.push(&[rows, m], data, Op::BroadcastRows(iv))
    }

    /// Row sums: `[B×M] -> [B×1]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (b, m) = self.as_matrix("row_sum", ia)?;
        let data = self.val(ia).data().chunks(m).map(|r| r.iter().sum()).collect();
        self.push(&[b, 1], data, Op::RowSum(ia))
    }

    /// `[B×1] -> [B×M]` by repeating each row's value.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let (b, one) = self.as_matrix("broadcast_cols", ia)?;
        if one != 1 {
            return Err(Error::dim("broadcast_cols", self.val(ia).shape(), &[b, 1]));
        }
        let data = self
            .val(ia)
            .data()
            .iter()
            .flat_map(|&x| std::iter::repeat_n(x, cols))
            .collect();
        self.push(&[b, cols], data, Op::BroadcastCols(ia))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.val(ia).data().iter().sum();
        self.push(&[1], vec![s], Op::SumAll(ia))
    }

    /// Broadcast a one-element variable to `shape`.
    pub fn expand(&mut self, s: Var, shape: &[usize]) -> Result<Var> {
        let is = self.check(s)?;
        if self.val(is).numel() != 1 {
            return Err(Error::dim("expand", self.val(is).shape(), shape));
        }
        let n = shape.iter().product();
        let data = vec![self.val(is).data()[0]; n];
        self.push(shape, data, Op::Expand(is))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        if shape.iter().product::<usize>() != self.val(ia).numel() {
            return Err(Error::dim("reshape", self.val(ia).shape(), shape));
        }
        let data = self.val(ia).data().to_vec();
        self.push(shape, data, Op::Reshape(ia))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia).map(f64::sqrt);
        let shape = t.shape().to_vec();
        self.push(&shape, t.into_data(), Op::Sqrt(ia))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia).map(|v| v.max(0.0));
        let shape = t.shape().to_vec();
        self.push(&shape, t.into_data(), Op::Relu(ia))
    }

    /// Row-wise softmax of a `[B×M]` matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (b, m) = self.as_matrix("softmax", ia)?;
        let data = softmax_rows(self.val(ia).data(), m);
        self.push(&[b, m], data, Op::Softmax(ia))
    }

    /// Mean over rows of `-log softmax(logits)[label]`, stabilized by
    /// subtracting each row's maximum.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let (b, m) = self.as_matrix("softmax_cross_entropy", il)?;
        if labels.len() != b {
            return Err(Error::dim("softmax_cross_entropy", &[b, m], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::Index { index: bad, bound: m });
        }
        let x = self.val(il).data();
        let mut loss = 0.0;
        for (row, &label) in x.chunks(m).zip(labels) {
            // log-sum-exp around the row max, with the max's own unit term
            // folded into ln_1p so confident rows keep full precision
            let am = argmax(row);
            let mx = row[am];
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != am)
                .map(|(_, v)| (v - mx).exp())
                .sum();
            loss += (mx - row[label]) + rest.ln_1p();
        }
        let probs = softmax_rows(x, m);
        self.push(
            &[1],
            vec![loss / b as f64],
            Op::SoftmaxCrossEntropy {
                logits: il,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Cross-correlation of `input[B×C×H×W]` with `weight[K×C×kh×kw]` plus a
    /// per-filter `bias[K]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ii, iw, ib) = (self.check(input)?, self.check(weight)?, self.check(bias)?);
        let (is, ws) = (self.val(ii).shape(), self.val(iw).shape());
        let ([batch, c_in, h, w], [k, wc, kh, kw]) = (is, ws) else {
            return Err(Error::dim("conv2d", is, ws));
        };
        let geom = ConvGeom {
            batch: *batch,
            c_in: *c_in,
            h: *h,
            w: *w,
            k: *k,
            kh: *kh,
            kw: *kw,
            stride,
            pad,
        };
        if wc != c_in {
            return Err(Error::dim("conv2d", is, ws));
        }
        if stride == 0 || *kh > h + 2 * pad || *kw > w + 2 * pad {
            return Err(Error::dim("conv2d", is, ws));
        }
        if self.val(ib).numel() != *k {
            return Err(Error::dim("conv2d", ws, self.val(ib).shape()));
        }
        let (out, cols) =
            kernels::conv2d_forward_cols(&geom, self.val(ii).data(), self.val(iw).data(), self.val(ib).data());
        let cols = self.tracked(iw).then_some(cols);
        self.push(
            &[geom.batch, geom.k, geom.out_h(), geom.out_w()],
            out,
            Op::Conv2d {
                input: ii,
                weight: iw,
                bias: ib,
                geom,
                cols,
            },
        )
    }

    /// 2×2 window max with stride 2.
    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        let ii = self.check(input)?;
        let [b, c, h, w] = *self.val(ii).shape() else {
            return Err(Error::dim("max_pool2d", self.val(ii).shape(), &[0, 0, 2, 2]));
        };
        if h < 2 || w < 2 {
            return Err(Error::dim("max_pool2d", self.val(ii).shape(), &[b, c, 2, 2]));
        }
        let (out, argmax) = kernels::max_pool2x2(self.val(ii).data(), b * c, h, w);
        self.push(&[b, c, h / 2, w / 2], out, Op::MaxPool2d { input: ii, argmax })
    }

    /// Spatial mean: `[B×C×H×W] -> [B×C]`.
    pub fn mean_pool(&mut self, input: Var) -> Result<Var> {
        let ii = self.check(input)?;
        let [b, c, h, w] = *self.val(ii).shape() else {
            return Err(Error::dim("mean_pool", self.val(ii).shape(), &[0, 0, 0, 0]));
        };
        let spatial = h * w;
        let data = self
            .val(ii)
            .data()
            .chunks(spatial)
            .map(|p| p.iter().sum::<f64>() / spatial as f64)
            .collect();
        self.push(&[b, c], data, Op::MeanPool { input: ii, spatial })
    }

    fn bn_dims(&self, op: &'static str, ii: usize, ig: usize, ibt: usize) -> Result<(usize, usize, usize)> {
        let s = self.val(ii).shape();
        let (b, c, sp) = match *s {
            [b, c] => (b, c, 1),
            [b, c, h, w] => (b, c, h * w),
            _ => return Err(Error::dim(op, s, &[0, 0, 0, 0])),
        };
        if self.val(ig).numel() != c || self.val(ibt).numel() != c {
            return Err(Error::dim(op, s, self.val(ig).shape()));
        }
        Ok((b, c, sp))
    }

    /// Training-mode batch normalization over `(B, spatial)` per channel.
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (ii, ig, ibt) = (self.check(input)?, self.check(gamma)?, self.check(beta)?);
        let (b, c, s) = self.bn_dims("batch_norm", ii, ig, ibt)?;
        if b < 2 {
            return Err(Error::DegenerateBatch(b));
        }
        let fwd = kernels::batch_norm_train(
            self.val(ii).data(),
            b,
            c,
            s,
            self.val(ig).data(),
            self.val(ibt).data(),
            eps,
        );
        let stats = BatchStats {
            mean: fwd.mean,
            var: fwd.var,
            count: b * s,
        };
        let shape = self.val(ii).shape().to_vec();
        let v = self.push(
            &shape,
            fwd.out,
            Op::BatchNorm {
                input: ii,
                gamma: ig,
                beta: ibt,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                dims: (b, c, s),
            },
        )?;
        Ok((v, stats))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_frozen(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (ii, ig, ibt) = (self.check(input)?, self.check(gamma)?, self.check(beta)?);
        let (b, c, s) = self.bn_dims("batch_norm_frozen", ii, ig, ibt)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::dim("batch_norm_frozen", &[c], &[mean.len(), var.len()]));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (x, g, bt) = (self.val(ii).data(), self.val(ig).data(), self.val(ibt).data());
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let o = (bi * c + ch) * s;
                for i in o..o + s {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let shape = self.val(ii).shape().to_vec();
        self.push(
            &shape,
            out,
            Op::BatchNormFrozen {
                input: ii,
                gamma: ig,
                beta: ibt,
                xhat,
                inv_std,
                dims: (b, c, s),
            },
        )
    }

    /// Multiply filter `k` of `weight[K×…]` by the scalar `scale[k]`.
    pub fn filter_scale(&mut self, weight: Var, scale: Var) -> Result<Var> {
        let (iw, is) = (self.check(weight)?, self.check(scale)?);
        let k = self.val(iw).shape()[0];
        if self.val(is).numel() != k {
            return Err(Error::dim("filter_scale", self.val(iw).shape(), self.val(is).shape()));
        }
        let per = self.val(iw).numel() / k;
        let sc = self.val(is).data();
        let data = self
            .val(iw)
            .data()
            .iter()
            .enumerate()
            .map(|(i, w)| w * sc[i / per])
            .collect();
        let shape = self.val(iw).shape().to_vec();
        self.push(&shape, data, Op::FilterScale { weight: iw, scale: is })
    }

    /// Populate `grad` on every tracked leaf with `d(loss)/d(leaf)`.
    ///
    /// Leaves that do not influence the loss receive zeros; untracked leaves
    /// keep no gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.check(loss)?;
        if self.val(il).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(il).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; il + 1];
        if self.tracked(il) {
            grads[il] = Some(vec![1.0]);
        }
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (input, gi) in self.vjp(i, &g) {
                if !self.tracked(input) {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.set_grad(Some(g))?;
            }
        }
        Ok(())
    }

    /// Numeric vector-Jacobian product of node `i` against output gradient `g`.
    fn vjp(&self, i: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let need = |j: usize| self.tracked(j);
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                res.push((a, g.to_vec()));
                res.push((b, g.to_vec()));
            }
            &Op::Sub(a, b) => {
                res.push((a, g.to_vec()));
                res.push((b, g.iter().map(|v| -v).collect()));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.val(a).data(), self.val(b).data());
                if need(a) {
                    res.push((a, g.iter().zip(bv).map(|(x, y)| x * y).collect()));
                }
                if need(b) {
                    res.push((b, g.iter().zip(av).map(|(x, y)| x * y).collect()));
                }
            }
            &Op::Div(a, b) => {
                let bv = self.val(b).data();
                if need(a) {
                    res.push((a, g.iter().zip(bv).map(|(x, y)| x / y).collect()));
                }
                if need(b) {
                    res.push((
                        b,
                        g.iter().zip(out).zip(bv).map(|((gg, o), y)| -gg * o / y).collect(),
                    ));
                }
            }
            &Op::Scale(a, c) => res.push((a, g.iter().map(|v| v * c).collect())),
            &Op::AddConst(a) => res.push((a, g.to_vec())),
            Op::MulConst(a, mask) => res.push((*a, g.iter().zip(mask).map(|(x, m)| x * m).collect())),
            &Op::MulScalar(a, s) => {
                let sv = self.val(s).data()[0];
                if need(a) {
                    res.push((a, g.iter().map(|v| v * sv).collect()));
                }
                if need(s) {
                    let d = g.iter().zip(self.val(a).data()).map(|(x, y)| x * y).sum();
                    res.push((s, vec![d]));
                }
            }
            &Op::Matmul(a, b) => {
                let (r, k) = (self.val(a).shape()[0], self.val(a).shape()[1]);
                let c = self.val(b).shape()[1];
                if need(a) {
                    // g (r×c) · bᵀ (c×k)
                    let mut ga = vec![0.0; r * k];
                    kernels::gemm(
                        r,
                        c,
                        k,
                        1.0,
                        g,
                        (c as isize, 1),
                        self.val(b).data(),
                        (1, c as isize),
                        0.0,
                        &mut ga,
                        (k as isize, 1),
                    );
                    res.push((a, ga));
                }
                if need(b) {
                    // aᵀ (k×r) · g (r×c)
                    let mut gb = vec![0.0; k * c];
                    kernels::gemm(
                        k,
                        r,
                        c,
                        1.0,
                        self.val(a).data(),
                        (1, k as isize),
                        g,
                        (c as isize, 1),
                        0.0,
                        &mut gb,
                        (c as isize, 1),
                    );
                    res.push((b, gb));
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = (self.val(a).shape()[0], self.val(a).shape()[1]);
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                res.push((a, ga));
            }
            &Op::AddRowVec(a, v) => {
                let m = self.val(v).numel();
                if need(a) {
                    res.push((a, g.to_vec()));
                }
                if need(v) {
                    res.push((v, col_sums(g, m)));
                }
            }
            &Op::SumRows(a) => {
                let rows = self.val(a).shape()[0];
                res.push((a, g.repeat(rows)));
            }
            &Op::BroadcastRows(v) => res.push((v, col_sums(g, self.val(v).numel()))),
            &Op::RowSum(a) => {
                let m = self.val(a).shape()[1];
                res.push((a, g.iter().flat_map(|&x| std::iter::repeat_n(x, m)).collect()));
            }
            &Op::BroadcastCols(a) => {
                let m = node.value.shape()[1];
                res.push((a, g.chunks(m).map(|r| r.iter().sum()).collect()));
            }
            &Op::SumAll(a) => res.push((a, vec![g[0]; self.val(a).numel()])),
            &Op::Expand(s) => res.push((s, vec![g.iter().sum()])),
            &Op::Reshape(a) => res.push((a, g.to_vec())),
            &Op::Sqrt(a) => res.push((a, g.iter().zip(out).map(|(x, o)| x / (2.0 * o)).collect())),
            &Op::Relu(a) => res.push((
                a,
                g.iter()
                    .zip(self.val(a).data())
                    .map(|(x, v)| if *v > 0.0 { *x } else { 0.0 })
                    .collect(),
            )),
            &Op::Softmax(a) => {
                let m = node.value.shape()[1];
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), dst) in g.chunks(m).zip(out.chunks(m)).zip(ga.chunks_mut(m)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for j in 0..m {
                        dst[j] = yr[j] * (gr[j] - dot);
                    }
                }
                res.push((a, ga));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let m = probs.len() / b;
                let s = g[0] / b as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * m + l] -= s;
                }
                res.push((*logits, gl));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let grads = kernels::conv2d_backward(
                    geom,
                    self.val(input).data(),
                    cols.as_deref(),
                    self.val(weight).data(),
                    g,
                    (need(input), need(weight), need(bias)),
                );
                res.extend(grads.input.map(|v| (input, v)));
                res.extend(grads.weight.map(|v| (weight, v)));
                res.extend(grads.bias.map(|v| (bias, v)));
            }
            Op::MaxPool2d { input, argmax } => {
                let mut gi = vec![0.0; self.val(*input).numel()];
                for (gv, &src) in g.iter().zip(argmax) {
                    gi[src] += gv;
                }
                res.push((*input, gi));
            }
            &Op::MeanPool { input, spatial } => {
                let inv = 1.0 / spatial as f64;
                res.push((
                    input,
                    g.iter().flat_map(|&x| std::iter::repeat_n(x * inv, spatial)).collect(),
                ));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                dims: (b, c, s),
            } => {
                let (gx, gg, gb) = kernels::batch_norm_train_backward(
                    g,
                    xhat,
                    inv_std,
                    self.val(*gamma).data(),
                    *b,
                    *c,
                    *s,
                );
                res.push((*input, gx));
                res.push((*gamma, gg));
                res.push((*beta, gb));
            }
            Op::BatchNormFrozen {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                dims: (b, c, s),
            } => {
                let gam = self.val(*gamma).data();
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; *c];
                let mut gb = vec![0.0; *c];
                for bi in 0..*b {
                    for ch in 0..*c {
                        let o = (bi * c + ch) * s;
                        for i in o..o + s {
                            gx[i] = g[i] * gam[ch] * inv_std[ch];
                            gg[ch] += g[i] * xhat[i];
                            gb[ch] += g[i];
                        }
                    }
                }
                res.push((*input, gx));
                res.push((*gamma, gg));
                res.push((*beta, gb));
            }
            &Op::FilterScale { weight, scale } => {
                let k = self.val(scale).numel();
                let per = self.val(weight).numel() / k;
                let (w, sc) = (self.val(weight).data(), self.val(scale).data());
                if need(weight) {
                    res.push((weight, g.iter().enumerate().map(|(i, x)| x * sc[i / per]).collect()));
                }
                if need(scale) {
                    let gs = (0..k)
                        .map(|f| {
                            let r = f * per..(f + 1) * per;
                            g[r.clone()].iter().zip(&w[r]).map(|(x, y)| x * y).sum()
                        })
                        .collect();
                    res.push((scale, gs));
                }
            }
        }
        res
    }

    /// Gradients of the scalar `output` with respect to `wrt`, recorded as new
    /// differentiable nodes on this tape.
    ///
    /// Variables in `wrt` that `output` does not depend on get a zero constant.
    pub fn grad_graph(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let io = self.check(output)?;
        if self.val(io).numel() != 1 {
            return Err(Error::Contract(format!(
                "grad_graph needs a scalar output, got shape {:?}",
                self.val(io).shape()
            )));
        }
        let targets: Vec<usize> = wrt.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        let mut depends = vec![false; io + 1];
        for &t in &targets {
            if t <= io {
                depends[t] = true;
            }
        }
        for i in 0..=io {
            if !depends[i] {
                depends[i] = self.nodes[i].op.inputs().iter().any(|&j| depends[j]);
            }
        }
        let mut grads: Vec<Option<Var>> = vec![None; io + 1];
        if depends[io] {
            grads[io] = Some(self.constant(&Tensor::ones(&[1])));
        }
        for i in (0..=io).rev() {
            if !depends[i] || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            for (input, gi) in self.vjp_graph(i, g, &depends)? {
                grads[input] = Some(match grads[input] {
                    Some(acc) => self.add(acc, gi)?,
                    None => gi,
                });
            }
        }
        targets
            .iter()
            .map(|&t| match grads.get(t).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let z = Tensor::zeros(self.val(t).shape());
                    Ok(self.constant(&z))
                }
            })
            .collect()
    }

    /// Differentiable vector-Jacobian product: emits tape nodes computing the
    /// gradient of each needed input of node `i` given the output gradient `g`.
    fn vjp_graph(&mut self, i: usize, g: Var, depends: &[bool]) -> Result<Vec<(usize, Var)>> {
        let me = Var { tape: self.id, idx: i };
        let id = self.id;
        let v = move |idx: usize| Var { tape: id, idx };
        let need = |j: usize| depends[j];
        let op = self.nodes[i].op.clone();
        let mut res = Vec::new();
        match op {
            Op::Add(a, b) => {
                if need(a) {
                    res.push((a, g));
                }
                if need(b) {
                    res.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if need(a) {
                    res.push((a, g));
                }
                if need(b) {
                    res.push((b, self.scale(g, -1.0)?));
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    res.push((a, self.mul(g, v(b))?));
                }
                if need(b) {
                    res.push((b, self.mul(g, v(a))?));
                }
            }
            Op::Div(a, b) => {
                if need(a) {
                    res.push((a, self.div(g, v(b))?));
                }
                if need(b) {
                    let go = self.mul(g, me)?;
                    let q = self.div(go, v(b))?;
                    res.push((b, self.scale(q, -1.0)?));
                }
            }
            Op::Scale(a, c) => res.push((a, self.scale(g, c)?)),
            Op::AddConst(a) => res.push((a, g)),
            Op::Reshape(a) => {
                let shape = self.val(a).shape().to_vec();
                res.push((a, self.reshape(g, &shape)?));
            }
            Op::MulConst(a, mask) => res.push((a, self.mul_const(g, mask)?)),
            Op::MulScalar(a, s) => {
                if need(a) {
                    res.push((a, self.mul_scalar(g, v(s))?));
                }
                if need(s) {
                    let p = self.mul(g, v(a))?;
                    res.push((s, self.sum_all(p)?));
                }
            }
            Op::Matmul(a, b) => {
                if need(a) {
                    let bt = self.transpose(v(b))?;
                    res.push((a, self.matmul(g, bt)?));
                }
                if need(b) {
                    let at = self.transpose(v(a))?;
                    res.push((b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(a) => res.push((a, self.transpose(g)?)),
            Op::AddRowVec(a, b) => {
                if need(a) {
                    res.push((a, g));
                }
                if need(b) {
                    let s = self.sum_rows(g)?;
                    let shape = self.val(b).shape().to_vec();
                    res.push((b, self.reshape(s, &shape)?));
                }
            }
            Op::SumRows(a) => {
                let rows = self.val(a).shape()[0];
                res.push((a, self.broadcast_rows(g, rows)?));
            }
            Op::BroadcastRows(a) => {
                let s = self.sum_rows(g)?;
                let shape = self.val(a).shape().to_vec();
                res.push((a, self.reshape(s, &shape)?));
            }
            Op::RowSum(a) => {
                let m = self.val(a).shape()[1];
                res.push((a, self.broadcast_cols(g, m)?));
            }
            Op::BroadcastCols(a) => res.push((a, self.row_sum(g)?)),
            Op::SumAll(a) => {
                let shape = self.val(a).shape().to_vec();
                res.push((a, self.expand(g, &shape)?));
            }
            Op::Expand(a) => res.push((a, self.sum_all(g)?)),
            Op::Sqrt(a) => {
                let half = self.scale(g, 0.5)?;
                res.push((a, self.div(half, me)?));
            }
            Op::Relu(a) => {
                let mask = self.val(a).data().iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
                res.push((a, self.mul_const(g, mask)?));
            }
            Op::Softmax(a) => {
                // y ⊙ (g − rowsum(g ⊙ y))
                let m = self.val(i).shape()[1];
                let gy = self.mul(g, me)?;
                let dot = self.row_sum(gy)?;
                let dotb = self.broadcast_cols(dot, m)?;
                let centered = self.sub(g, dotb)?;
                res.push((a, self.mul(me, centered)?));
            }
            Op::SoftmaxCrossEntropy { logits, labels, .. } => {
                let (b, m) = self.as_matrix("softmax_cross_entropy", logits)?;
                let p = self.softmax(v(logits))?;
                let mut onehot = Tensor::zeros(&[b, m]);
                for (r, &l) in labels.iter().enumerate() {
                    onehot.data_mut()[r * m + l] = 1.0;
                }
                let y = self.constant(&onehot);
                let diff = self.sub(p, y)?;
                let mean = self.scale(diff, 1.0 / b as f64)?;
                res.push((logits, self.mul_scalar(mean, g)?));
            }
            Op::Leaf => {}
            other => {
                return Err(Error::Contract(format!(
                    "{} does not support differentiable backward",
                    other.name()
                )))
            }
        }
        Ok(res)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn col_sums(g: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for row in g.chunks(m) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    out
}

pub(crate) fn softmax_rows(x: &[f64], m: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(m) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    out
}
