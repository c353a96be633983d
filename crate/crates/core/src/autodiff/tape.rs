use rand::Rng;

use super::kernels;
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

/// Index arithmetic for a 1-D convolution over time.
///
/// Output row `p` reads input rows `p * stride + j * dilation - left_pad` for
/// every tap `j`; indices that fall outside the input read zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub dilation: usize,
    pub stride: usize,
    pub left_pad: usize,
}

impl ConvGeometry {
    /// Stride-1 convolution padded on the left so output `t` sees only inputs `<= t`.
    pub fn causal(kernel: usize, dilation: usize) -> Self {
        assert!(dilation >= 1, "dilation must be at least 1");
        Self {
            dilation,
            stride: 1,
            left_pad: (kernel - 1) * dilation,
        }
    }

    /// Non-overlapping windows of `k` rows, trailing remainder dropped.
    pub fn windowed(k: usize) -> Self {
        Self {
            dilation: 1,
            stride: k,
            left_pad: 0,
        }
    }

    pub fn output_len(&self, input_len: usize, kernel: usize) -> usize {
        let span = (kernel - 1) * self.dilation + 1;
        let padded = input_len + self.left_pad;
        if padded < span {
            0
        } else {
            (padded - span) / self.stride + 1
        }
    }
}

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddBias {
        x: Var,
        bias: Var,
    },
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Conv1d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    MaskedSoftmax {
        x: Var,
    },
    Log {
        x: Var,
        floor: F,
    },
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    AddPositional {
        x: Var,
        table: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<F>,
        inv_std: Vec<F>,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias { .. } => "add_bias",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Conv1d { .. } => "conv1d",
            Op::Relu(..) => "relu",
            Op::Softmax { .. } => "softmax",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::Log { .. } => "log",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::ConcatCols(..) => "concat_cols",
            Op::MaxPool { .. } => "max_pool",
            Op::AvgPool { .. } => "avg_pool",
            Op::AddPositional { .. } => "add_positional",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::SliceRows { .. } => "slice_rows",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::MatMulNt(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Softmax { x, .. }
            | Op::MaskedSoftmax { x }
            | Op::Log { x, .. }
            | Op::MaxPool { x, .. }
            | Op::AvgPool { x, .. }
            | Op::Dropout { x, .. }
            | Op::SliceRows { x, .. } => vec![*x],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::AddPositional { x, table } => vec![*x, *table],
            Op::Conv1d { x, weight, bias, .. } => {
                let mut v = vec![*x, *weight];
                v.extend(bias);
                v
            }
            Op::ConcatCols(parts) => parts.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Errors raised by the reverse sweep.
#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AutodiffError {
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite {what} at `{op}` (record {index})")]
    NonFinite {
        op: &'static str,
        index: usize,
        what: &'static str,
    },
}

/// Gradients of one reverse sweep, indexed by the leaf they belong to.
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of a trainable leaf. `None` for values that were not
    /// trainable leaves; zeros for trainable leaves the loss does not reach.
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Record of primitive applications in evaluation order.
///
/// Every value produced on the tape is addressed by a [`Var`]. Inputs always
/// carry smaller ids than their outputs, so a single reverse pass over the
/// records is a valid topological sweep.
#[derive(Clone, Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<F> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].op.name()
    }

    pub fn inputs(&self, var: Var) -> Vec<Var> {
        self.nodes[var.0].op.inputs()
    }

    /// Records a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<F>) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Records a non-trainable leaf.
    pub fn constant(&mut self, mut tensor: Tensor<F>) -> Var {
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs_grad)
    }

    fn data(&self, var: Var) -> &[F] {
        self.nodes[var.0].value.data()
    }

    fn matrix_dims(&self, var: Var) -> (usize, usize) {
        let t = &self.nodes[var.0].value;
        (t.rows(), t.cols())
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data);
        self.derived(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data);
        self.derived(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data);
        self.derived(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let data = self.data(x).iter().map(|&v| v * c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data);
        self.derived(value, Op::Scale(x, c))
    }

    /// `x[t, :] + bias` for every row of a matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (_, cols) = self.matrix_dims(x);
        assert_eq!(self.shape(bias), [cols], "add_bias: bias length mismatch");
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data);
        self.derived(value, Op::AddBias { x, bias })
    }

    /// `[n × k] · [k × m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.matrix_dims(a);
        let (k2, m) = self.matrix_dims(b);
        assert_eq!(k, k2, "matmul: inner dimensions {k} and {k2} differ");
        let mut out = vec![F::zero(); n * m];
        kernels::matmul_acc(self.data(a), self.data(b), &mut out, n, k, m);
        self.derived(Tensor::new([n, m], out), Op::MatMul(a, b))
    }

    /// `[n × k] · [m × k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.matrix_dims(a);
        let (m, k2) = self.matrix_dims(b);
        assert_eq!(k, k2, "matmul_nt: inner dimensions {k} and {k2} differ");
        let mut out = vec![F::zero(); n * m];
        kernels::matmul_nt_acc(self.data(a), self.data(b), &mut out, n, k, m);
        self.derived(Tensor::new([n, m], out), Op::MatMulNt(a, b))
    }

    /// 1-D convolution over the rows of `x: [T × D_in]` with
    /// `weight: [k_w × D_in × D_out]` and optional `bias: [D_out]`.
    pub fn conv1d(&mut self, x: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Var {
        assert!(geom.dilation >= 1, "conv1d: dilation must be at least 1");
        assert!(geom.stride >= 1, "conv1d: stride must be at least 1");
        let (t, d_in) = self.matrix_dims(x);
        let wshape = self.shape(weight).to_vec();
        assert_eq!(wshape.len(), 3, "conv1d: weight must be [k_w, D_in, D_out]");
        let (kw, wd_in, d_out) = (wshape[0], wshape[1], wshape[2]);
        assert_eq!(d_in, wd_in, "conv1d: input has {d_in} features, kernel expects {wd_in}");
        if let Some(b) = bias {
            assert_eq!(self.shape(b), [d_out], "conv1d: bias length mismatch");
        }
        let out_len = geom.output_len(t, kw);
        assert!(out_len >= 1, "conv1d: input of length {t} yields no output");
        let mut out = vec![F::zero(); out_len * d_out];
        if let Some(b) = bias {
            let bd = self.data(b);
            for row in out.chunks_exact_mut(d_out) {
                row.copy_from_slice(bd);
            }
        }
        kernels::conv1d_forward(
            self.data(x),
            self.data(weight),
            &mut out,
            t,
            d_in,
            d_out,
            kw,
            geom,
        );
        self.derived(
            Tensor::new([out_len, d_out], out),
            Op::Conv1d {
                x,
                weight,
                bias,
                geom,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self
            .data(x)
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data);
        self.derived(value, Op::Relu(x))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(axis < shape.len(), "softmax: axis {axis} out of range for {shape:?}");
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut m = F::neg_infinity();
                for j in 0..len {
                    m = m.max(src[idx(j)]);
                }
                let mut s = F::zero();
                for j in 0..len {
                    let e = (src[idx(j)] - m).exp();
                    out[idx(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    out[idx(j)] /= s;
                }
            }
        }
        self.derived(Tensor::new(shape, out), Op::Softmax { x, axis })
    }

    /// Row softmax of a matrix where `mask[r * cols + c] == false` excludes
    /// the entry. Rows with no admitted entry produce all zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Var {
        let (rows, cols) = self.matrix_dims(x);
        assert_eq!(mask.len(), rows * cols, "masked_softmax: mask size mismatch");
        let src = self.data(x);
        let mut out = vec![F::zero(); rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let keep = &mask[r * cols..(r + 1) * cols];
            let mut m = F::neg_infinity();
            for (v, &k) in row.iter().zip(keep) {
                if k {
                    m = m.max(*v);
                }
            }
            if m == F::neg_infinity() {
                continue;
            }
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mut s = F::zero();
            for ((d, v), &k) in dst.iter_mut().zip(row).zip(keep) {
                if k {
                    *d = (*v - m).exp();
                    s += *d;
                }
            }
            for d in dst.iter_mut() {
                *d /= s;
            }
        }
        self.derived(Tensor::new([rows, cols], out), Op::MaskedSoftmax { x })
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log(&mut self, x: Var, floor: F) -> Var {
        let data = self.data(x).iter().map(|&v| v.max(floor).ln()).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data);
        self.derived(value, Op::Log { x, floor })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: F = self.data(x).iter().copied().sum();
        self.derived(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s: F = d.iter().copied().sum();
        let n = F::of(d.len() as f64);
        self.derived(Tensor::scalar(s / n), Op::Mean(x))
    }

    /// Concatenates matrices with equal row counts along the feature axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: nothing to concatenate");
        let rows = self.matrix_dims(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.matrix_dims(p);
                assert_eq!(r, rows, "concat_cols: row counts differ");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        self.derived(Tensor::new([rows, total], out), Op::ConcatCols(parts.to_vec()))
    }

    /// Max over non-overlapping windows of `k` rows. Ties pick the earliest row.
    pub fn max_pool(&mut self, x: Var, k: usize) -> Var {
        let (t, d) = self.matrix_dims(x);
        assert!(k >= 1 && t >= k, "max_pool: need at least {k} rows, got {t}");
        let n = t / k;
        let src = self.data(x);
        let mut out = vec![F::zero(); n * d];
        let mut argmax = vec![0usize; n * d];
        for p in 0..n {
            for c in 0..d {
                let mut best = p * k;
                for r in p * k + 1..(p + 1) * k {
                    if src[r * d + c] > src[best * d + c] {
                        best = r;
                    }
                }
                out[p * d + c] = src[best * d + c];
                argmax[p * d + c] = best;
            }
        }
        self.derived(Tensor::new([n, d], out), Op::MaxPool { x, argmax })
    }

    /// Mean over non-overlapping windows of `k` rows.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let (t, d) = self.matrix_dims(x);
        assert!(k >= 1 && t >= k, "avg_pool: need at least {k} rows, got {t}");
        let n = t / k;
        let src = self.data(x);
        let inv = F::one() / F::of(k as f64);
        let mut out = vec![F::zero(); n * d];
        for p in 0..n {
            let dst = &mut out[p * d..(p + 1) * d];
            for r in p * k..(p + 1) * k {
                for (o, &v) in dst.iter_mut().zip(&src[r * d..(r + 1) * d]) {
                    *o += v;
                }
            }
            for o in dst.iter_mut() {
                *o *= inv;
            }
        }
        self.derived(Tensor::new([n, d], out), Op::AvgPool { x, k })
    }

    /// `x + table[0..T]` for `x: [T × D]`, `table: [T_max × D]`.
    pub fn add_positional(&mut self, x: Var, table: Var) -> Var {
        let (t, d) = self.matrix_dims(x);
        let (cap, d2) = self.matrix_dims(table);
        assert_eq!(d, d2, "add_positional: feature widths differ");
        assert!(t <= cap, "add_positional: {t} rows exceed table capacity {cap}");
        let data = self
            .data(x)
            .iter()
            .zip(&self.data(table)[..t * d])
            .map(|(&a, &b)| a + b)
            .collect();
        self.derived(Tensor::new([t, d], data), Op::AddPositional { x, table })
    }

    /// Per-row layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let (rows, cols) = self.matrix_dims(x);
        assert_eq!(self.shape(gamma), [cols], "layer_norm: scale length mismatch");
        assert_eq!(self.shape(beta), [cols], "layer_norm: shift length mismatch");
        let src = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let n = F::of(cols as f64);
        let mut normalized = vec![F::zero(); rows * cols];
        let mut inv_std = vec![F::zero(); rows];
        let mut out = vec![F::zero(); rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mu = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / n;
            let rstd = F::one() / (var + eps).sqrt();
            inv_std[r] = rstd;
            for c in 0..cols {
                let xh = (row[c] - mu) * rstd;
                normalized[r * cols + c] = xh;
                out[r * cols + c] = xh * g[c] + b[c];
            }
        }
        self.derived(
            Tensor::new([rows, cols], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        )
    }

    /// Inverted dropout: each element is zeroed with probability `rate` and
    /// survivors are scaled by `1 / (1 - rate)`. A zero rate is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        assert!((0.0..1.0).contains(&rate), "dropout rate {rate} outside [0, 1)");
        if rate == 0.0 {
            return x;
        }
        let keep = F::of(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..self.data(x).len())
            .map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data);
        self.derived(value, Op::Dropout { x, mask })
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice_rows(start, end);
        self.derived(value, Op::SliceRows { x, start })
    }

    /// Reverse sweep from a scalar `loss`. Trainable leaves also get their
    /// gradient installed in the tensor's grad slot.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>, AutodiffError> {
        let loss_shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_shape));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = vec![None; n];
        grads[loss.0] = Some(vec![F::one()]);

        if let Some(id) = (0..=loss.0).find(|&i| !self.nodes[i].value.is_finite()) {
            return Err(AutodiffError::NonFinite {
                op: self.nodes[id].op.name(),
                index: id,
                what: "value",
            });
        }

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(g) = grads[id].take() else {
                continue;
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(AutodiffError::NonFinite {
                    op: node.op.name(),
                    index: id,
                    what: "gradient",
                });
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }

        let mut out = Vec::with_capacity(n);
        for (id, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let g = grads[id].take().unwrap_or_else(|| vec![F::zero(); node.value.numel()]);
                node.value.set_grad(g.clone());
                out.push(Some(Tensor::new(node.value.shape().to_vec(), g)));
            } else {
                out.push(None);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, id: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if self.wants(v) {
                        accumulate(grads, v, g.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = g.iter().zip(self.data(*b)).map(|(&gg, &bb)| gg * bb).collect();
                    accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = g.iter().zip(self.data(*a)).map(|(&gg, &aa)| gg * aa).collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::Scale(x, c) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.iter().map(|&v| v * *c).collect());
                }
            }
            Op::AddBias { x, bias } => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if self.wants(*bias) {
                    let cols = self.shape(*bias)[0];
                    let mut db = vec![F::zero(); cols];
                    for row in g.chunks_exact(cols) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.matrix_dims(*a);
                let m = self.matrix_dims(*b).1;
                if self.wants(*a) {
                    let mut da = vec![F::zero(); n * k];
                    kernels::matmul_nt_acc(g, self.data(*b), &mut da, n, m, k);
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![F::zero(); k * m];
                    kernels::matmul_tn_acc(self.data(*a), g, &mut db, n, k, m);
                    accumulate(grads, *b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (n, k) = self.matrix_dims(*a);
                let m = self.matrix_dims(*b).0;
                if self.wants(*a) {
                    let mut da = vec![F::zero(); n * k];
                    kernels::matmul_acc(g, self.data(*b), &mut da, n, m, k);
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![F::zero(); m * k];
                    kernels::matmul_tn_acc(g, self.data(*a), &mut db, n, m, k);
                    accumulate(grads, *b, db);
                }
            }
            Op::Conv1d {
                x,
                weight,
                bias,
                geom,
            } => {
                let (t, d_in) = self.matrix_dims(*x);
                let ws = self.shape(*weight);
                let (kw, d_out) = (ws[0], ws[2]);
                let dx = self.wants(*x).then(|| vec![F::zero(); t * d_in]);
                let dw = self.wants(*weight).then(|| vec![F::zero(); kw * d_in * d_out]);
                let (dx, dw) = kernels::conv1d_backward(
                    self.data(*x),
                    self.data(*weight),
                    g,
                    dx,
                    dw,
                    t,
                    d_in,
                    d_out,
                    kw,
                    *geom,
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *weight, dw);
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let mut db = vec![F::zero(); d_out];
                        for row in g.chunks_exact(d_out) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(grads, *b, db);
                    }
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let d = g
                        .iter()
                        .zip(self.data(*x))
                        .map(|(&gg, &v)| if v > F::zero() { gg } else { F::zero() })
                        .collect();
                    accumulate(grads, *x, d);
                }
            }
            Op::Softmax { x, axis } => {
                if self.wants(*x) {
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                    let y = node.value.data();
                    let mut d = vec![F::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: F = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                d[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::MaskedSoftmax { x } => {
                if self.wants(*x) {
                    let cols = node.value.cols();
                    let y = node.value.data();
                    let mut d = vec![F::zero(); y.len()];
                    for ((dr, yr), gr) in d
                        .chunks_exact_mut(cols)
                        .zip(y.chunks_exact(cols))
                        .zip(g.chunks_exact(cols))
                    {
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((dd, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                            *dd = yy * (gg - dot);
                        }
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::Log { x, floor } => {
                if self.wants(*x) {
                    let d = g
                        .iter()
                        .zip(self.data(*x))
                        .map(|(&gg, &v)| if v > *floor { gg / v } else { F::zero() })
                        .collect();
                    accumulate(grads, *x, d);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    accumulate(grads, *x, vec![g[0]; self.data(*x).len()]);
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let len = self.data(*x).len();
                    let v = g[0] / F::of(len as f64);
                    accumulate(grads, *x, vec![v; len]);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.matrix_dims(p).1;
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(grads, p, d);
                    }
                    offset += w;
                }
            }
            Op::MaxPool { x, argmax, .. } => {
                if self.wants(*x) {
                    let d_cols = node.value.cols();
                    let mut d = vec![F::zero(); self.data(*x).len()];
                    for (i, (&src_row, &gg)) in argmax.iter().zip(g).enumerate() {
                        d[src_row * d_cols + i % d_cols] += gg;
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::AvgPool { x, k } => {
                if self.wants(*x) {
                    let (n, cols) = (node.value.rows(), node.value.cols());
                    let inv = F::one() / F::of(*k as f64);
                    let mut d = vec![F::zero(); self.data(*x).len()];
                    for p in 0..n {
                        for r in p * k..(p + 1) * k {
                            for c in 0..cols {
                                d[r * cols + c] = g[p * cols + c] * inv;
                            }
                        }
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::AddPositional { x, table } => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if self.wants(*table) {
                    let mut d = vec![F::zero(); self.data(*table).len()];
                    d[..g.len()].copy_from_slice(g);
                    accumulate(grads, *table, d);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let cols = node.value.cols();
                let n = F::of(cols as f64);
                let gam = self.data(*gamma);
                if self.wants(*x) {
                    let mut d = vec![F::zero(); g.len()];
                    for (r, &rstd) in inv_std.iter().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let xh = &normalized[r * cols..(r + 1) * cols];
                        let mut mean_dxh = F::zero();
                        let mut mean_dxh_xh = F::zero();
                        for c in 0..cols {
                            let dxh = gr[c] * gam[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[c];
                        }
                        mean_dxh /= n;
                        mean_dxh_xh /= n;
                        for c in 0..cols {
                            let dxh = gr[c] * gam[c];
                            d[r * cols + c] = rstd * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
                        }
                    }
                    accumulate(grads, *x, d);
                }
                if self.wants(*gamma) {
                    let mut d = vec![F::zero(); cols];
                    for (gr, xr) in g.chunks_exact(cols).zip(normalized.chunks_exact(cols)) {
                        for c in 0..cols {
                            d[c] += gr[c] * xr[c];
                        }
                    }
                    accumulate(grads, *gamma, d);
                }
                if self.wants(*beta) {
                    let mut d = vec![F::zero(); cols];
                    for gr in g.chunks_exact(cols) {
                        for c in 0..cols {
                            d[c] += gr[c];
                        }
                    }
                    accumulate(grads, *beta, d);
                }
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect());
                }
            }
            Op::SliceRows { x, start } => {
                if self.wants(*x) {
                    let cols = node.value.cols();
                    let mut d = vec![F::zero(); self.data(*x).len()];
                    d[start * cols..start * cols + g.len()].copy_from_slice(g);
                    accumulate(grads, *x, d);
                }
            }
        }
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, d: Vec<F>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(d) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
