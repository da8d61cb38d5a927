//! Dense row-major `f64` tensors and a tape for reverse-mode differentiation.
//!
//! Operations are recorded on a [`Tape`] as they execute. Each recorded node
//! keeps its output value plus whatever the local backward rule needs, and
//! [`Tape::backward`] walks the nodes once in reverse recording order.
//! Transformer-specific kernels (rotary encoding, causal attention) are fused
//! tape operations with hand-written backward rules rather than compositions
//! of scalar primitives.

use std::borrow::Cow;

use crate::error::{contract, dim, Error, Result};

/// Dense row-major tensor of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(dim(format!("shape {shape:?} has a zero extent")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        check_finite(&data, "tensor data")?;
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Builds a matrix from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim("ragged rows"));
        }
        Tensor::matrix(rows.len(), cols, rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all extents but the last.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols().max(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Overwrites the data in place; the caller keeps the shape and guarantees finiteness.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(dim(format!("transpose needs a matrix, got {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Keeps the listed columns of a matrix, in the given order.
    pub fn select_cols(&self, keep: &[usize]) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Vec::with_capacity(r * keep.len());
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            out.extend(keep.iter().map(|&j| row[j]));
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = keep.len();
        Tensor { shape, data: out }
    }

    /// Keeps the listed rows of a matrix, in the given order.
    pub fn select_rows(&self, keep: &[usize]) -> Tensor {
        let c = self.cols();
        let mut out = Vec::with_capacity(keep.len() * c);
        for &i in keep {
            out.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Tensor {
            shape: vec![keep.len(), c],
            data: out,
        }
    }

    /// Entries of a vector at the listed positions.
    pub fn select(&self, keep: &[usize]) -> Tensor {
        Tensor {
            shape: vec![keep.len()],
            data: keep.iter().map(|&i| self.data[i]).collect(),
        }
    }
}

pub(crate) fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// `c (+)= a · b` for row-/column-strided matrices, `a: m×k`, `b: k×n`, `c: m×n` row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every access made with these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    softmax_into(row, &mut out);
    out
}

/// `ln Σ exp(row)`, computed with max subtraction.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Floor applied to `q` inside the logarithm of a KL term.
pub const KL_Q_FLOOR: f64 = 1e-12;

fn validate_distribution(p: &[f64], name: &str) -> Result<()> {
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(contract(format!("{name} has negative or non-finite entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(contract(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// `Σ p ln(p/q)` in nats; zero-mass `p` terms contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(dim(format!(
            "kl_divergence lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    validate_distribution(p, "p")?;
    validate_distribution(q, "q")?;
    Ok(kl_unchecked(p, q))
}

pub(crate) fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(KL_Q_FLOOR)).ln())
        .sum()
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(contract(format!("step h must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = x.data[i];
        probe.data[i] = orig + h;
        let up = f(&probe)?;
        probe.data[i] = orig - h;
        let down = f(&probe)?;
        probe.data[i] = orig;
        *g = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape.clone(), grad)
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Contiguous sequences packed row-wise into one matrix: `(row offset, length)` per sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLayout {
    spans: Vec<(usize, usize)>,
}

impl SeqLayout {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut off = 0;
        let spans = lengths
            .iter()
            .map(|&l| {
                let s = (off, l);
                off += l;
                s
            })
            .collect();
        SeqLayout { spans }
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn total_rows(&self) -> usize {
        self.spans.last().map_or(0, |&(o, l)| o + l)
    }

    /// Row index of the last position of every sequence.
    pub fn last_rows(&self) -> Vec<usize> {
        self.spans.iter().map(|&(o, l)| o + l - 1).collect()
    }
}

/// Geometry of a multi-head projection: `n_heads` blocks of `d_k` columns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadGeometry {
    pub n_heads: usize,
    pub d_k: usize,
}

/// Pre-softmax scaling of one head's attention logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadScale {
    pub head: usize,
    pub epsilon: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Silu(Var),
    Sum(Var),
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Rope {
        x: Var,
        cos_sin: Vec<(f64, f64)>,
        geom: HeadGeometry,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: SeqLayout,
        geom: HeadGeometry,
        scale: Option<HeadScale>,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    KlDiv(Var, Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Records operations for reverse-mode differentiation.
///
/// Leaves may borrow tensors (model weights) for the lifetime of the tape.
/// Gradients accumulate across calls to [`Tape::backward`] until
/// [`Tape::zero_grad`] is called.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Cow::Owned(t), rg, op))
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(t), requires_grad, Op::Leaf)
    }

    /// Borrowed leaf; the tensor is not copied.
    pub fn leaf_ref(&mut self, t: &'a Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(t), requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn mat_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(dim(format!("{what} expects a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(dim(format!(
                "matmul of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
            false,
        );
        self.record(vec![m, n], out, &[a, b], Op::MatMul(a, b))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul_bt")?;
        let (n, k2) = self.mat_dims(b, "matmul_bt")?;
        if k != k2 {
            return Err(dim(format!(
                "matmul_bt of {:?} and transposed {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (1, k as isize),
            &mut out,
            false,
        );
        self.record(vec![m, n], out, &[a, b], Op::MatMulBt(a, b))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.record(shape, out, &[a, b], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.shape(b) != [c] {
            return Err(dim(format!(
                "bias {:?} for rows of width {c}",
                self.shape(b)
            )));
        }
        let bias = self.value(b).data();
        let out = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(bias).map(|(&v, &bb)| v + bb))
            .collect();
        let shape = self.shape(x).to_vec();
        self.record(shape, out, &[x, b], Op::AddBias(x, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.record(shape, out, &[x], Op::Scale(x, c))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        self.record(shape, out, &[x], Op::Exp(x))
    }

    /// Elementwise `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| v * sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.record(shape, out, &[x], Op::Silu(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.record(vec![1], vec![s], &[x], Op::Sum(x))
    }

    /// `x / sqrt(mean(x²) + eps) ⊙ w` along the last dimension.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).cols();
        if self.shape(w) != [c] {
            return Err(dim(format!(
                "rms_norm weight {:?} for last extent {c}",
                self.shape(w)
            )));
        }
        if eps.is_nan() || eps < 0.0 {
            return Err(contract(format!("rms_norm eps must be nonnegative, got {eps}")));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut inv_rms = Vec::with_capacity(xv.len() / c);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(c) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(wv).map(|(&v, &ww)| v * r * ww));
        }
        let shape = self.shape(x).to_vec();
        self.record(shape, out, &[x, w], Op::RmsNorm { x, w, inv_rms })
    }

    pub fn softmax_last_dim(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).cols();
        let mut out = vec![0.0; self.value(x).len()];
        for (row, o) in self.value(x).data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_into(row, o);
        }
        let shape = self.shape(x).to_vec();
        self.record(shape, out, &[x], Op::Softmax(x))
    }

    pub fn log_softmax_last_dim(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).cols();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).data().chunks(c) {
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|&v| v - lse));
        }
        let shape = self.shape(x).to_vec();
        self.record(shape, out, &[x], Op::LogSoftmax(x))
    }

    /// Rows of `table` at `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.mat_dims(table, "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!("row {bad} of a {v}-row table")));
        }
        if ids.is_empty() {
            return Err(contract("gather_rows with no ids"));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        self.record(
            vec![ids.len(), d],
            out,
            &[table],
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Rotary position encoding applied independently to each head's `d_k` slice.
    /// Positions restart at zero for every sequence in `layout`.
    pub fn rope(&mut self, x: Var, layout: &SeqLayout, geom: HeadGeometry, base: f64) -> Result<Var> {
        let (n, c) = self.mat_dims(x, "rope")?;
        check_heads(c, geom, n, layout, "rope")?;
        if geom.d_k % 2 != 0 {
            return Err(contract(format!("rotary encoding needs an even d_k, got {}", geom.d_k)));
        }
        let half = geom.d_k / 2;
        let mut cos_sin = Vec::with_capacity(n * half);
        for &(_, len) in layout.spans() {
            for pos in 0..len {
                for i in 0..half {
                    let theta = base.powf(-2.0 * i as f64 / geom.d_k as f64);
                    let a = pos as f64 * theta;
                    cos_sin.push((a.cos(), a.sin()));
                }
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for r in 0..n {
            let cs = &cos_sin[r * half..(r + 1) * half];
            for h in 0..geom.n_heads {
                let base_col = r * c + h * geom.d_k;
                for (i, &(co, si)) in cs.iter().enumerate() {
                    let x1 = xv[base_col + i];
                    let x2 = xv[base_col + i + half];
                    out[base_col + i] = x1 * co - x2 * si;
                    out[base_col + i + half] = x1 * si + x2 * co;
                }
            }
        }
        self.record(vec![n, c], out, &[x], Op::Rope { x, cos_sin, geom })
    }

    /// Causal multi-head attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `N × (n_heads·d_k)`; position `t` of a sequence attends
    /// to positions `0..=t` of the same sequence only. When `scale` is given,
    /// that head's logits `q·k/√d_k` are multiplied by `scale.epsilon` before
    /// the softmax.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: &SeqLayout,
        geom: HeadGeometry,
        scale: Option<HeadScale>,
    ) -> Result<Var> {
        let (n, c) = self.mat_dims(q, "attention")?;
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        check_heads(c, geom, n, layout, "attention")?;
        if let Some(s) = scale {
            if s.head >= geom.n_heads {
                return Err(Error::Index(format!(
                    "head {} of {}",
                    s.head, geom.n_heads
                )));
            }
        }
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let dk = geom.d_k;
        let inv_sqrt = 1.0 / (dk as f64).sqrt();
        let mut out = vec![0.0; n * c];
        let mut probs = Vec::new();
        let mut logits = Vec::new();
        for &(off, len) in layout.spans() {
            for h in 0..geom.n_heads {
                let eps = scale.filter(|s| s.head == h).map(|s| s.epsilon);
                let col = h * dk;
                for t in 0..len {
                    let qrow = &qv[(off + t) * c + col..(off + t) * c + col + dk];
                    logits.clear();
                    for j in 0..=t {
                        let krow = &kv[(off + j) * c + col..(off + j) * c + col + dk];
                        let mut s = dot(qrow, krow) * inv_sqrt;
                        if let Some(e) = eps {
                            s *= e;
                        }
                        logits.push(s);
                    }
                    let start = probs.len();
                    probs.resize(start + t + 1, 0.0);
                    softmax_into(&logits, &mut probs[start..]);
                    let orow = &mut out[(off + t) * c + col..(off + t) * c + col + dk];
                    for (j, &p) in probs[start..].iter().enumerate() {
                        let vrow = &vv[(off + j) * c + col..(off + j) * c + col + dk];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        self.record(
            vec![n, c],
            out,
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                layout: layout.clone(),
                geom,
                scale,
                probs,
            },
        )
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, vsz) = self.mat_dims(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(dim(format!("{} targets for {n} logit rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vsz) {
            return Err(Error::Index(format!("target {bad} with {vsz} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * vsz];
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &lv[i * vsz..(i + 1) * vsz];
            total += log_sum_exp(row) - row[t];
            softmax_into(row, &mut probs[i * vsz..(i + 1) * vsz]);
        }
        self.record(
            vec![1],
            vec![total / n as f64],
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Differentiable `Σ p ln(p/q)` between two probability vectors.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape(p, q, "kl_div")?;
        let v = kl_divergence(self.value(p).data(), self.value(q).data())?;
        self.record(vec![1], vec![v], &[p, q], Op::KlDiv(p, q))
    }

    /// Propagates gradients from a scalar `loss` to every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.grads[loss.0], &[1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            for (v, gv) in self.input_grads(i, &g) {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut self.grads[v.0], &gv);
                }
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Local backward rule of node `i` given its output gradient `g`.
    fn input_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let mut out: Vec<(Var, Vec<f64>)> = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = dims2(self.value(a));
                let n = self.value(b).cols();
                if self.wants(a) {
                    let mut ga = vec![0.0; m * k];
                    // G (m×n) · Bᵀ (n×k)
                    gemm(m, n, k, g, (n as isize, 1), self.value(b).data(), (1, n as isize), &mut ga, false);
                    out.push((a, ga));
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; k * n];
                    // Aᵀ (k×m) · G (m×n)
                    gemm(k, m, n, self.value(a).data(), (1, k as isize), g, (n as isize, 1), &mut gb, false);
                    out.push((b, gb));
                }
            }
            &Op::MatMulBt(a, b) => {
                let (m, k) = dims2(self.value(a));
                let n = self.value(b).rows();
                if self.wants(a) {
                    let mut ga = vec![0.0; m * k];
                    // G (m×n) · B (n×k)
                    gemm(m, n, k, g, (n as isize, 1), self.value(b).data(), (k as isize, 1), &mut ga, false);
                    out.push((a, ga));
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; n * k];
                    // Gᵀ (n×m) · A (m×k)
                    gemm(n, m, k, g, (1, n as isize), self.value(a).data(), (k as isize, 1), &mut gb, false);
                    out.push((b, gb));
                }
            }
            &Op::Add(a, b) => {
                out.push((a, g.to_vec()));
                out.push((b, g.to_vec()));
            }
            &Op::Sub(a, b) => {
                out.push((a, g.to_vec()));
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                out.push((b, neg));
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let ga: Vec<f64> = g.iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
                    out.push((a, ga));
                }
                if self.wants(b) {
                    let gb: Vec<f64> = g.iter().zip(self.value(a).data()).map(|(x, y)| x * y).collect();
                    out.push((b, gb));
                }
            }
            &Op::AddBias(x, b) => {
                out.push((x, g.to_vec()));
                if self.wants(b) {
                    let c = self.value(b).len();
                    let mut gb = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    out.push((b, gb));
                }
            }
            &Op::Scale(x, c) => {
                let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
                out.push((x, gx));
            }
            &Op::Exp(x) => {
                let y = node.value.data();
                let gx: Vec<f64> = g.iter().zip(y).map(|(a, b)| a * b).collect();
                out.push((x, gx));
            }
            &Op::Silu(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&gg, &v)| {
                        let s = sigmoid(v);
                        gg * (s + v * s * (1.0 - s))
                    })
                    .collect();
                out.push((x, gx));
            }
            &Op::Sum(x) => {
                let gx = vec![g[0]; self.value(x).len()];
                out.push((x, gx));
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let (x, w) = (*x, *w);
                let c = self.value(w).len();
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; c];
                for (r, &ir) in inv_rms.iter().enumerate() {
                    let xr = &xv[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    // y = x·r·w, r = (mean(x²)+eps)^-1/2
                    let mut dot_gwx = 0.0;
                    for j in 0..c {
                        gw[j] += gr[j] * xr[j] * ir;
                        dot_gwx += gr[j] * wv[j] * xr[j];
                    }
                    let coef = ir * ir * ir * dot_gwx / c as f64;
                    for j in 0..c {
                        gx[r * c + j] = gr[j] * wv[j] * ir - xr[j] * coef;
                    }
                }
                out.push((x, gx));
                out.push((w, gw));
            }
            &Op::Softmax(x) => {
                let c = node.value.cols();
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), o) in y.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                    let d: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        o[j] = yr[j] * (gr[j] - d);
                    }
                }
                out.push((x, gx));
            }
            &Op::LogSoftmax(x) => {
                let c = node.value.cols();
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), o) in y.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                    let s: f64 = gr.iter().sum();
                    for j in 0..c {
                        o[j] = gr[j] - yr[j].exp() * s;
                    }
                }
                out.push((x, gx));
            }
            Op::Gather { table, ids } => {
                let table = *table;
                let d = self.value(table).cols();
                let mut gt = vec![0.0; self.value(table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
                out.push((table, gt));
            }
            Op::Rope { x, cos_sin, geom } => {
                let x = *x;
                let c = node.value.cols();
                let half = geom.d_k / 2;
                let mut gx = vec![0.0; g.len()];
                for r in 0..node.value.rows() {
                    let cs = &cos_sin[r * half..(r + 1) * half];
                    for h in 0..geom.n_heads {
                        let b = r * c + h * geom.d_k;
                        for (i, &(co, si)) in cs.iter().enumerate() {
                            let (g1, g2) = (g[b + i], g[b + i + half]);
                            gx[b + i] = g1 * co + g2 * si;
                            gx[b + i + half] = -g1 * si + g2 * co;
                        }
                    }
                }
                out.push((x, gx));
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                geom,
                scale,
                probs,
            } => {
                let (q, k, v) = (*q, *k, *v);
                let c = node.value.cols();
                let dk = geom.d_k;
                let inv_sqrt = 1.0 / (dk as f64).sqrt();
                let (qv, kv, vv) = (
                    self.value(q).data(),
                    self.value(k).data(),
                    self.value(v).data(),
                );
                let mut gq = vec![0.0; qv.len()];
                let mut gk = vec![0.0; kv.len()];
                let mut gv = vec![0.0; vv.len()];
                let mut dp = Vec::new();
                let mut pi = 0;
                for &(off, len) in layout.spans() {
                    for h in 0..geom.n_heads {
                        let factor = inv_sqrt * scale.filter(|s| s.head == h).map_or(1.0, |s| s.epsilon);
                        let col = h * dk;
                        for t in 0..len {
                            let p = &probs[pi..pi + t + 1];
                            pi += t + 1;
                            let go = &g[(off + t) * c + col..(off + t) * c + col + dk];
                            dp.clear();
                            for (j, &pj) in p.iter().enumerate() {
                                let vb = (off + j) * c + col;
                                dp.push(dot(go, &vv[vb..vb + dk]));
                                for (o, &gg) in gv[vb..vb + dk].iter_mut().zip(go) {
                                    *o += pj * gg;
                                }
                            }
                            let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            let qb = (off + t) * c + col;
                            for (j, &pj) in p.iter().enumerate() {
                                let ds = pj * (dp[j] - mean) * factor;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kb = (off + j) * c + col;
                                for d in 0..dk {
                                    gq[qb + d] += ds * kv[kb + d];
                                    gk[kb + d] += ds * qv[qb + d];
                                }
                            }
                        }
                    }
                }
                out.push((q, gq));
                out.push((k, gk));
                out.push((v, gv));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let logits = *logits;
                let n = targets.len();
                let vsz = probs.len() / n;
                let s = g[0] / n as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (i, &t) in targets.iter().enumerate() {
                    gl[i * vsz + t] -= s;
                }
                out.push((logits, gl));
            }
            &Op::KlDiv(p, q) => {
                let (pv, qv) = (self.value(p).data(), self.value(q).data());
                if self.wants(p) {
                    let gp: Vec<f64> = pv
                        .iter()
                        .zip(qv)
                        .map(|(&a, &b)| if a > 0.0 { g[0] * ((a / b.max(KL_Q_FLOOR)).ln() + 1.0) } else { 0.0 })
                        .collect();
                    out.push((p, gp));
                }
                if self.wants(q) {
                    let gq: Vec<f64> = pv
                        .iter()
                        .zip(qv)
                        .map(|(&a, &b)| if a > 0.0 && b >= KL_Q_FLOOR { -g[0] * a / b } else { 0.0 })
                        .collect();
                    out.push((q, gq));
                }
            }
        }
        out
    }

    /// Post-softmax attention weights recorded by a [`Tape::causal_attention`] node,
    /// for one sequence and head, as rows of increasing length.
    pub fn attention_probs(&self, v: Var, seq: usize, head: usize) -> Option<Vec<Vec<f64>>> {
        match &self.nodes[v.0].op {
            Op::Attention { layout, geom, probs, .. } => {
                let mut pi = 0;
                for (s, &(_, len)) in layout.spans().iter().enumerate() {
                    for h in 0..geom.n_heads {
                        let mut rows = Vec::with_capacity(len);
                        for t in 0..len {
                            rows.push(probs[pi..pi + t + 1].to_vec());
                            pi += t + 1;
                        }
                        if s == seq && h == head {
                            return Some(rows);
                        }
                    }
                }
                None
            }
            _ => None,
        }
    }
}

fn check_heads(c: usize, geom: HeadGeometry, n: usize, layout: &SeqLayout, what: &str) -> Result<()> {
    if geom.n_heads * geom.d_k != c {
        return Err(dim(format!(
            "{what}: {} heads × d_k {} != width {c}",
            geom.n_heads, geom.d_k
        )));
    }
    if layout.total_rows() != n {
        return Err(dim(format!(
            "{what}: layout covers {} rows, input has {n}",
            layout.total_rows()
        )));
    }
    Ok(())
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
