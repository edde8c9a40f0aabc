//! Reverse-mode autodiff over a flat operation tape.
//!
//! A [`Tape`] records every operation of one forward computation; [`Var`]s
//! are cheap handles into it. Calling [`Tape::backward`] on a 1x1 loss
//! accumulates gradients into the tape for every recorded value that
//! transitively depends on a `requires_grad` leaf. Gradients add across
//! uses and across repeated backward calls; [`Tape::zero_grads`] resets
//! them. A tape is confined to one thread.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Inputs to `log` are clamped to at least this value.
pub const LOG_EPS: f64 = 1e-12;
/// Denominators in `div` are clamped to at least this magnitude.
pub const DIV_EPS: f64 = 1e-12;
/// Variance floor inside layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-5;

static BACKWARD_CALLS: AtomicU64 = AtomicU64::new(0);

/// Total number of `backward` invocations in this process. Lets callers
/// assert that gradient-free paths really never differentiate.
pub fn backward_count() -> u64 {
    BACKWARD_CALLS.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn rows(self) -> usize {
        self.rows
    }

    pub fn cols(self) -> usize {
        self.cols
    }

    pub fn shape(self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Scale { a: usize, c: T },
    Relu { a: usize },
    Gelu { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Dropout { a: usize, mask: Vec<T> },
    SoftmaxRows { a: usize },
    LogSoftmaxRows { a: usize },
    SumAll { a: usize },
    RowSums { a: usize },
    SliceCols { a: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    ScaleCols { a: usize, v: usize },
    MulScalar { a: usize, s: usize },
    GatherRows { table: usize, ids: Vec<usize> },
    PickSum { a: usize, targets: Vec<usize>, mask: Vec<bool> },
    LayerNormRows { x: usize, gain: usize, bias: usize, cache: Vec<(T, T)> },
}

struct Slot<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
    needs_grad: bool,
}

struct Inner<T> {
    slots: Vec<Slot<T>>,
    ops: Vec<Op<T>>,
    grads: Vec<Option<Vec<T>>>,
}

pub struct Tape<T: Scalar> {
    inner: RefCell<Inner<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                slots: Vec::new(),
                ops: Vec::new(),
                grads: Vec::new(),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, rows: usize, cols: usize, data: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        let mut inner = self.inner.borrow_mut();
        let id = inner.slots.len();
        inner.slots.push(Slot {
            rows,
            cols,
            data,
            needs_grad,
        });
        inner.ops.push(op);
        inner.grads.push(None);
        Var { id, rows, cols }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|&i| inner.slots[i].needs_grad)
    }

    /// Register a leaf holding a copy of `t`.
    pub fn leaf(&self, t: &Tensor<T>, requires_grad: bool) -> Var {
        let (r, c) = t.shape();
        self.push(r, c, t.data().to_vec(), Op::Leaf, requires_grad)
    }

    /// Register a constant leaf, taking ownership.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        let (r, c) = t.shape();
        self.push(r, c, t.into_data(), Op::Leaf, false)
    }

    /// 1x1 constant.
    pub fn scalar(&self, v: T) -> Var {
        self.push(1, 1, vec![v], Op::Leaf, false)
    }

    /// Copy a recorded value out of the tape.
    pub fn value(&self, v: Var) -> Tensor<T> {
        let inner = self.inner.borrow();
        let slot = &inner.slots[v.id];
        Tensor::from_vec(slot.rows, slot.cols, slot.data.clone()).expect("slot shape")
    }

    /// Value of a 1x1 var.
    pub fn scalar_value(&self, v: Var) -> T {
        let inner = self.inner.borrow();
        debug_assert_eq!((v.rows, v.cols), (1, 1));
        inner.slots[v.id].data[0]
    }

    /// Accumulated gradient of `v`, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let inner = self.inner.borrow();
        inner.grads[v.id]
            .as_ref()
            .map(|g| Tensor::from_vec(v.rows, v.cols, g.clone()).expect("grad shape"))
    }

    pub fn zero_grads(&self) {
        let mut inner = self.inner.borrow_mut();
        for g in inner.grads.iter_mut() {
            *g = None;
        }
    }

    fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: format!("{a:?}"),
            rhs: format!("{b:?}"),
        }
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.rows {
            return Err(Self::shape_err("matmul", a.shape(), b.shape()));
        }
        let needs = self.needs(&[a.id, b.id]);
        let mut data = vec![T::zero(); a.rows * b.cols];
        {
            let inner = self.inner.borrow();
            gemm_nn(
                &inner.slots[a.id].data,
                &inner.slots[b.id].data,
                a.rows,
                a.cols,
                b.cols,
                &mut data,
            );
        }
        Ok(self.push(a.rows, b.cols, data, Op::MatMul { a: a.id, b: b.id }, needs))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let needs = self.needs(&[a.id]);
        let mut data = vec![T::zero(); a.rows * a.cols];
        {
            let inner = self.inner.borrow();
            let src = &inner.slots[a.id].data;
            for i in 0..a.rows {
                for j in 0..a.cols {
                    data[j * a.rows + i] = src[i * a.cols + j];
                }
            }
        }
        self.push(a.cols, a.rows, data, Op::Transpose { a: a.id }, needs)
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(Self::shape_err(name, a.shape(), b.shape()));
        }
        let needs = self.needs(&[a.id, b.id]);
        let data = {
            let inner = self.inner.borrow();
            inner.slots[a.id]
                .data
                .iter()
                .zip(&inner.slots[b.id].data)
                .map(|(&x, &y)| f(x, y))
                .collect()
        };
        Ok(self.push(a.rows, a.cols, data, op, needs))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a: a.id, b: b.id })
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a: a.id, b: b.id })
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a: a.id, b: b.id })
    }

    /// Elementwise division with the denominator clamped to at least
    /// [`DIV_EPS`] in magnitude (zero counts as positive), so the result is
    /// always finite. Where the clamp is active the denominator is treated
    /// as constant in backward.
    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let eps = T::from_f64(DIV_EPS);
        self.binary(
            "div",
            a,
            b,
            move |x, y| x / guard_denom(y, eps),
            Op::Div { a: a.id, b: b.id },
        )
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let needs = self.needs(&[a.id]);
        let data = {
            let inner = self.inner.borrow();
            inner.slots[a.id].data.iter().map(|&x| f(x)).collect()
        };
        self.push(a.rows, a.cols, data, op, needs)
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale { a: a.id, c })
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            Op::Relu { a: a.id },
        )
    }

    pub fn gelu(&self, a: Var) -> Var {
        self.unary(a, gelu_value, Op::Gelu { a: a.id })
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp { a: a.id })
    }

    /// Natural log of `max(x, LOG_EPS)`; never NaN or -inf for finite input.
    /// In the clamped region the true derivative of the clamped function,
    /// zero, is used.
    pub fn log(&self, a: Var) -> Var {
        let eps = T::from_f64(LOG_EPS);
        self.unary(a, move |x| x.max(eps).ln(), Op::Log { a: a.id })
    }

    /// Inverted dropout: in train mode each entry is zeroed with probability
    /// `p` and survivors are scaled by `1/(1-p)`, so the expectation is the
    /// identity. In eval mode this is the identity (no tape node).
    pub fn dropout(&self, a: Var, p: f64, train: bool, rng: &mut SeedRng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep_scale = T::from_f64(1.0 / (1.0 - p));
        let n = a.rows * a.cols;
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.uniform() < p {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let needs = self.needs(&[a.id]);
        let data = {
            let inner = self.inner.borrow();
            inner.slots[a.id]
                .data
                .iter()
                .zip(&mask)
                .map(|(&x, &m)| x * m)
                .collect()
        };
        Ok(self.push(a.rows, a.cols, data, Op::Dropout { a: a.id, mask }, needs))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let needs = self.needs(&[a.id]);
        let mut data = vec![T::zero(); a.rows * a.cols];
        {
            let inner = self.inner.borrow();
            let src = &inner.slots[a.id].data;
            for i in 0..a.rows {
                let row = &src[i * a.cols..(i + 1) * a.cols];
                let out = &mut data[i * a.cols..(i + 1) * a.cols];
                softmax_into(row, out);
            }
        }
        self.push(a.rows, a.cols, data, Op::SoftmaxRows { a: a.id }, needs)
    }

    /// Row-wise log-softmax (stable log-sum-exp form).
    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let needs = self.needs(&[a.id]);
        let mut data = vec![T::zero(); a.rows * a.cols];
        {
            let inner = self.inner.borrow();
            let src = &inner.slots[a.id].data;
            for i in 0..a.rows {
                let row = &src[i * a.cols..(i + 1) * a.cols];
                let out = &mut data[i * a.cols..(i + 1) * a.cols];
                let mut mx = row[0];
                for &x in row {
                    if x > mx {
                        mx = x;
                    }
                }
                let mut sum = T::zero();
                for &x in row {
                    sum += (x - mx).exp();
                }
                let lse = mx + sum.ln();
                for (o, &x) in out.iter_mut().zip(row) {
                    *o = x - lse;
                }
            }
        }
        self.push(
            a.rows,
            a.cols,
            data,
            Op::LogSoftmaxRows { a: a.id },
            needs,
        )
    }

    /// Sum of all entries, as 1x1.
    pub fn sum_all(&self, a: Var) -> Var {
        let needs = self.needs(&[a.id]);
        let total = {
            let inner = self.inner.borrow();
            let mut acc = T::zero();
            for &x in &inner.slots[a.id].data {
                acc += x;
            }
            acc
        };
        self.push(1, 1, vec![total], Op::SumAll { a: a.id }, needs)
    }

    /// Per-row sums: m x n -> m x 1.
    pub fn row_sums(&self, a: Var) -> Var {
        let needs = self.needs(&[a.id]);
        let data = {
            let inner = self.inner.borrow();
            let src = &inner.slots[a.id].data;
            (0..a.rows)
                .map(|i| {
                    let mut acc = T::zero();
                    for &x in &src[i * a.cols..(i + 1) * a.cols] {
                        acc += x;
                    }
                    acc
                })
                .collect()
        };
        self.push(a.rows, 1, data, Op::RowSums { a: a.id }, needs)
    }

    /// Columns `[start, start+width)` of `a`.
    pub fn slice_cols(&self, a: Var, start: usize, width: usize) -> Result<Var> {
        if start + width > a.cols || width == 0 {
            return Err(Error::Contract(format!(
                "slice_cols [{start}, {}) out of range for {} columns",
                start + width,
                a.cols
            )));
        }
        let needs = self.needs(&[a.id]);
        let data = {
            let inner = self.inner.borrow();
            let src = &inner.slots[a.id].data;
            let mut out = Vec::with_capacity(a.rows * width);
            for i in 0..a.rows {
                out.extend_from_slice(&src[i * a.cols + start..i * a.cols + start + width]);
            }
            out
        };
        Ok(self.push(a.rows, width, data, Op::SliceCols { a: a.id, start }, needs))
    }

    /// Horizontal concatenation; all parts must share a row count.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of zero parts".into()))?;
        let rows = first.rows;
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::Contract("concat_cols row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = self.needs(&ids);
        let data = {
            let inner = self.inner.borrow();
            let mut out = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for p in parts {
                    let src = &inner.slots[p.id].data;
                    out.extend_from_slice(&src[i * p.cols..(i + 1) * p.cols]);
                }
            }
            out
        };
        Ok(self.push(rows, cols, data, Op::ConcatCols { parts: ids }, needs))
    }

    /// Scale column `j` of `a` by `v[j]`; `v` must be 1 x a.cols.
    pub fn scale_cols(&self, a: Var, v: Var) -> Result<Var> {
        if v.rows != 1 || v.cols != a.cols {
            return Err(Self::shape_err("scale_cols", a.shape(), v.shape()));
        }
        let needs = self.needs(&[a.id, v.id]);
        let data = {
            let inner = self.inner.borrow();
            let src = &inner.slots[a.id].data;
            let vv = &inner.slots[v.id].data;
            let mut out = Vec::with_capacity(a.rows * a.cols);
            for i in 0..a.rows {
                for j in 0..a.cols {
                    out.push(src[i * a.cols + j] * vv[j]);
                }
            }
            out
        };
        Ok(self.push(a.rows, a.cols, data, Op::ScaleCols { a: a.id, v: v.id }, needs))
    }

    /// Multiply every entry of `a` by the 1x1 var `s`.
    pub fn mul_scalar(&self, a: Var, s: Var) -> Result<Var> {
        if s.shape() != (1, 1) {
            return Err(Self::shape_err("mul_scalar", a.shape(), s.shape()));
        }
        let needs = self.needs(&[a.id, s.id]);
        let data = {
            let inner = self.inner.borrow();
            let sv = inner.slots[s.id].data[0];
            inner.slots[a.id].data.iter().map(|&x| x * sv).collect()
        };
        Ok(self.push(a.rows, a.cols, data, Op::MulScalar { a: a.id, s: s.id }, needs))
    }

    /// Row lookup: out[i, :] = table[ids[i], :].
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= table.rows) {
            return Err(Error::Contract(format!(
                "gather_rows index {bad} out of range for {} rows",
                table.rows
            )));
        }
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let needs = self.needs(&[table.id]);
        let data = {
            let inner = self.inner.borrow();
            let src = &inner.slots[table.id].data;
            let mut out = Vec::with_capacity(ids.len() * table.cols);
            for &r in ids {
                out.extend_from_slice(&src[r * table.cols..(r + 1) * table.cols]);
            }
            out
        };
        Ok(self.push(
            ids.len(),
            table.cols,
            data,
            Op::GatherRows {
                table: table.id,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Sum of `a[t, targets[t]]` over rows where `mask[t]`, as 1x1.
    pub fn pick_sum(&self, a: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        if targets.len() != a.rows || mask.len() != a.rows {
            return Err(Error::Contract(format!(
                "pick_sum expects {} targets and mask entries, got {} and {}",
                a.rows,
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= a.cols) {
            return Err(Error::Contract(format!(
                "pick_sum target {bad} out of range for {} columns",
                a.cols
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Contract("pick_sum with an all-false mask".into()));
        }
        let needs = self.needs(&[a.id]);
        let total = {
            let inner = self.inner.borrow();
            let src = &inner.slots[a.id].data;
            let mut acc = T::zero();
            for t in 0..a.rows {
                if mask[t] {
                    acc += src[t * a.cols + targets[t]];
                }
            }
            acc
        };
        Ok(self.push(
            1,
            1,
            vec![total],
            Op::PickSum {
                a: a.id,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            needs,
        ))
    }

    /// Per-row layer norm with affine gain and bias (both 1 x a.cols).
    pub fn layer_norm_rows(&self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        if gain.shape() != (1, a.cols) || bias.shape() != (1, a.cols) {
            return Err(Self::shape_err("layer_norm_rows", a.shape(), gain.shape()));
        }
        let needs = self.needs(&[a.id, gain.id, bias.id]);
        let n = T::from_f64(a.cols as f64);
        let eps = T::from_f64(LAYER_NORM_EPS);
        let mut cache = Vec::with_capacity(a.rows);
        let data = {
            let inner = self.inner.borrow();
            let src = &inner.slots[a.id].data;
            let g = &inner.slots[gain.id].data;
            let b = &inner.slots[bias.id].data;
            let mut out = Vec::with_capacity(a.rows * a.cols);
            for i in 0..a.rows {
                let row = &src[i * a.cols..(i + 1) * a.cols];
                let mut mean = T::zero();
                for &x in row {
                    mean += x;
                }
                mean = mean / n;
                let mut var = T::zero();
                for &x in row {
                    let d = x - mean;
                    var += d * d;
                }
                var = var / n;
                let rstd = (var + eps).sqrt().recip();
                cache.push((mean, rstd));
                for (j, &x) in row.iter().enumerate() {
                    out.push((x - mean) * rstd * g[j] + b[j]);
                }
            }
            out
        };
        Ok(self.push(
            a.rows,
            a.cols,
            data,
            Op::LayerNormRows {
                x: a.id,
                gain: gain.id,
                bias: bias.id,
                cache,
            },
            needs,
        ))
    }

    /// Accumulate gradients of `loss` (which must be 1x1 and finite) into
    /// every recorded value that can reach a `requires_grad` leaf. Each call
    /// propagates through a fresh working buffer and adds the result to the
    /// stored gradients, so repeated calls sum cleanly.
    pub fn backward(&self, loss: Var) -> Result<()> {
        if loss.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a 1x1 loss, got {:?}",
                loss.shape()
            )));
        }
        BACKWARD_CALLS.fetch_add(1, Ordering::Relaxed);
        let mut inner = self.inner.borrow_mut();
        let Inner { slots, ops, grads } = &mut *inner;
        if !slots[loss.id].data[0].is_finite() {
            return Err(Error::Contract(
                "backward called on a non-finite loss".into(),
            ));
        }
        let mut work: Vec<Option<Vec<T>>> = vec![None; slots.len()];
        work[loss.id] = Some(vec![T::one()]);
        for out in (0..=loss.id).rev() {
            if !slots[out].needs_grad || work[out].is_none() {
                continue;
            }
            // Inputs always precede outputs, so borrow the output gradient
            // from the tail split and input gradients from the head.
            let (head, tail) = work.split_at_mut(out);
            let g = tail[0].as_ref().expect("checked above");
            backward_op(&ops[out], slots, out, g, head);
        }
        for (dst, src) in grads.iter_mut().zip(work) {
            let Some(s) = src else { continue };
            match dst {
                Some(d) => {
                    for (a, b) in d.iter_mut().zip(&s) {
                        *a += *b;
                    }
                }
                None => *dst = Some(s),
            }
        }
        Ok(())
    }
}

fn guard_denom<T: Scalar>(y: T, eps: T) -> T {
    if y.abs() >= eps {
        y
    } else if y < T::zero() {
        -eps
    } else {
        eps
    }
}

fn gelu_value<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::from_f64(0.044_715);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(0.797_884_560_802_865_4);
    let a = T::from_f64(0.044_715);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

fn softmax_into<T: Scalar>(row: &[T], out: &mut [T]) {
    let mut mx = row[0];
    for &x in row {
        if x > mx {
            mx = x;
        }
    }
    let mut sum = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - mx).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn add_into<T: Scalar>(dst: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = dst.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

#[allow(clippy::too_many_lines)]
fn backward_op<T: Scalar>(
    op: &Op<T>,
    slots: &[Slot<T>],
    out: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let out_rows = slots[out].rows;
    let out_cols = slots[out].cols;
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = (slots[*a].rows, slots[*a].cols);
            let n = slots[*b].cols;
            if slots[*a].needs_grad {
                add_into(&mut grads[*a], m * k, |ga| {
                    gemm_nt(g, &slots[*b].data, m, n, k, ga);
                });
            }
            if slots[*b].needs_grad {
                add_into(&mut grads[*b], k * n, |gb| {
                    gemm_tn(&slots[*a].data, g, k, m, n, gb);
                });
            }
        }
        Op::Transpose { a } => {
            if slots[*a].needs_grad {
                let (ar, ac) = (slots[*a].rows, slots[*a].cols);
                add_into(&mut grads[*a], ar * ac, |ga| {
                    for i in 0..out_rows {
                        for j in 0..out_cols {
                            ga[j * ac + i] += g[i * out_cols + j];
                        }
                    }
                });
            }
        }
        Op::Add { a, b } => {
            for id in [a, b] {
                if slots[*id].needs_grad {
                    add_into(&mut grads[*id], g.len(), |gx| {
                        for (o, &gi) in gx.iter_mut().zip(g) {
                            *o += gi;
                        }
                    });
                }
            }
        }
        Op::Sub { a, b } => {
            if slots[*a].needs_grad {
                add_into(&mut grads[*a], g.len(), |ga| {
                    for (o, &gi) in ga.iter_mut().zip(g) {
                        *o += gi;
                    }
                });
            }
            if slots[*b].needs_grad {
                add_into(&mut grads[*b], g.len(), |gb| {
                    for (o, &gi) in gb.iter_mut().zip(g) {
                        *o = *o - gi;
                    }
                });
            }
        }
        Op::Mul { a, b } => {
            if slots[*a].needs_grad {
                let bd = &slots[*b].data;
                add_into(&mut grads[*a], g.len(), |ga| {
                    for ((o, &gi), &bv) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gi * bv;
                    }
                });
            }
            if slots[*b].needs_grad {
                let ad = &slots[*a].data;
                add_into(&mut grads[*b], g.len(), |gb| {
                    for ((o, &gi), &av) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gi * av;
                    }
                });
            }
        }
        Op::Div { a, b } => {
            let eps = T::from_f64(DIV_EPS);
            let ad = &slots[*a].data;
            let bd = &slots[*b].data;
            if slots[*a].needs_grad {
                add_into(&mut grads[*a], g.len(), |ga| {
                    for ((o, &gi), &bv) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gi / guard_denom(bv, eps);
                    }
                });
            }
            if slots[*b].needs_grad {
                add_into(&mut grads[*b], g.len(), |gb| {
                    for i in 0..g.len() {
                        if bd[i].abs() >= eps {
                            gb[i] = gb[i] - g[i] * ad[i] / (bd[i] * bd[i]);
                        }
                    }
                });
            }
        }
        Op::Scale { a, c } => {
            if slots[*a].needs_grad {
                add_into(&mut grads[*a], g.len(), |ga| {
                    for (o, &gi) in ga.iter_mut().zip(g) {
                        *o += gi * *c;
                    }
                });
            }
        }
        Op::Relu { a } => {
            if slots[*a].needs_grad {
                let ad = &slots[*a].data;
                add_into(&mut grads[*a], g.len(), |ga| {
                    for ((o, &gi), &av) in ga.iter_mut().zip(g).zip(ad) {
                        if av > T::zero() {
                            *o += gi;
                        }
                    }
                });
            }
        }
        Op::Gelu { a } => {
            if slots[*a].needs_grad {
                let ad = &slots[*a].data;
                add_into(&mut grads[*a], g.len(), |ga| {
                    for ((o, &gi), &av) in ga.iter_mut().zip(g).zip(ad) {
                        *o += gi * gelu_grad(av);
                    }
                });
            }
        }
        Op::Exp { a } => {
            if slots[*a].needs_grad {
                let od = &slots[out].data;
                add_into(&mut grads[*a], g.len(), |ga| {
                    for ((o, &gi), &ov) in ga.iter_mut().zip(g).zip(od) {
                        *o += gi * ov;
                    }
                });
            }
        }
        Op::Log { a } => {
            if slots[*a].needs_grad {
                let eps = T::from_f64(LOG_EPS);
                let ad = &slots[*a].data;
                add_into(&mut grads[*a], g.len(), |ga| {
                    for ((o, &gi), &av) in ga.iter_mut().zip(g).zip(ad) {
                        if av > eps {
                            *o += gi / av;
                        }
                    }
                });
            }
        }
        Op::Dropout { a, mask } => {
            if slots[*a].needs_grad {
                add_into(&mut grads[*a], g.len(), |ga| {
                    for ((o, &gi), &m) in ga.iter_mut().zip(g).zip(mask) {
                        *o += gi * m;
                    }
                });
            }
        }
        Op::SoftmaxRows { a } => {
            if slots[*a].needs_grad {
                let od = &slots[out].data;
                add_into(&mut grads[*a], g.len(), |ga| {
                    for i in 0..out_rows {
                        let s = &od[i * out_cols..(i + 1) * out_cols];
                        let gr = &g[i * out_cols..(i + 1) * out_cols];
                        let mut dot = T::zero();
                        for (&sv, &gv) in s.iter().zip(gr) {
                            dot += sv * gv;
                        }
                        let out_row = &mut ga[i * out_cols..(i + 1) * out_cols];
                        for ((o, &sv), &gv) in out_row.iter_mut().zip(s).zip(gr) {
                            *o += sv * (gv - dot);
                        }
                    }
                });
            }
        }
        Op::LogSoftmaxRows { a } => {
            if slots[*a].needs_grad {
                let od = &slots[out].data;
                add_into(&mut grads[*a], g.len(), |ga| {
                    for i in 0..out_rows {
                        let lo = &od[i * out_cols..(i + 1) * out_cols];
                        let gr = &g[i * out_cols..(i + 1) * out_cols];
                        let mut sum_g = T::zero();
                        for &gv in gr {
                            sum_g += gv;
                        }
                        let out_row = &mut ga[i * out_cols..(i + 1) * out_cols];
                        for ((o, &lv), &gv) in out_row.iter_mut().zip(lo).zip(gr) {
                            *o += gv - lv.exp() * sum_g;
                        }
                    }
                });
            }
        }
        Op::SumAll { a } => {
            if slots[*a].needs_grad {
                let n = slots[*a].data.len();
                let g0 = g[0];
                add_into(&mut grads[*a], n, |ga| {
                    for o in ga.iter_mut() {
                        *o += g0;
                    }
                });
            }
        }
        Op::RowSums { a } => {
            if slots[*a].needs_grad {
                let (ar, ac) = (slots[*a].rows, slots[*a].cols);
                add_into(&mut grads[*a], ar * ac, |ga| {
                    for i in 0..ar {
                        let gi = g[i];
                        for o in &mut ga[i * ac..(i + 1) * ac] {
                            *o += gi;
                        }
                    }
                });
            }
        }
        Op::SliceCols { a, start } => {
            if slots[*a].needs_grad {
                let (ar, ac) = (slots[*a].rows, slots[*a].cols);
                add_into(&mut grads[*a], ar * ac, |ga| {
                    for i in 0..out_rows {
                        for j in 0..out_cols {
                            ga[i * ac + start + j] += g[i * out_cols + j];
                        }
                    }
                });
            }
        }
        Op::ConcatCols { parts } => {
            let mut offset = 0;
            for &p in parts {
                let pc = slots[p].cols;
                if slots[p].needs_grad {
                    let pr = slots[p].rows;
                    add_into(&mut grads[p], pr * pc, |gp| {
                        for i in 0..out_rows {
                            for j in 0..pc {
                                gp[i * pc + j] += g[i * out_cols + offset + j];
                            }
                        }
                    });
                }
                offset += pc;
            }
        }
        Op::ScaleCols { a, v } => {
            let ad = &slots[*a].data;
            let vd = &slots[*v].data;
            if slots[*a].needs_grad {
                add_into(&mut grads[*a], g.len(), |ga| {
                    for i in 0..out_rows {
                        for j in 0..out_cols {
                            ga[i * out_cols + j] += g[i * out_cols + j] * vd[j];
                        }
                    }
                });
            }
            if slots[*v].needs_grad {
                add_into(&mut grads[*v], out_cols, |gv| {
                    for i in 0..out_rows {
                        for j in 0..out_cols {
                            gv[j] += g[i * out_cols + j] * ad[i * out_cols + j];
                        }
                    }
                });
            }
        }
        Op::MulScalar { a, s } => {
            let ad = &slots[*a].data;
            let sv = slots[*s].data[0];
            if slots[*a].needs_grad {
                add_into(&mut grads[*a], g.len(), |ga| {
                    for (o, &gi) in ga.iter_mut().zip(g) {
                        *o += gi * sv;
                    }
                });
            }
            if slots[*s].needs_grad {
                let mut acc = T::zero();
                for (&gi, &av) in g.iter().zip(ad) {
                    acc += gi * av;
                }
                add_into(&mut grads[*s], 1, |gs| {
                    gs[0] += acc;
                });
            }
        }
        Op::GatherRows { table, ids } => {
            if slots[*table].needs_grad {
                let (tr, tc) = (slots[*table].rows, slots[*table].cols);
                add_into(&mut grads[*table], tr * tc, |gt| {
                    for (i, &r) in ids.iter().enumerate() {
                        for j in 0..tc {
                            gt[r * tc + j] += g[i * tc + j];
                        }
                    }
                });
            }
        }
        Op::PickSum { a, targets, mask } => {
            if slots[*a].needs_grad {
                let (ar, ac) = (slots[*a].rows, slots[*a].cols);
                let g0 = g[0];
                add_into(&mut grads[*a], ar * ac, |ga| {
                    for t in 0..ar {
                        if mask[t] {
                            ga[t * ac + targets[t]] += g0;
                        }
                    }
                });
            }
        }
        Op::LayerNormRows {
            x,
            gain,
            bias,
            cache,
        } => {
            let xd = &slots[*x].data;
            let gd = &slots[*gain].data;
            let n = T::from_f64(out_cols as f64);
            if slots[*bias].needs_grad {
                add_into(&mut grads[*bias], out_cols, |gb| {
                    for i in 0..out_rows {
                        for j in 0..out_cols {
                            gb[j] += g[i * out_cols + j];
                        }
                    }
                });
            }
            if slots[*gain].needs_grad {
                add_into(&mut grads[*gain], out_cols, |gg| {
                    for i in 0..out_rows {
                        let (mean, rstd) = cache[i];
                        for j in 0..out_cols {
                            let xh = (xd[i * out_cols + j] - mean) * rstd;
                            gg[j] += g[i * out_cols + j] * xh;
                        }
                    }
                });
            }
            if slots[*x].needs_grad {
                add_into(&mut grads[*x], xd.len(), |gx| {
                    for i in 0..out_rows {
                        let (mean, rstd) = cache[i];
                        let row = &xd[i * out_cols..(i + 1) * out_cols];
                        let gr = &g[i * out_cols..(i + 1) * out_cols];
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for j in 0..out_cols {
                            let xh = (row[j] - mean) * rstd;
                            let dxh = gr[j] * gd[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        let mean_dxh = sum_dxh / n;
                        let mean_dxh_xh = sum_dxh_xh / n;
                        let out_row = &mut gx[i * out_cols..(i + 1) * out_cols];
                        for j in 0..out_cols {
                            let xh = (row[j] - mean) * rstd;
                            let dxh = gr[j] * gd[j];
                            out_row[j] += rstd * (dxh - mean_dxh - xh * mean_dxh_xh);
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference gradient of a scalar function of one tensor.
    fn fd_grad(t: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
        let h = 1e-6;
        let mut g = Tensor::zeros(t.rows(), t.cols());
        for i in 0..t.rows() {
            for j in 0..t.cols() {
                let mut plus = t.clone();
                plus.set(i, j, t.get(i, j) + h);
                let mut minus = t.clone();
                minus.set(i, j, t.get(i, j) - h);
                g.set(i, j, (f(&plus) - f(&minus)) / (2.0 * h));
            }
        }
        g
    }

    /// Compare the tape gradient of `build` against finite differences.
    fn check_grad(t: &Tensor<f64>, build: &dyn Fn(&Tape<f64>, Var) -> Var) {
        let tape = Tape::new();
        let x = tape.leaf(t, true);
        let loss = build(&tape, x);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(x).expect("input gradient");
        let numeric = fd_grad(t, &|tv| {
            let eval = Tape::new();
            let x = eval.leaf(tv, false);
            eval.scalar_value(build(&eval, x))
        });
        for i in 0..t.rows() {
            for j in 0..t.cols() {
                let a = analytic.get(i, j);
                let n = numeric.get(i, j);
                let scale = a.abs().max(n.abs()).max(1.0);
                assert!(
                    (a - n).abs() <= 1e-6 * scale,
                    "grad mismatch at ({i},{j}): analytic {a}, numeric {n}"
                );
            }
        }
    }

    /// Asymmetric weighting so reductions do not hide transposition bugs.
    fn weighted_sum(tape: &Tape<f64>, v: Var) -> Var {
        let w = Tensor::from_fn(v.rows(), v.cols(), |i, j| {
            0.4 + ((3 * i + 5 * j + 1) as f64).sin()
        });
        let prod = tape.mul(v, tape.constant(w)).unwrap();
        tape.sum_all(prod)
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = SeedRng::new(seed);
        Tensor::randn(rows, cols, 1.0, &mut rng)
    }

    #[test]
    fn matmul_grad_left() {
        let b = sample(4, 2, 21);
        check_grad(&sample(3, 4, 20), &move |t, x| {
            let y = t.matmul(x, t.constant(b.clone())).unwrap();
            weighted_sum(t, y)
        });
    }

    #[test]
    fn matmul_grad_right() {
        let a = sample(3, 4, 22);
        check_grad(&sample(4, 2, 23), &move |t, x| {
            let y = t.matmul(t.constant(a.clone()), x).unwrap();
            weighted_sum(t, y)
        });
    }

    #[test]
    fn transpose_grad() {
        check_grad(&sample(3, 5, 24), &|t, x| weighted_sum(t, t.transpose(x)));
    }

    #[test]
    fn elementwise_grads() {
        let other = sample(3, 4, 25).map(|v| v + 3.0); // keep div well away from 0
        for build in [
            |t: &Tape<f64>, x: Var, o: Var| t.add(x, o).unwrap(),
            |t: &Tape<f64>, x: Var, o: Var| t.sub(x, o).unwrap(),
            |t: &Tape<f64>, x: Var, o: Var| t.mul(x, o).unwrap(),
            |t: &Tape<f64>, x: Var, o: Var| t.div(x, o).unwrap(),
            |t: &Tape<f64>, x: Var, o: Var| t.div(o, x).unwrap(),
        ] {
            let other = other.clone();
            check_grad(&sample(3, 4, 26).map(|v| v + 4.0), &move |t, x| {
                let y = build(t, x, t.constant(other.clone()));
                weighted_sum(t, y)
            });
        }
    }

    #[test]
    fn unary_grads() {
        // keep relu/log test points away from their kinks
        let pos = sample(2, 6, 27).map(|v| v.abs() + 0.5);
        check_grad(&pos, &|t, x| weighted_sum(t, t.relu(x)));
        check_grad(&pos, &|t, x| weighted_sum(t, t.log(x)));
        let mixed = sample(2, 6, 28);
        check_grad(&mixed, &|t, x| weighted_sum(t, t.gelu(x)));
        check_grad(&mixed, &|t, x| weighted_sum(t, t.exp(x)));
        check_grad(&mixed, &|t, x| weighted_sum(t, t.scale(x, -1.7)));
    }

    #[test]
    fn softmax_grads() {
        let x = sample(3, 5, 29);
        check_grad(&x, &|t, v| weighted_sum(t, t.softmax_rows(v)));
        check_grad(&x, &|t, v| weighted_sum(t, t.log_softmax_rows(v)));
    }

    #[test]
    fn reduction_grads() {
        let x = sample(3, 4, 30);
        check_grad(&x, &|t, v| t.sum_all(v));
        check_grad(&x, &|t, v| weighted_sum(t, t.row_sums(v)));
        check_grad(&x, &|t, v| {
            let picked = t
                .pick_sum(v, &[1, 3, 0], &[true, false, true])
                .unwrap();
            t.scale(picked, 2.5)
        });
    }

    #[test]
    fn slice_concat_grads() {
        let x = sample(3, 6, 31);
        check_grad(&x, &|t, v| {
            let left = t.slice_cols(v, 0, 2).unwrap();
            let mid = t.slice_cols(v, 2, 3).unwrap();
            // reuse `left` twice so the slice gradient must accumulate
            let cat = t.concat_cols(&[mid, left, left]).unwrap();
            weighted_sum(t, cat)
        });
    }

    #[test]
    fn scale_cols_grads() {
        let v = sample(1, 4, 32);
        check_grad(&sample(3, 4, 33), &move |t, x| {
            let y = t.scale_cols(x, t.constant(v.clone())).unwrap();
            weighted_sum(t, y)
        });
        let a = sample(3, 4, 34);
        check_grad(&sample(1, 4, 35), &move |t, x| {
            let y = t.scale_cols(t.constant(a.clone()), x).unwrap();
            weighted_sum(t, y)
        });
    }

    #[test]
    fn mul_scalar_grads() {
        let a = sample(3, 4, 36);
        check_grad(&sample(1, 1, 37), &move |t, x| {
            let y = t.mul_scalar(t.constant(a.clone()), x).unwrap();
            weighted_sum(t, y)
        });
        let s = sample(1, 1, 38);
        check_grad(&sample(3, 4, 39), &move |t, x| {
            let y = t.mul_scalar(x, t.constant(s.clone())).unwrap();
            weighted_sum(t, y)
        });
    }

    #[test]
    fn gather_rows_grad_accumulates_repeats() {
        check_grad(&sample(5, 3, 40), &|t, x| {
            let y = t.gather_rows(x, &[4, 1, 1, 0]).unwrap();
            weighted_sum(t, y)
        });
    }

    #[test]
    fn layer_norm_grads() {
        let gain = sample(1, 6, 41).map(|v| v + 2.0);
        let bias = sample(1, 6, 42);
        let x = sample(4, 6, 43);
        {
            let (gain, bias) = (gain.clone(), bias.clone());
            check_grad(&x, &move |t, v| {
                let y = t
                    .layer_norm_rows(v, t.constant(gain.clone()), t.constant(bias.clone()))
                    .unwrap();
                weighted_sum(t, y)
            });
        }
        {
            let (x, bias) = (x.clone(), bias.clone());
            check_grad(&gain, &move |t, v| {
                let y = t
                    .layer_norm_rows(t.constant(x.clone()), v, t.constant(bias.clone()))
                    .unwrap();
                weighted_sum(t, y)
            });
        }
        check_grad(&bias, &move |t, v| {
            let y = t
                .layer_norm_rows(t.constant(x.clone()), t.constant(gain.clone()), v)
                .unwrap();
            weighted_sum(t, y)
        });
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let tape = Tape::new();
        let x = tape.leaf(&sample(4, 7, 44).scale(3.0), false);
        let s = tape.value(tape.softmax_rows(x));
        for i in 0..4 {
            let row_sum: f64 = s.row(i).iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
            assert!(s.row(i).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let tape = Tape::new();
        let x = sample(2, 5, 45);
        let shifted = x.map(|v| v + 123.456);
        let a = tape.value(tape.softmax_rows(tape.leaf(&x, false)));
        let b = tape.value(tape.softmax_rows(tape.leaf(&shifted, false)));
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let tape = Tape::new();
        let x = tape.leaf(&sample(3, 6, 46), false);
        let ls = tape.value(tape.log_softmax_rows(x));
        let s = tape.value(tape.softmax_rows(x));
        let log_s = s.map(f64::ln);
        assert!(ls.max_abs_diff(&log_s) < 1e-12);
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&sample(2, 2, 47), true);
        let loss = tape.sum_all(tape.mul(x, x).unwrap());
        tape.backward(loss).unwrap();
        let once = tape.grad(x).unwrap();
        tape.backward(loss).unwrap();
        let twice = tape.grad(x).unwrap();
        assert!(twice.max_abs_diff(&once.scale(2.0)) < 1e-12);
        tape.zero_grads();
        assert!(tape.grad(x).is_none());
        // d/dx sum(x*x) = 2x
        let expect = tape.value(x).scale(2.0);
        assert!(once.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn backward_requires_finite_scalar_loss() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&sample(2, 3, 48), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let inf = tape.leaf(&Tensor::filled(1, 1, f64::INFINITY), true);
        assert!(matches!(tape.backward(inf), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_counter_increments() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&sample(1, 1, 49), true);
        let before = backward_count();
        tape.backward(x).unwrap();
        tape.backward(x).unwrap();
        assert!(backward_count() >= before + 2);
    }

    #[test]
    fn frozen_leaves_get_no_grad() {
        let tape: Tape<f64> = Tape::new();
        let frozen = tape.leaf(&sample(2, 2, 50), false);
        let live = tape.leaf(&sample(2, 2, 51), true);
        let loss = tape.sum_all(tape.matmul(frozen, live).unwrap());
        tape.backward(loss).unwrap();
        assert!(tape.grad(frozen).is_none());
        assert!(tape.grad(live).is_some());
    }

    #[test]
    fn dropout_eval_is_identity_and_train_preserves_expectation() {
        let tape: Tape<f64> = Tape::new();
        let mut rng = SeedRng::new(52);
        let x = tape.leaf(&Tensor::filled(40, 50, 1.0), false);
        let before = tape.len();
        let eval = tape.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(tape.len(), before); // identity: no node recorded
        assert_eq!(eval.shape(), x.shape());

        let trained = tape.dropout(x, 0.25, true, &mut rng).unwrap();
        let v = tape.value(trained);
        let mean: f64 = v.data().iter().sum::<f64>() / v.len() as f64;
        assert!((mean - 1.0).abs() < 0.05, "dropout mean {mean}");
        let kept = v.data().iter().filter(|&&p| p != 0.0).count();
        let keep_rate = kept as f64 / v.len() as f64;
        assert!((keep_rate - 0.75).abs() < 0.05, "keep rate {keep_rate}");
        // survivors carry exactly the inverse keep probability
        assert!(v
            .data()
            .iter()
            .all(|&p| p == 0.0 || (p - 1.0 / 0.75).abs() < 1e-12));

        assert!(matches!(
            tape.dropout(x, 1.0, true, &mut rng),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn dropout_is_deterministic_per_seed() {
        let run = |seed: u64| {
            let tape: Tape<f64> = Tape::new();
            let mut rng = SeedRng::new(seed);
            let x = tape.leaf(&sample(6, 6, 53), false);
            tape.value(tape.dropout(x, 0.4, true, &mut rng).unwrap())
        };
        assert!(run(7).bit_eq(&run(7)));
        assert!(!run(7).bit_eq(&run(8)));
    }

    #[test]
    fn dropout_backward_uses_the_forward_mask() {
        let tape: Tape<f64> = Tape::new();
        let mut rng = SeedRng::new(54);
        let x = tape.leaf(&sample(5, 5, 55), true);
        let d = tape.dropout(x, 0.3, true, &mut rng).unwrap();
        let out = tape.value(d);
        tape.backward(tape.sum_all(d)).unwrap();
        let g = tape.grad(x).unwrap();
        let xv = tape.value(x);
        for i in 0..5 {
            for j in 0..5 {
                let expect = if out.get(i, j) == 0.0 { 0.0 } else { 1.0 / 0.7 };
                assert!((g.get(i, j) - expect).abs() < 1e-12);
                if out.get(i, j) != 0.0 {
                    assert!((out.get(i, j) - xv.get(i, j) / 0.7).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pick_sum_rejects_bad_inputs() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&sample(3, 4, 56), false);
        assert!(tape.pick_sum(x, &[0, 1], &[true, true]).is_err());
        assert!(tape.pick_sum(x, &[0, 1, 9], &[true; 3]).is_err());
        assert!(tape.pick_sum(x, &[0, 1, 2], &[false; 3]).is_err());
        assert!(tape.pick_sum(x, &[0, 1, 2], &[true, false, true]).is_ok());
    }

    #[test]
    fn shape_errors_are_reported() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(&sample(2, 3, 57), false);
        let b = tape.leaf(&sample(2, 3, 58), false);
        assert!(matches!(
            tape.matmul(a, b),
            Err(Error::ShapeMismatch { op: "matmul", .. })
        ));
        let c = tape.leaf(&sample(3, 3, 59), false);
        assert!(tape.add(a, c).is_err());
        assert!(tape.scale_cols(a, c).is_err());
        assert!(tape.slice_cols(a, 2, 2).is_err());
        assert!(tape.gather_rows(a, &[5]).is_err());
    }
}
