//! Tape-based reverse-mode autodiff.
//!
//! Every operation appends a node to the tape, so node order is already a
//! topological order and `backward` is a single reverse sweep.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::attention::{self, AttentionDims, SparseMask};
use crate::element::Element;
use crate::error::{shape_err, Result, TensorError};
use crate::kernels;
use crate::rotary::RotaryTable;
use crate::tensor::Tensor;

/// Additive bias marking a blocked attention entry. `exp` of a row-max
/// shifted logit carrying this bias underflows to exactly zero in f32 and f64.
pub const BLOCKED: f64 = -1e9;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

pub(crate) enum Op<T: Element> {
    Param,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Silu(Var),
    Abs(Var),
    Powf(Var, T),
    Ln(Var),
    Sqrt(Var),
    Clamp(Var, T, T),
    LayerNorm { x: Var, rstd: Vec<T> },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize, usize),
    Reshape(Var),
    Transpose(Var),
    GatherRows(Var, Arc<Vec<usize>>),
    SoftmaxMasked(Var),
    Rotary(Var, Arc<RotaryTable<T>>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        mask: Arc<SparseMask>,
        heads: usize,
        probs: Vec<T>,
    },
}

pub(crate) struct Node<T: Element> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
}

/// A single-use computation tape.
pub struct Graph<T: Element> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Element>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn rank2<T: Element>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(op, format!("expected rank 2, got {s:?}"))),
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        needs_grad: bool,
    ) -> Result<Var> {
        check_finite(name, &data)?;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, needs_grad))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor<T>) -> Result<Var> {
        check_finite("param", t.data())?;
        Ok(self.push(t, Op::Param, true))
    }

    /// Leaf treated as a constant (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        check_finite("constant", t.data())?;
        Ok(self.push(t, Op::Constant, false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rank2("matmul", self.value(a))?;
        let (k2, n) = rank2("matmul", self.value(b))?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut c = vec![T::zero(); m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut c, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push_checked("matmul", vec![m, n], c, Op::MatMul(a, b), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        self.push_checked(name, shape, data, op, ng)
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

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        x: Var,
        v: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let cols = self.value(x).cols();
        let vt = self.value(v);
        if vt.len() != cols || vt.rank() > 2 || (vt.rank() == 2 && vt.shape()[0] != 1) {
            return Err(shape_err(
                name,
                format!("{:?} with row vector {:?}", self.shape(x), vt.shape()),
            ));
        }
        let vd = vt.data();
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(cols.max(1))
            .flat_map(|row| row.iter().zip(vd).map(|(&a, &b)| f(a, b)))
            .collect();
        let ng = self.ng(x) || self.ng(v);
        let shape = self.shape(x).to_vec();
        self.push_checked(name, shape, data, op, ng)
    }

    /// `x[.., c] + v[c]`
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, v, |a, b| a + b, Op::AddRow(x, v))
    }

    /// `x[.., c] * v[c]`
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, v, |a, b| a * b, Op::MulRow(x, v))
    }

    /// `x · w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let data: Vec<T> = self.value(x).data().iter().map(|&v| f(v)).collect();
        let ng = self.ng(x);
        let shape = self.shape(x).to_vec();
        self.push_checked(name, shape, data, op, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary("silu", x, |v| v / (T::one() + (-v).exp()), Op::Silu(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, |v| v.abs(), Op::Abs(x))
    }

    /// `x^p` for `x ≥ 0`, `p ≥ 1`.
    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        if p < 1.0 {
            return Err(TensorError::Invalid {
                op: "powf",
                detail: format!("exponent {p} < 1"),
            });
        }
        if self.value(x).data().iter().any(|&v| v < T::zero()) {
            return Err(TensorError::Invalid {
                op: "powf",
                detail: "negative base".into(),
            });
        }
        let p = T::from_f64(p);
        self.unary("powf", x, |v| v.powf(p), Op::Powf(x, p))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary("ln", x, |v| v.ln(), Op::Ln(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, |v| v.sqrt(), Op::Sqrt(x))
    }

    /// Clamps to `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        self.unary("clamp", x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    /// Normalizes each row over the last axis to zero mean and unit
    /// variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let cols = self.value(x).cols();
        if cols == 0 {
            return Err(shape_err("layer_norm", "empty last axis"));
        }
        let eps = T::from_f64(eps);
        let n = T::from_f64(cols as f64);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        let mut rstds = Vec::with_capacity(src.len() / cols);
        for row in src.chunks(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + eps).sqrt();
            out.extend(row.iter().map(|&v| (v - mean) * rstd));
            rstds.push(rstd);
        }
        let ng = self.ng(x);
        let shape = self.shape(x).to_vec();
        self.push_checked("layer_norm", shape, out, Op::LayerNorm { x, rstd: rstds }, ng)
    }

    /// Layer norm followed by a learned per-channel scale and shift.
    pub fn layer_norm_affine(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let y = self.layer_norm(x, eps)?;
        let y = self.mul_row(y, gamma)?;
        self.add_row(y, beta)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push_checked("sum", vec![1], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(shape_err("mean", "empty tensor"));
        }
        let s: T = t.data().iter().copied().sum::<T>() / T::from_f64(t.len() as f64);
        let ng = self.ng(x);
        self.push_checked("mean", vec![1], vec![s], Op::Mean(x), ng)
    }

    /// Sums each row over the last axis: `[.., c] -> [.., 1]`.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols().max(1);
        let data: Vec<T> = t.data().chunks(cols).map(|r| r.iter().copied().sum()).collect();
        let mut shape = t.shape().to_vec();
        if let Some(last) = shape.last_mut() {
            *last = 1;
        }
        let ng = self.ng(x);
        self.push_checked("sum_last", shape, data, Op::SumLast(x), ng)
    }

    /// Concatenates rank-2 tensors along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        let (_, cols) = rank2("concat_rows", self.value(first))?;
        let mut rows = 0;
        let mut data = Vec::new();
        let mut ng = false;
        for &p in parts {
            let (r, c) = rank2("concat_rows", self.value(p))?;
            if c != cols {
                return Err(shape_err("concat_rows", format!("column count {c} != {cols}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
            ng |= self.ng(p);
        }
        let t = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Rows `[start, end)` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = rank2("slice_rows", self.value(x))?;
        if start > end || end > r {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: end,
                extent: r,
            });
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let ng = self.ng(x);
        let t = Tensor::new(vec![end - start, c], data)?;
        Ok(self.push(t, Op::SliceRows(x, start), ng))
    }

    /// Columns `[start, end)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = rank2("slice_cols", self.value(x))?;
        if start > end || end > c {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: end,
                extent: c,
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * (end - start));
        for row in src.chunks(c) {
            data.extend_from_slice(&row[start..end]);
        }
        let ng = self.ng(x);
        let t = Tensor::new(vec![r, end - start], data)?;
        Ok(self.push(t, Op::SliceCols(x, start, end), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape.to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rank2("transpose", self.value(x))?;
        let data = kernels::transpose(self.value(x).data(), r, c);
        let ng = self.ng(x);
        let t = Tensor::new(vec![c, r], data)?;
        Ok(self.push(t, Op::Transpose(x), ng))
    }

    /// Selects rows of a rank-2 tensor; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, indices: Arc<Vec<usize>>) -> Result<Var> {
        let (r, c) = rank2("gather_rows", self.value(x))?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices.iter() {
            if i >= r {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    extent: r,
                });
            }
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.ng(x);
        let t = Tensor::new(vec![indices.len(), c], data)?;
        Ok(self.push(t, Op::GatherRows(x, indices), ng))
    }

    /// Row-wise softmax of `logits + bias` over the last axis.
    ///
    /// `bias` holds 0 for visible entries and [`BLOCKED`] otherwise and is
    /// treated as a constant. A row with no visible entry is an error.
    pub fn softmax_masked(&mut self, logits: Var, bias: &Tensor<T>) -> Result<Var> {
        let x = self.value(logits);
        if x.shape() != bias.shape() {
            return Err(shape_err(
                "softmax_masked",
                format!("logits {:?} vs bias {:?}", x.shape(), bias.shape()),
            ));
        }
        let cols = x.cols();
        let blocked_limit = T::from_f64(BLOCKED * 0.5);
        let mut out = Vec::with_capacity(x.len());
        for (row, (xr, br)) in x
            .data()
            .chunks(cols.max(1))
            .zip(bias.data().chunks(cols.max(1)))
            .enumerate()
        {
            if br.iter().all(|&b| b <= blocked_limit) {
                return Err(TensorError::BlockedRow { row });
            }
            let max = xr
                .iter()
                .zip(br)
                .map(|(&a, &b)| a + b)
                .fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut sum = T::zero();
            for (&a, &b) in xr.iter().zip(br) {
                let e = (a + b - max).exp();
                sum += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e = *e / sum;
            }
        }
        let ng = self.ng(logits);
        let shape = x.shape().to_vec();
        self.push_checked("softmax_masked", shape, out, Op::SoftmaxMasked(logits), ng)
    }

    /// Applies per-row rotary rotations to `[rows × heads·head_dim]`.
    pub fn rotary(&mut self, x: Var, table: Arc<RotaryTable<T>>) -> Result<Var> {
        let (r, c) = rank2("rotary", self.value(x))?;
        let hd = table.head_dim();
        if r != table.rows() || hd == 0 || c % hd != 0 {
            return Err(shape_err(
                "rotary",
                format!("[{r}x{c}] with table of {} rows, head dim {hd}", table.rows()),
            ));
        }
        let data = table.apply(self.value(x).data(), c, false);
        let ng = self.ng(x);
        self.push_checked("rotary", vec![r, c], data, Op::Rotary(x, table), ng)
    }

    /// Multi-head scaled dot-product attention restricted to `mask`.
    ///
    /// `q: [Lq × H·d]`, `k, v: [Lk × H·d]`. Rows of `mask` with no visible
    /// key yield zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Arc<SparseMask>,
        heads: usize,
    ) -> Result<Var> {
        let (lq, w) = rank2("attention", self.value(q))?;
        let (lk, wk) = rank2("attention", self.value(k))?;
        let (lv, wv) = rank2("attention", self.value(v))?;
        if heads == 0 || w % heads != 0 || wk != w || wv != w || lv != lk {
            return Err(shape_err(
                "attention",
                format!("q [{lq}x{w}], k [{lk}x{wk}], v [{lv}x{wv}], {heads} heads"),
            ));
        }
        if mask.n_queries() != lq || mask.n_keys() != lk {
            return Err(shape_err(
                "attention",
                format!(
                    "mask {}x{} for {lq} queries, {lk} keys",
                    mask.n_queries(),
                    mask.n_keys()
                ),
            ));
        }
        let dims = AttentionDims {
            heads,
            head_dim: w / heads,
        };
        let (out, probs) = attention::forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            &mask,
            &dims,
        );
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let probs = if ng { probs } else { Vec::new() };
        self.push_checked(
            "attention",
            vec![lq, w],
            out,
            Op::Attention {
                q,
                k,
                v,
                mask,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar root. Returns gradients of every
    /// [`Graph::param`] leaf reachable from `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        crate::backward::run(self, root)
    }
}

/// Gradients keyed by parameter leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T: Element> {
    pub(crate) grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of `v`; a parameter the root does not depend on has zero
    /// gradient and is reported as `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor<T>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
