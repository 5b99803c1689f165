use std::collections::BTreeMap;

use crate::attention::{self, AttentionDims};
use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::graph::{Gradients, Graph, Op, Var};
use crate::kernels;
use crate::tensor::Tensor;

struct Acc<'g, T: Element> {
    graph: &'g Graph<T>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Acc<'_, T> {
    fn slot(&mut self, v: Var) -> Option<&mut Vec<T>> {
        let i = v.index();
        if !self.graph.nodes[i].needs_grad {
            return None;
        }
        let n = self.graph.nodes[i].value.len();
        Some(self.grads[i].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn add(&mut self, v: Var, g: impl IntoIterator<Item = T>) {
        if let Some(slot) = self.slot(v) {
            for (s, x) in slot.iter_mut().zip(g) {
                *s += x;
            }
        }
    }

    fn add_at(&mut self, v: Var, offset: usize, g: &[T]) {
        if let Some(slot) = self.slot(v) {
            for (s, &x) in slot[offset..offset + g.len()].iter_mut().zip(g) {
                *s += x;
            }
        }
    }
}

pub(crate) fn run<T: Element>(graph: &Graph<T>, root: Var) -> Result<Gradients<T>> {
    let root_val = graph.value(root);
    if !root_val.is_scalar() {
        return Err(TensorError::NonScalarRoot {
            shape: root_val.shape().to_vec(),
        });
    }
    let mut acc = Acc {
        graph,
        grads: vec![None; graph.nodes.len()],
    };
    acc.add(root, [T::one()]);

    for i in (0..=root.index()).rev() {
        let Some(g) = acc.grads[i].take() else {
            continue;
        };
        let node = &graph.nodes[i];
        let val = node.value.data();
        match &node.op {
            Op::Param => {
                acc.grads[i] = Some(g);
            }
            Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = (graph.shape(*a)[0], graph.shape(*a)[1]);
                let n = graph.shape(*b)[1];
                if graph.requires_grad(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_nt_acc(&g, graph.value(*b).data(), &mut da, m, n, k);
                    acc.add(*a, da);
                }
                if graph.requires_grad(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_tn_acc(graph.value(*a).data(), &g, &mut db, m, k, n);
                    acc.add(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc.add(*a, g.iter().copied());
                acc.add(*b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                acc.add(*a, g.iter().copied());
                acc.add(*b, g.iter().map(|&x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (graph.value(*a).data(), graph.value(*b).data());
                acc.add(*a, g.iter().zip(bv).map(|(&x, &y)| x * y));
                acc.add(*b, g.iter().zip(av).map(|(&x, &y)| x * y));
            }
            Op::Div(a, b) => {
                let bv = graph.value(*b).data();
                acc.add(*a, g.iter().zip(bv).map(|(&x, &y)| x / y));
                acc.add(
                    *b,
                    g.iter()
                        .zip(val)
                        .zip(bv)
                        .map(|((&x, &q), &y)| -x * q / y),
                );
            }
            Op::AddRow(x, v) => {
                let cols = graph.value(*v).len();
                acc.add(*x, g.iter().copied());
                if graph.requires_grad(*v) {
                    let mut dv = vec![T::zero(); cols];
                    for row in g.chunks(cols) {
                        for (d, &r) in dv.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    acc.add(*v, dv);
                }
            }
            Op::MulRow(x, v) => {
                let cols = graph.value(*v).len();
                let vv = graph.value(*v).data();
                let xv = graph.value(*x).data();
                if graph.requires_grad(*x) {
                    let dx: Vec<T> = g
                        .chunks(cols)
                        .flat_map(|row| row.iter().zip(vv).map(|(&a, &b)| a * b))
                        .collect();
                    acc.add(*x, dx);
                }
                if graph.requires_grad(*v) {
                    let mut dv = vec![T::zero(); cols];
                    for (grow, xrow) in g.chunks(cols).zip(xv.chunks(cols)) {
                        for ((d, &a), &b) in dv.iter_mut().zip(grow).zip(xrow) {
                            *d += a * b;
                        }
                    }
                    acc.add(*v, dv);
                }
            }
            Op::Scale(x, c) => acc.add(*x, g.iter().map(|&a| a * *c)),
            Op::AddScalar(x) => acc.add(*x, g.iter().copied()),
            Op::Silu(x) => {
                let xv = graph.value(*x).data();
                acc.add(
                    *x,
                    g.iter().zip(xv).map(|(&a, &v)| {
                        let s = T::one() / (T::one() + (-v).exp());
                        a * (s + v * s * (T::one() - s))
                    }),
                );
            }
            Op::Abs(x) => {
                let xv = graph.value(*x).data();
                acc.add(
                    *x,
                    g.iter().zip(xv).map(|(&a, &v)| {
                        if v > T::zero() {
                            a
                        } else if v < T::zero() {
                            -a
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
            Op::Powf(x, p) => {
                let xv = graph.value(*x).data();
                let pm1 = *p - T::one();
                acc.add(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&a, &v)| a * *p * v.powf(pm1)),
                );
            }
            Op::Ln(x) => {
                let xv = graph.value(*x).data();
                acc.add(*x, g.iter().zip(xv).map(|(&a, &v)| a / v));
            }
            Op::Sqrt(x) => {
                let two = T::from_f64(2.0);
                acc.add(*x, g.iter().zip(val).map(|(&a, &s)| a / (two * s)));
            }
            Op::Clamp(x, lo, hi) => {
                let xv = graph.value(*x).data();
                acc.add(
                    *x,
                    g.iter().zip(xv).map(|(&a, &v)| {
                        if v < *lo || v > *hi {
                            T::zero()
                        } else {
                            a
                        }
                    }),
                );
            }
            Op::LayerNorm { x, rstd } => {
                let cols = graph.value(*x).cols();
                let n = T::from_f64(cols as f64);
                let mut dx = Vec::with_capacity(g.len());
                for ((grow, yrow), &r) in g.chunks(cols).zip(val.chunks(cols)).zip(rstd) {
                    let mean_g = grow.iter().copied().sum::<T>() / n;
                    let mean_gy = grow
                        .iter()
                        .zip(yrow)
                        .map(|(&a, &y)| a * y)
                        .sum::<T>()
                        / n;
                    dx.extend(
                        grow.iter()
                            .zip(yrow)
                            .map(|(&a, &y)| r * (a - mean_g - y * mean_gy)),
                    );
                }
                acc.add(*x, dx);
            }
            Op::Sum(x) => {
                let n = graph.value(*x).len();
                acc.add(*x, std::iter::repeat_n(g[0], n));
            }
            Op::Mean(x) => {
                let n = graph.value(*x).len();
                let each = g[0] / T::from_f64(n as f64);
                acc.add(*x, std::iter::repeat_n(each, n));
            }
            Op::SumLast(x) => {
                let cols = graph.value(*x).cols();
                acc.add(*x, g.iter().flat_map(|&a| std::iter::repeat_n(a, cols)));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = graph.value(p).len();
                    acc.add(p, g[offset..offset + n].iter().copied());
                    offset += n;
                }
            }
            Op::SliceRows(x, start) => {
                let cols = graph.value(*x).cols();
                acc.add_at(*x, start * cols, &g);
            }
            Op::SliceCols(x, start, end) => {
                let cols = graph.value(*x).cols();
                let w = end - start;
                if let Some(slot) = acc.slot(*x) {
                    for (srow, grow) in slot.chunks_mut(cols).zip(g.chunks(w)) {
                        for (s, &a) in srow[*start..*end].iter_mut().zip(grow) {
                            *s += a;
                        }
                    }
                }
            }
            Op::Reshape(x) => acc.add(*x, g.iter().copied()),
            Op::Transpose(x) => {
                let (r, c) = (graph.shape(*x)[0], graph.shape(*x)[1]);
                acc.add(*x, kernels::transpose(&g, c, r));
            }
            Op::GatherRows(x, idx) => {
                let cols = graph.value(*x).cols();
                if let Some(slot) = acc.slot(*x) {
                    for (row, &i) in g.chunks(cols).zip(idx.iter()) {
                        for (s, &a) in slot[i * cols..(i + 1) * cols].iter_mut().zip(row) {
                            *s += a;
                        }
                    }
                }
            }
            Op::SoftmaxMasked(x) => {
                let cols = graph.value(*x).cols();
                let mut dx = Vec::with_capacity(g.len());
                for (grow, prow) in g.chunks(cols).zip(val.chunks(cols)) {
                    let dot: T = grow.iter().zip(prow).map(|(&a, &p)| a * p).sum();
                    dx.extend(grow.iter().zip(prow).map(|(&a, &p)| p * (a - dot)));
                }
                acc.add(*x, dx);
            }
            Op::Rotary(x, table) => {
                let width = graph.value(*x).cols();
                acc.add(*x, table.apply(&g, width, true));
            }
            Op::Attention {
                q,
                k,
                v,
                mask,
                heads,
                probs,
            } => {
                let width = graph.value(*q).cols();
                let dims = AttentionDims {
                    heads: *heads,
                    head_dim: width / heads,
                };
                let grads = attention::backward(
                    graph.value(*q).data(),
                    graph.value(*k).data(),
                    graph.value(*v).data(),
                    probs,
                    &g,
                    mask,
                    &dims,
                );
                acc.add(*q, grads.dq);
                acc.add(*k, grads.dk);
                acc.add(*v, grads.dv);
            }
        }
    }

    let mut grads = BTreeMap::new();
    for (i, slot) in acc.grads.into_iter().enumerate() {
        if let (Some(g), Op::Param) = (slot, &graph.nodes[i].op) {
            let shape = graph.nodes[i].value.shape().to_vec();
            grads.insert(Var::from_index(i), Tensor::new(shape, g)?);
        }
    }
    Ok(Gradients { grads })
}
