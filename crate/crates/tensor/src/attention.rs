//! Fused multi-head attention over a sparse key-visibility pattern.
//!
//! Each query row lists the key rows it may attend to. The result is the
//! same as `softmax(QKᵀ/√d + bias)·V` with a {0, BLOCKED} bias, because the
//! blocked terms underflow to exactly zero there; here they are skipped.
//! A query row with an empty key list produces a zero output row.

use crate::element::Element;
use crate::kernels::{axpy, dot};

/// Row-compressed visibility pattern: `keys[offsets[r]..offsets[r+1]]` are
/// the visible key indices of query row `r`, strictly increasing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseMask {
    n_queries: usize,
    n_keys: usize,
    offsets: Vec<usize>,
    keys: Vec<u32>,
}

impl SparseMask {
    pub fn from_rows(n_keys: usize, rows: &[Vec<u32>]) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut keys = Vec::new();
        offsets.push(0);
        for row in rows {
            debug_assert!(row.windows(2).all(|w| w[0] < w[1]));
            debug_assert!(row.iter().all(|&k| (k as usize) < n_keys));
            keys.extend_from_slice(row);
            offsets.push(keys.len());
        }
        SparseMask {
            n_queries: rows.len(),
            n_keys,
            offsets,
            keys,
        }
    }

    /// Every query sees every key.
    pub fn dense(n_queries: usize, n_keys: usize) -> Self {
        let row: Vec<u32> = (0..n_keys as u32).collect();
        let rows = vec![row; n_queries];
        Self::from_rows(n_keys, &rows)
    }

    /// Builds the pattern from an additive bias matrix: an entry is visible
    /// iff its bias is exactly zero.
    pub fn from_bias<T: Element>(bias: &[T], n_queries: usize, n_keys: usize) -> Self {
        let rows: Vec<Vec<u32>> = (0..n_queries)
            .map(|q| {
                (0..n_keys)
                    .filter(|&k| bias[q * n_keys + k] == T::zero())
                    .map(|k| k as u32)
                    .collect()
            })
            .collect();
        Self::from_rows(n_keys, &rows)
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn n_keys(&self) -> usize {
        self.n_keys
    }

    pub fn nnz(&self) -> usize {
        self.keys.len()
    }

    pub fn row(&self, q: usize) -> &[u32] {
        &self.keys[self.offsets[q]..self.offsets[q + 1]]
    }

    pub fn is_visible(&self, q: usize, k: usize) -> bool {
        self.row(q).binary_search(&(k as u32)).is_ok()
    }

    pub(crate) fn offset(&self, q: usize) -> usize {
        self.offsets[q]
    }
}

pub(crate) struct AttentionDims {
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionDims {
    fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Returns `(output, probabilities)`; probabilities are stored head-major,
/// `probs[h * nnz + j]` for the j-th visible entry.
pub(crate) fn forward<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    mask: &SparseMask,
    dims: &AttentionDims,
) -> (Vec<T>, Vec<T>) {
    let width = dims.width();
    let d = dims.head_dim;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let nnz = mask.nnz();
    let mut out = vec![T::zero(); mask.n_queries() * width];
    let mut probs = vec![T::zero(); dims.heads * nnz];
    let mut scores: Vec<T> = Vec::new();
    for h in 0..dims.heads {
        let hoff = h * d;
        for qi in 0..mask.n_queries() {
            let keys = mask.row(qi);
            if keys.is_empty() {
                continue;
            }
            let q_row = &q[qi * width + hoff..qi * width + hoff + d];
            scores.clear();
            let mut max = T::neg_infinity();
            for &kj in keys {
                let kj = kj as usize;
                let s = dot(q_row, &k[kj * width + hoff..kj * width + hoff + d]) * scale;
                if s > max {
                    max = s;
                }
                scores.push(s);
            }
            let mut sum = T::zero();
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            let base = h * nnz + mask.offset(qi);
            let o_row = &mut out[qi * width + hoff..qi * width + hoff + d];
            for (j, &kj) in keys.iter().enumerate() {
                let p = scores[j] / sum;
                probs[base + j] = p;
                let kj = kj as usize;
                axpy(p, &v[kj * width + hoff..kj * width + hoff + d], o_row);
            }
        }
    }
    (out, probs)
}

pub(crate) struct AttentionGrads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    mask: &SparseMask,
    dims: &AttentionDims,
) -> AttentionGrads<T> {
    let width = dims.width();
    let d = dims.head_dim;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let nnz = mask.nnz();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp: Vec<T> = Vec::new();
    for h in 0..dims.heads {
        let hoff = h * d;
        for qi in 0..mask.n_queries() {
            let keys = mask.row(qi);
            if keys.is_empty() {
                continue;
            }
            let base = h * nnz + mask.offset(qi);
            let p_row = &probs[base..base + keys.len()];
            let do_row = &dout[qi * width + hoff..qi * width + hoff + d];
            dp.clear();
            let mut pdp = T::zero();
            for (j, &kj) in keys.iter().enumerate() {
                let kj = kj as usize;
                let val = dot(do_row, &v[kj * width + hoff..kj * width + hoff + d]);
                pdp += p_row[j] * val;
                dp.push(val);
                axpy(p_row[j], do_row, &mut dv[kj * width + hoff..kj * width + hoff + d]);
            }
            let q_row = &q[qi * width + hoff..qi * width + hoff + d];
            for (j, &kj) in keys.iter().enumerate() {
                let ds = p_row[j] * (dp[j] - pdp) * scale;
                if ds == T::zero() {
                    continue;
                }
                let kj = kj as usize;
                axpy(
                    ds,
                    &k[kj * width + hoff..kj * width + hoff + d],
                    &mut dq[qi * width + hoff..qi * width + hoff + d],
                );
                axpy(ds, q_row, &mut dk[kj * width + hoff..kj * width + hoff + d]);
            }
        }
    }
    AttentionGrads { dq, dk, dv }
}
