//! Region-aware attention masks and the occlusion-guided adapter's region
//! masks, as pure functions of a token layout.

use std::fmt::Write as _;

use revealtoy_tensor::{Element, SparseMask, Tensor, BLOCKED};

use crate::codec::{box_patch_indices, BoundingBox, Role, TokenLayout};

/// Binary query×key visibility, convertible to a `{0, BLOCKED}` additive
/// bias. Query rows flagged `skip` see no key at all.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n_queries: usize,
    n_keys: usize,
    allowed: Vec<bool>,
    skip: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(n_queries: usize, n_keys: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(n_queries * n_keys);
        for q in 0..n_queries {
            allowed.extend((0..n_keys).map(|k| f(q, k)));
        }
        let skip = allowed
            .chunks(n_keys.max(1))
            .map(|row| !row.iter().any(|&a| a))
            .collect();
        AttentionMask {
            n_queries,
            n_keys,
            allowed,
            skip,
        }
    }

    /// Every query sees every key.
    pub fn full(n_queries: usize, n_keys: usize) -> Self {
        Self::from_fn(n_queries, n_keys, |_, _| true)
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn n_keys(&self) -> usize {
        self.n_keys
    }

    pub fn is_allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.n_keys + k]
    }

    /// Rows with no visible key. The adapter passes these tokens through.
    pub fn is_skip(&self, q: usize) -> bool {
        self.skip[q]
    }

    pub fn skip_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.skip.iter().enumerate().filter(|(_, &s)| s).map(|(i, _)| i)
    }

    pub fn allowed_count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// Additive bias: 0 where visible, [`BLOCKED`] elsewhere.
    pub fn bias<T: Element>(&self) -> Tensor<T> {
        let blocked = T::from_f64(BLOCKED);
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { T::zero() } else { blocked })
            .collect();
        Tensor::new([self.n_queries, self.n_keys], data).expect("mask dims")
    }

    pub fn to_sparse(&self) -> SparseMask {
        let rows: Vec<Vec<u32>> = self
            .allowed
            .chunks(self.n_keys.max(1))
            .take(self.n_queries)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &a)| a)
                    .map(|(k, _)| k as u32)
                    .collect()
            })
            .collect();
        SparseMask::from_rows(self.n_keys, &rows)
    }

    /// Plain-text portable graymap (`P2`), 1 = visible, one row per query.
    pub fn to_pgm(&self) -> String {
        let mut out = format!("P2\n{} {}\n1\n", self.n_keys, self.n_queries);
        for row in self.allowed.chunks(self.n_keys.max(1)).take(self.n_queries) {
            let line: Vec<&str> = row.iter().map(|&a| if a { "1" } else { "0" }).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }
}

/// Canvas patches inside `b`.
fn box_cells(b: &BoundingBox, patch: usize, grid: (usize, usize)) -> Vec<bool> {
    let mut cells = vec![false; grid.0 * grid.1];
    for i in box_patch_indices(b, patch, grid.1) {
        cells[i] = true;
    }
    cells
}

/// The adapter's layer masks on the patch grid plus each foreground's
/// spatially aligned condition patches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMasks {
    grid: (usize, usize),
    /// `oga[0]` is the background mask, `oga[j + 1]` foreground `j`'s.
    oga: Vec<Vec<bool>>,
    /// Canvas patch indices inside each foreground box.
    regions: Vec<Vec<usize>>,
}

impl RegionMasks {
    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    /// Mask of layer `i` (0 = background, `j + 1` = foreground `j`).
    pub fn layer(&self, i: usize) -> &[bool] {
        &self.oga[i]
    }

    pub fn n_layers(&self) -> usize {
        self.oga.len()
    }

    pub fn is_empty_layer(&self, i: usize) -> bool {
        !self.oga[i].iter().any(|&c| c)
    }

    /// Canvas patches of foreground `j`'s box.
    pub fn region_patches(&self, j: usize) -> &[usize] {
        &self.regions[j]
    }

    /// Condition-token indices (sequence positions) aligned with box `j`.
    pub fn region_tokens(&self, layout: &TokenLayout, j: usize) -> Vec<usize> {
        let base = layout.cond().start;
        self.regions[j].iter().map(|&p| base + p).collect()
    }
}

/// Rasterizes the adapter masks on the patch grid:
/// `M_0 = 1 − ∪_j B_j` and `M_i = B_i ∩ (1 − ∪_{j≠i} B_j)`.
pub fn build_oga_masks(boxes: &[BoundingBox], patch: usize, grid: (usize, usize)) -> RegionMasks {
    let cells: Vec<Vec<bool>> = boxes.iter().map(|b| box_cells(b, patch, grid)).collect();
    let n = grid.0 * grid.1;
    let cover: Vec<usize> = (0..n)
        .map(|p| cells.iter().filter(|c| c[p]).count())
        .collect();
    let mut oga = Vec::with_capacity(boxes.len() + 1);
    oga.push(cover.iter().map(|&c| c == 0).collect());
    for c in &cells {
        oga.push((0..n).map(|p| c[p] && cover[p] == 1).collect());
    }
    let regions = boxes
        .iter()
        .map(|b| box_patch_indices(b, patch, grid.1))
        .collect();
    RegionMasks { grid, oga, regions }
}

/// Region-aware attention over the full sequence.
///
/// `(q, k)` is visible iff `k` is a text token; or `q` is a text or
/// background token; or both are condition tokens; or `q ∈ FG(j)` and `k`
/// is in `FG(j)` or is a condition token inside box `j`.
pub fn build_raa_mask(layout: &TokenLayout, boxes: &[BoundingBox]) -> AttentionMask {
    let l = layout.len();
    let grid = layout.grid();
    let cond = layout.cond();
    let in_box: Vec<Vec<bool>> = boxes
        .iter()
        .map(|b| box_cells(b, layout.patch(), grid))
        .collect();
    let roles: Vec<Role> = (0..l).map(|t| layout.role_of(t)).collect();
    AttentionMask::from_fn(l, l, |q, k| match (roles[q], roles[k]) {
        (_, Role::Text) => true,
        (Role::Text | Role::Background, _) => true,
        (Role::Cond, Role::Cond) => true,
        (Role::Foreground(i), Role::Foreground(j)) => i == j,
        (Role::Foreground(i), Role::Cond) => in_box[i][k - cond.start],
        _ => false,
    })
}

/// Adapter cross-attention mask: queries are the target tokens (background
/// then foregrounds, in layout order), keys the condition tokens. A query of
/// layer `i` sees condition patch `k` iff `k ∈ M_i`.
pub fn build_oga_attention_mask(layout: &TokenLayout, masks: &RegionMasks) -> AttentionMask {
    let targets = layout.targets();
    let layer_of: Vec<usize> = targets
        .clone()
        .map(|t| match layout.role_of(t) {
            Role::Background => 0,
            Role::Foreground(j) => j + 1,
            _ => unreachable!("targets are background or foreground"),
        })
        .collect();
    AttentionMask::from_fn(targets.len(), layout.grid_len(), |q, k| {
        masks.layer(layer_of[q])[k]
    })
}
