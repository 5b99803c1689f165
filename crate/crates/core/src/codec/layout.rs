use std::ops::Range;

use revealtoy_tensor::{Element, Tensor};

use super::image::{gray_background_convert, BoundingBox, LayeredScene};
use super::patch::{box_patch_indices, grid_dims, patchify, select_tokens, token_dim};
use crate::error::{Error, Result};

/// Role of a token segment. Foreground indices are 0-based in back-to-front
/// order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Text,
    Cond,
    Background,
    Foreground(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub role: Role,
    pub range: Range<usize>,
}

/// Unified token sequence `[TEXT | COND | BG | FG(0) | … | FG(N−1)]` with a
/// `(layer, y, x)` position per token.
///
/// Layer coordinates are 0 for text, 1 for the condition image, 2 for the
/// background and `3 + j` for foreground `j`. Image tokens carry global
/// canvas patch coordinates; text tokens use `(0, 0, index)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLayout {
    canvas: (usize, usize),
    patch: usize,
    grid: (usize, usize),
    boxes: Vec<BoundingBox>,
    segments: Vec<Segment>,
    positions: Vec<[u32; 3]>,
}

impl TokenLayout {
    /// `boxes` must already be snapped to the patch grid.
    pub fn new(
        height: usize,
        width: usize,
        patch: usize,
        k_text: usize,
        boxes: &[BoundingBox],
    ) -> Result<Self> {
        if boxes.is_empty() {
            return Err(Error::InvalidScene("at least one foreground box is required".into()));
        }
        let (gh, gw) = grid_dims(height, width, patch)?;
        for (i, b) in boxes.iter().enumerate() {
            b.check_inside(height, width, i)?;
            b.check_snapped(patch, i)?;
        }
        let mut segments = Vec::with_capacity(boxes.len() + 3);
        let mut positions = Vec::new();
        let mut start = 0;
        let mut push = |role: Role, pos: Vec<[u32; 3]>, segments: &mut Vec<Segment>| {
            let len = pos.len();
            segments.push(Segment {
                role,
                range: start..start + len,
            });
            start += len;
            positions.extend(pos);
        };
        push(
            Role::Text,
            (0..k_text as u32).map(|i| [0, 0, i]).collect(),
            &mut segments,
        );
        let grid_pos = |layer: u32| -> Vec<[u32; 3]> {
            (0..gh as u32)
                .flat_map(|y| (0..gw as u32).map(move |x| [layer, y, x]))
                .collect()
        };
        push(Role::Cond, grid_pos(1), &mut segments);
        push(Role::Background, grid_pos(2), &mut segments);
        for (j, b) in boxes.iter().enumerate() {
            let pos = box_patch_indices(b, patch, gw)
                .into_iter()
                .map(|i| [3 + j as u32, (i / gw) as u32, (i % gw) as u32])
                .collect();
            push(Role::Foreground(j), pos, &mut segments);
        }
        Ok(TokenLayout {
            canvas: (height, width),
            patch,
            grid: (gh, gw),
            boxes: boxes.to_vec(),
            segments,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn canvas(&self) -> (usize, usize) {
        self.canvas
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn grid_len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn token_dim(&self) -> usize {
        token_dim(self.patch)
    }

    pub fn boxes(&self) -> &[BoundingBox] {
        &self.boxes
    }

    pub fn n_foregrounds(&self) -> usize {
        self.boxes.len()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn positions(&self) -> &[[u32; 3]] {
        &self.positions
    }

    pub fn range(&self, role: Role) -> Range<usize> {
        self.segments
            .iter()
            .find(|s| s.role == role)
            .map(|s| s.range.clone())
            .unwrap_or(0..0)
    }

    pub fn text(&self) -> Range<usize> {
        self.segments[0].range.clone()
    }

    pub fn cond(&self) -> Range<usize> {
        self.segments[1].range.clone()
    }

    pub fn background(&self) -> Range<usize> {
        self.segments[2].range.clone()
    }

    pub fn foreground(&self, j: usize) -> Range<usize> {
        self.segments[3 + j].range.clone()
    }

    /// All generation targets: background followed by every foreground.
    pub fn targets(&self) -> Range<usize> {
        self.segments[2].range.start..self.len()
    }

    pub fn role_of(&self, token: usize) -> Role {
        self.segments
            .iter()
            .find(|s| s.range.contains(&token))
            .map(|s| s.role)
            .expect("token index within layout")
    }

    /// Canvas-grid patch index of an image token (COND, BG or FG).
    pub fn patch_index(&self, token: usize) -> Option<usize> {
        match self.role_of(token) {
            Role::Text => None,
            _ => {
                let [_, y, x] = self.positions[token];
                Some(y as usize * self.grid.1 + x as usize)
            }
        }
    }

    /// Canvas-grid patch indices of foreground `j`, in token order.
    pub fn foreground_patches(&self, j: usize) -> Vec<usize> {
        box_patch_indices(&self.boxes[j], self.patch, self.grid.1)
    }

    /// Exchanges foregrounds `i` and `j` together with their boxes and
    /// positions. Both segments must hold the same number of tokens.
    pub fn swap_foregrounds(&self, i: usize, j: usize) -> Result<Self> {
        let (ri, rj) = (self.foreground(i), self.foreground(j));
        if ri.len() != rj.len() {
            return Err(Error::InvalidScene(format!(
                "foregrounds {i} and {j} have {} and {} tokens",
                ri.len(),
                rj.len()
            )));
        }
        let mut out = self.clone();
        out.boxes.swap(i, j);
        for (a, b) in ri.zip(rj) {
            out.positions.swap(a, b);
        }
        Ok(out)
    }

    /// Target segments (background first) as ranges relative to the start
    /// of the target block.
    pub fn target_layer_ranges(&self) -> Vec<Range<usize>> {
        let base = self.targets().start;
        self.segments[2..]
            .iter()
            .map(|s| s.range.start - base..s.range.end - base)
            .collect()
    }
}

/// Token data for the image segments of a [`TokenLayout`].
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceTokens<T: Element> {
    /// Condition tokens (the composite); never noised.
    pub cond: Tensor<T>,
    /// Background tokens, encoded as-is.
    pub background: Tensor<T>,
    /// Gray-converted foreground tokens cropped to each box.
    pub foregrounds: Vec<Tensor<T>>,
}

impl<T: Element> SequenceTokens<T> {
    /// Background then foregrounds stacked into one `[targets × token_dim]`
    /// tensor, matching [`TokenLayout::targets`].
    pub fn stacked_targets(&self) -> Tensor<T> {
        let cols = self.background.cols();
        let mut data = self.background.data().to_vec();
        for f in &self.foregrounds {
            data.extend_from_slice(f.data());
        }
        Tensor::new([data.len() / cols, cols], data).expect("consistent token widths")
    }
}

/// Encodes a scene into the unified sequence layout and its token data.
pub fn build_sequence<T: Element>(
    scene: &LayeredScene,
    patch: usize,
    k_text: usize,
) -> Result<(TokenLayout, SequenceTokens<T>)> {
    let (h, w) = (scene.height(), scene.width());
    let layout = TokenLayout::new(h, w, patch, k_text, &scene.boxes)?;
    let gw = layout.grid().1;
    let cond = patchify(&scene.composite, patch)?;
    let background = patchify(&scene.background, patch)?;
    let foregrounds = scene
        .foregrounds
        .iter()
        .zip(&scene.boxes)
        .map(|(fg, b)| {
            let grid = patchify(&gray_background_convert(fg), patch)?;
            select_tokens(&grid, b, patch, gw)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        layout,
        SequenceTokens {
            cond,
            background,
            foregrounds,
        },
    ))
}
