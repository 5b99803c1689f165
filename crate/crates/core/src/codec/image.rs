use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest per-channel deviation accepted between a stored composite and
/// the re-composited layers (signed value range).
pub const COMPOSITE_TOL: f64 = 1.0 / 255.0;

/// Interleaved RGBA image with channel values in the signed range [-1, +1].
///
/// Alpha -1 is fully transparent and +1 fully opaque.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbaImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Maps a signed alpha to opacity in [0, 1].
#[inline]
pub fn opacity(alpha: f64) -> f64 {
    (alpha + 1.0) * 0.5
}

impl RgbaImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 4 {
            return Err(Error::SizeMismatch(format!(
                "{height}x{width} RGBA needs {} values, got {}",
                height * width * 4,
                data.len()
            )));
        }
        Ok(RgbaImage {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, px: [f64; 4]) -> Self {
        let data = std::iter::repeat_n(px, height * width).flatten().collect();
        RgbaImage {
            height,
            width,
            data,
        }
    }

    /// Fully transparent black.
    pub fn transparent(height: usize, width: usize) -> Self {
        Self::filled(height, width, [0.0, 0.0, 0.0, -1.0])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 4] {
        let i = (y * self.width + x) * 4;
        [
            self.data[i],
            self.data[i + 1],
            self.data[i + 2],
            self.data[i + 3],
        ]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, px: [f64; 4]) {
        let i = (y * self.width + x) * 4;
        self.data[i..i + 4].copy_from_slice(&px);
    }

    pub fn same_size(&self, other: &RgbaImage) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Per-pixel opacity map in [0, 1].
    pub fn opacity_map(&self) -> Vec<f64> {
        self.data.chunks(4).map(|p| opacity(p[3])).collect()
    }

    pub fn clamped(&self) -> RgbaImage {
        RgbaImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
        }
    }

    pub fn crop(&self, b: &BoundingBox) -> Result<RgbaImage> {
        b.check_inside(self.height, self.width, 0)?;
        let mut data = Vec::with_capacity(b.w * b.h * 4);
        for y in b.y..b.y + b.h {
            let start = (y * self.width + b.x) * 4;
            data.extend_from_slice(&self.data[start..start + b.w * 4]);
        }
        RgbaImage::new(b.h, b.w, data)
    }

    /// Places `crop` at the box position of a transparent canvas.
    pub fn place(crop: &RgbaImage, b: &BoundingBox, height: usize, width: usize) -> Result<RgbaImage> {
        if crop.height != b.h || crop.width != b.w {
            return Err(Error::SizeMismatch(format!(
                "crop {}x{} for box {}x{}",
                crop.height, crop.width, b.h, b.w
            )));
        }
        b.check_inside(height, width, 0)?;
        let mut out = RgbaImage::transparent(height, width);
        for y in 0..b.h {
            let dst = ((b.y + y) * width + b.x) * 4;
            let src = y * b.w * 4;
            out.data[dst..dst + b.w * 4].copy_from_slice(&crop.data[src..src + b.w * 4]);
        }
        Ok(out)
    }

    /// Largest absolute per-channel difference.
    pub fn max_abs_diff(&self, other: &RgbaImage) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Luma in [0, 1] after mapping RGB to [0, 1].
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks(4)
            .map(|p| {
                0.299 * opacity(p[0]) + 0.587 * opacity(p[1]) + 0.114 * opacity(p[2])
            })
            .collect()
    }
}

/// Axis-aligned box in pixels, top-left origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BoundingBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        BoundingBox { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.h && x >= self.x && x < self.x + self.w
    }

    /// Validates non-emptiness, canvas containment and (when `patch > 1`)
    /// grid alignment. `index` is only used for error reporting.
    pub fn check_inside(&self, height: usize, width: usize, index: usize) -> Result<()> {
        if self.w == 0 || self.h == 0 {
            return Err(Error::InvalidBox {
                index,
                reason: "empty extent".into(),
            });
        }
        if self.x + self.w > width || self.y + self.h > height {
            return Err(Error::InvalidBox {
                index,
                reason: format!("{self:?} exceeds {height}x{width} canvas"),
            });
        }
        Ok(())
    }

    pub fn check_snapped(&self, patch: usize, index: usize) -> Result<()> {
        if !self.x.is_multiple_of(patch) || !self.y.is_multiple_of(patch) || !self.w.is_multiple_of(patch) || !self.h.is_multiple_of(patch) {
            return Err(Error::InvalidBox {
                index,
                reason: format!("{self:?} is not aligned to the {patch}px grid"),
            });
        }
        Ok(())
    }

    /// Expands the box outward to the patch grid and clips it to the canvas.
    pub fn snap_outward(&self, patch: usize, height: usize, width: usize) -> BoundingBox {
        let x0 = (self.x / patch) * patch;
        let y0 = (self.y / patch) * patch;
        let x1 = (self.x + self.w).div_ceil(patch) * patch;
        let y1 = (self.y + self.h).div_ceil(patch) * patch;
        let (x1, y1) = (x1.min(width), y1.min(height));
        BoundingBox::new(x0, y0, x1.saturating_sub(x0), y1.saturating_sub(y0))
    }

    pub fn intersection(&self, other: &BoundingBox) -> Option<BoundingBox> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        (x1 > x0 && y1 > y0).then(|| BoundingBox::new(x0, y0, x1 - x0, y1 - y0))
    }
}

/// Back-to-front alpha-over of `foregrounds` onto `background`.
///
/// Each layer contributes `a'·F + (1 − a')·C_below` with `a' = (α + 1)/2`.
/// The background is treated as opaque and the result alpha is +1.
pub fn composite_layers(background: &RgbaImage, foregrounds: &[RgbaImage]) -> Result<RgbaImage> {
    if let Some(bad) = foregrounds.iter().find(|f| !f.same_size(background)) {
        return Err(Error::SizeMismatch(format!(
            "foreground {}x{} over background {}x{}",
            bad.height, bad.width, background.height, background.width
        )));
    }
    let mut out = background.clone();
    for px in out.data.chunks_mut(4) {
        px[3] = 1.0;
    }
    for fg in foregrounds {
        for (c, f) in out.data.chunks_mut(4).zip(fg.data.chunks(4)) {
            let a = opacity(f[3]);
            for ch in 0..3 {
                c[ch] = a * f[ch] + (1.0 - a) * c[ch];
            }
        }
    }
    Ok(out)
}

/// Renders transparent regions as mid-gray: `RGB ← (0.5·α + 0.5)·RGB`,
/// alpha unchanged.
pub fn gray_background_convert(fg: &RgbaImage) -> RgbaImage {
    let mut out = fg.clone();
    for px in out.data.chunks_mut(4) {
        let f = 0.5 * px[3] + 0.5;
        px[0] *= f;
        px[1] *= f;
        px[2] *= f;
    }
    out
}

/// Ground-truth layered scene: composite, background and back-to-front
/// foregrounds, each foreground with its box.
#[derive(Clone, Debug, PartialEq)]
pub struct LayeredScene {
    pub composite: RgbaImage,
    pub background: RgbaImage,
    pub foregrounds: Vec<RgbaImage>,
    pub boxes: Vec<BoundingBox>,
}

impl LayeredScene {
    /// Builds a scene and checks all of its invariants.
    pub fn new(
        composite: RgbaImage,
        background: RgbaImage,
        foregrounds: Vec<RgbaImage>,
        boxes: Vec<BoundingBox>,
    ) -> Result<Self> {
        let scene = LayeredScene {
            composite,
            background,
            foregrounds,
            boxes,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn layer_count(&self) -> usize {
        self.foregrounds.len()
    }

    pub fn height(&self) -> usize {
        self.composite.height
    }

    pub fn width(&self) -> usize {
        self.composite.width
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.foregrounds.len();
        if n == 0 {
            return Err(Error::InvalidScene("no foreground layers".into()));
        }
        if self.boxes.len() != n {
            return Err(Error::InvalidScene(format!(
                "{n} foregrounds but {} boxes",
                self.boxes.len()
            )));
        }
        let (h, w) = (self.height(), self.width());
        if !self.background.same_size(&self.composite) {
            return Err(Error::SizeMismatch("background vs composite".into()));
        }
        for (i, (fg, b)) in self.foregrounds.iter().zip(&self.boxes).enumerate() {
            b.check_inside(h, w, i)?;
            if !fg.same_size(&self.composite) {
                return Err(Error::SizeMismatch(format!("foreground {i} vs composite")));
            }
            for y in 0..h {
                for x in 0..w {
                    if !b.contains(y, x) && fg.pixel(y, x)[3] > -1.0 {
                        return Err(Error::InvalidScene(format!(
                            "foreground {i} is visible at ({y},{x}) outside its box"
                        )));
                    }
                }
            }
        }
        if self
            .composite
            .data
            .iter()
            .chain(&self.background.data)
            .chain(self.foregrounds.iter().flat_map(|f| f.data.iter()))
            .any(|v| !(-1.0..=1.0).contains(v))
        {
            return Err(Error::InvalidScene("channel value outside [-1, 1]".into()));
        }
        let oracle = composite_layers(&self.background, &self.foregrounds)?;
        let err = oracle.max_abs_diff(&self.composite);
        if err > COMPOSITE_TOL + 1e-9 {
            return Err(Error::InvalidScene(format!(
                "composite deviates from its layers by {err}"
            )));
        }
        Ok(())
    }
}
