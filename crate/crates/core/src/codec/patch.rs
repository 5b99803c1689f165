//! Space-to-depth "latent" codec.
//!
//! A token holds one `p×p` patch, channels ordered `(row, col, rgba)`, and
//! tokens are laid out row-major over the patch grid. The codec is exactly
//! invertible, so decoding a predicted token grid is a permutation.

use revealtoy_tensor::{Element, Tensor};

use super::image::{BoundingBox, RgbaImage};
use crate::error::{Error, Result};

/// Channels per token for patch size `p`.
pub fn token_dim(patch: usize) -> usize {
    4 * patch * patch
}

/// Patch-grid extents `(rows, cols)` of an `height×width` image.
pub fn grid_dims(height: usize, width: usize, patch: usize) -> Result<(usize, usize)> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::SizeMismatch(format!(
            "{height}x{width} is not divisible by patch size {patch}"
        )));
    }
    Ok((height / patch, width / patch))
}

pub fn patchify<T: Element>(img: &RgbaImage, patch: usize) -> Result<Tensor<T>> {
    let (gh, gw) = grid_dims(img.height(), img.width(), patch)?;
    let td = token_dim(patch);
    let src = img.data();
    let mut out = Vec::with_capacity(gh * gw * td);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let row = (gy * patch + py) * img.width() + gx * patch;
                out.extend(src[row * 4..(row + patch) * 4].iter().map(|&v| T::from_f64(v)));
            }
        }
    }
    Ok(Tensor::new([gh * gw, td], out)?)
}

/// Inverse of [`patchify`] for a `grid_h × grid_w` token grid.
pub fn unpatchify<T: Element>(
    tokens: &[T],
    grid_h: usize,
    grid_w: usize,
    patch: usize,
) -> Result<RgbaImage> {
    let td = token_dim(patch);
    if tokens.len() != grid_h * grid_w * td {
        return Err(Error::SizeMismatch(format!(
            "{} token values for a {grid_h}x{grid_w} grid of {td}-channel tokens",
            tokens.len()
        )));
    }
    let (h, w) = (grid_h * patch, grid_w * patch);
    let mut data = vec![0.0; h * w * 4];
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let tok = &tokens[(gy * grid_w + gx) * td..(gy * grid_w + gx + 1) * td];
            for py in 0..patch {
                let row = (gy * patch + py) * w + gx * patch;
                for (dst, &v) in data[row * 4..(row + patch) * 4]
                    .iter_mut()
                    .zip(&tok[py * patch * 4..(py + 1) * patch * 4])
                {
                    *dst = v.as_f64();
                }
            }
        }
    }
    RgbaImage::new(h, w, data)
}

/// Canvas-grid token indices covered by a grid-aligned box, row-major
/// within the box.
pub fn box_patch_indices(b: &BoundingBox, patch: usize, grid_w: usize) -> Vec<usize> {
    let (x0, y0) = (b.x / patch, b.y / patch);
    let (bw, bh) = (b.w / patch, b.h / patch);
    (y0..y0 + bh)
        .flat_map(|gy| (x0..x0 + bw).map(move |gx| gy * grid_w + gx))
        .collect()
}

/// Selects the tokens of `grid` (a canvas token grid) that fall inside `b`.
pub fn select_tokens<T: Element>(
    grid: &Tensor<T>,
    b: &BoundingBox,
    patch: usize,
    grid_w: usize,
) -> Result<Tensor<T>> {
    let idx = box_patch_indices(b, patch, grid_w);
    let td = grid.cols();
    let mut out = Vec::with_capacity(idx.len() * td);
    for i in idx {
        if i >= grid.rows() {
            return Err(Error::InvalidBox {
                index: 0,
                reason: format!("{b:?} leaves the token grid"),
            });
        }
        out.extend_from_slice(grid.row(i));
    }
    Ok(Tensor::new([out.len() / td.max(1), td], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> RgbaImage {
        let data = (0..h * w * 4).map(|i| (i as f64 / (h * w * 4) as f64) * 2.0 - 1.0).collect();
        RgbaImage::new(h, w, data).unwrap()
    }

    #[test]
    fn four_by_four_patch_two() {
        let img = ramp(4, 4);
        let t = patchify::<f64>(&img, 2).unwrap();
        assert_eq!(t.shape(), &[4, 16]);
        let back = unpatchify(t.data(), 2, 2, 2).unwrap();
        assert_eq!(back, img);
        // first token = pixels (0,0),(0,1),(1,0),(1,1)
        let want: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
            .iter()
            .flat_map(|&(y, x)| img.pixel(y, x))
            .collect();
        assert_eq!(t.row(0), &want[..]);
    }

    #[test]
    fn patch_one_tokens_are_pixels() {
        let img = ramp(3, 5);
        let t = patchify::<f64>(&img, 1).unwrap();
        assert_eq!(t.shape(), &[15, 4]);
        assert_eq!(t.data(), img.data());
    }

    #[test]
    fn indivisible_dimensions_fail() {
        assert!(patchify::<f64>(&ramp(5, 4), 2).is_err());
    }

    #[test]
    fn crop_then_patchify_equals_token_select() {
        let img = ramp(8, 12);
        let grid = patchify::<f64>(&img, 2).unwrap();
        for b in [
            BoundingBox::new(2, 2, 4, 4),
            BoundingBox::new(0, 4, 12, 2),
            BoundingBox::new(6, 0, 2, 8),
        ] {
            let direct = patchify::<f64>(&img.crop(&b).unwrap(), 2).unwrap();
            let selected = select_tokens(&grid, &b, 2, 6).unwrap();
            assert_eq!(direct, selected);
        }
    }
}
