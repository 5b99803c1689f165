//! Three-axis rotary position embedding over `(layer, y, x)` coordinates.

use revealtoy_tensor::{Element, RotaryTable, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel split of a head between the layer, vertical and horizontal axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RopeSplit {
    pub layer: usize,
    pub y: usize,
    pub x: usize,
}

impl RopeSplit {
    pub fn new(layer: usize, y: usize, x: usize) -> Self {
        RopeSplit { layer, y, x }
    }

    pub fn head_dim(&self) -> usize {
        self.layer + self.y + self.x
    }

    pub fn validate(&self, head_dim: usize) -> Result<()> {
        if !self.layer.is_multiple_of(2) || !self.y.is_multiple_of(2) || !self.x.is_multiple_of(2) {
            return Err(Error::Config(format!("rope split {self:?} has an odd group")));
        }
        if self.head_dim() != head_dim {
            return Err(Error::Config(format!(
                "rope split {self:?} sums to {}, head dim is {head_dim}",
                self.head_dim()
            )));
        }
        Ok(())
    }
}

/// Rotation angles `[tokens × head_dim/2]`. Within an axis group of `g`
/// channels, pair `j` turns by `pos · theta^(−2j/g)`.
pub fn rope_angles(positions: &[[u32; 3]], split: RopeSplit, theta: f64) -> Vec<f64> {
    let groups = [split.layer, split.y, split.x];
    let freqs: Vec<(usize, f64)> = groups
        .iter()
        .enumerate()
        .flat_map(|(axis, &g)| {
            (0..g / 2).map(move |j| (axis, theta.powf(-2.0 * j as f64 / g as f64)))
        })
        .collect();
    positions
        .iter()
        .flat_map(|pos| freqs.iter().map(move |&(axis, f)| pos[axis] as f64 * f))
        .collect()
}

pub fn rope_table<T: Element>(
    positions: &[[u32; 3]],
    split: RopeSplit,
    theta: f64,
) -> RotaryTable<T> {
    let pairs = split.head_dim() / 2;
    RotaryTable::from_angles(positions.len(), pairs, &rope_angles(positions, split, theta))
}

/// Rotates every head of `x: [tokens × heads·head_dim]` by its token's
/// 3-axis position.
pub fn apply_rope<T: Element>(
    x: &Tensor<T>,
    positions: &[[u32; 3]],
    split: RopeSplit,
    theta: f64,
) -> Result<Tensor<T>> {
    let hd = split.head_dim();
    split.validate(hd)?;
    if x.rank() != 2 || x.rows() != positions.len() || hd == 0 || !x.cols().is_multiple_of(hd) {
        return Err(Error::Config(format!(
            "apply_rope: input {:?} vs {} positions, head dim {hd}",
            x.shape(),
            positions.len()
        )));
    }
    let table = rope_table::<T>(positions, split, theta);
    let out = table.apply(x.data(), x.cols(), false);
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}
