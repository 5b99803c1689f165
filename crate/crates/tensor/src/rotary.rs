use crate::element::Element;

/// Per-row rotation angles for rotary position embeddings.
///
/// Row `r` rotates channel pair `(2j, 2j+1)` of every head by the angle
/// whose cosine/sine are stored at `r * pairs + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct RotaryTable<T: Element> {
    rows: usize,
    pairs: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Element> RotaryTable<T> {
    /// `angles` is row-major `[rows × pairs]`.
    pub fn from_angles(rows: usize, pairs: usize, angles: &[f64]) -> Self {
        assert_eq!(angles.len(), rows * pairs, "rotary angle table size");
        RotaryTable {
            rows,
            pairs,
            cos: angles.iter().map(|a| T::from_f64(a.cos())).collect(),
            sin: angles.iter().map(|a| T::from_f64(a.sin())).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Head dimension this table rotates.
    pub fn head_dim(&self) -> usize {
        self.pairs * 2
    }

    /// Rotates `x` laid out as `[rows × heads·head_dim]`. `inverse` applies
    /// the transpose rotation, which is the adjoint used by backward.
    pub fn apply(&self, x: &[T], width: usize, inverse: bool) -> Vec<T> {
        let hd = self.head_dim();
        let mut out = vec![T::zero(); x.len()];
        for r in 0..self.rows {
            let cs = &self.cos[r * self.pairs..(r + 1) * self.pairs];
            let sn = &self.sin[r * self.pairs..(r + 1) * self.pairs];
            for h in 0..width / hd {
                let off = r * width + h * hd;
                for j in 0..self.pairs {
                    let (a, b) = (x[off + 2 * j], x[off + 2 * j + 1]);
                    let (c, s) = (cs[j], if inverse { -sn[j] } else { sn[j] });
                    out[off + 2 * j] = a * c - b * s;
                    out[off + 2 * j + 1] = a * s + b * c;
                }
            }
        }
        out
    }
}
