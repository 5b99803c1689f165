//! Rectified-flow interpolation and the three training losses, built on
//! the autodiff graph.

use std::ops::Range;
use std::sync::Arc;

use revealtoy_tensor::{Element, Graph, Tensor, Var};

use super::config::LossConfig;
use crate::codec::{box_patch_indices, TokenLayout};
use crate::error::{Error, Result};

/// `z_t = t·ε + (1−t)·x` and the velocity `v = ε − x`. Noise sits at t = 1.
pub fn interpolate<T: Element>(
    x: &Tensor<T>,
    eps: &Tensor<T>,
    t: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("t = {t} lies outside [0, 1]")));
    }
    if x.shape() != eps.shape() {
        return Err(Error::SizeMismatch(format!(
            "data {:?} vs noise {:?}",
            x.shape(),
            eps.shape()
        )));
    }
    let (tt, one_t) = (T::from_f64(t), T::from_f64(1.0 - t));
    let zt = x.data().iter().zip(eps.data()).map(|(&a, &e)| tt * e + one_t * a).collect();
    let v = x.data().iter().zip(eps.data()).map(|(&a, &e)| e - a).collect();
    Ok((
        Tensor::new(x.shape().to_vec(), zt)?,
        Tensor::new(x.shape().to_vec(), v)?,
    ))
}

/// `ẑ = z_t − t·v̂`
pub fn clean_estimate<T: Element>(z_t: &Tensor<T>, v: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    if z_t.shape() != v.shape() {
        return Err(Error::SizeMismatch(format!("{:?} vs {:?}", z_t.shape(), v.shape())));
    }
    let tt = T::from_f64(t);
    let data = z_t.data().iter().zip(v.data()).map(|(&z, &u)| z - tt * u).collect();
    Ok(Tensor::new(z_t.shape().to_vec(), data)?)
}

pub fn clean_estimate_var<T: Element>(g: &mut Graph<T>, z_t: Var, v: Var, t: f64) -> Result<Var> {
    let tv = g.scale(v, t)?;
    Ok(g.sub(z_t, tv)?)
}

/// Sum over layers of the per-layer mean squared error. `layers` index
/// rows of both inputs.
pub fn fm_loss<T: Element>(
    g: &mut Graph<T>,
    v_hat: Var,
    v_true: Var,
    layers: &[Range<usize>],
) -> Result<Var> {
    let mut terms = Vec::with_capacity(layers.len());
    for r in layers {
        let a = g.slice_rows(v_hat, r.start, r.end)?;
        let b = g.slice_rows(v_true, r.start, r.end)?;
        let d = g.sub(a, b)?;
        let sq = g.mul(d, d)?;
        terms.push(g.mean(sq)?);
    }
    sum_scalars(g, &terms)
}

fn sum_scalars<T: Element>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    match terms {
        [] => Ok(g.constant(Tensor::scalar(T::zero()))?),
        [first, rest @ ..] => {
            let mut acc = *first;
            for &t in rest {
                acc = g.add(acc, t)?;
            }
            Ok(acc)
        }
    }
}

/// Per-pixel channel view `[tokens·p² × 4]` of token rows `r`, sliced to
/// channels `c0..c1`.
fn pixel_channels<T: Element>(
    g: &mut Graph<T>,
    tokens: Var,
    patch: usize,
    c0: usize,
    c1: usize,
) -> Result<Var> {
    let n = g.shape(tokens)[0];
    let px = g.reshape(tokens, &[n * patch * patch, 4])?;
    Ok(g.slice_cols(px, c0, c1)?)
}

/// Hard-constraint alpha loss over the foreground layers.
///
/// Alphas are mapped to opacity `a' = (α+1)/2` (the prediction clamped to
/// [0, 1]), `δ = τ·|â' − a'|`, and each layer contributes the pixel mean
/// of `−δ^γ · ln(1 − δ + ε)`.
pub fn alpha_loss<T: Element>(
    g: &mut Graph<T>,
    z_hat: Var,
    z_gt: Var,
    fg_layers: &[Range<usize>],
    patch: usize,
    cfg: &LossConfig,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(fg_layers.len());
    for r in fg_layers {
        if r.is_empty() {
            continue;
        }
        let pred = g.slice_rows(z_hat, r.start, r.end)?;
        let gt = g.slice_rows(z_gt, r.start, r.end)?;
        let pa = pixel_channels(g, pred, patch, 3, 4)?;
        let ga = pixel_channels(g, gt, patch, 3, 4)?;
        let pa = g.scale(pa, 0.5)?;
        let pa = g.add_scalar(pa, 0.5)?;
        let pa = g.clamp(pa, 0.0, 1.0)?;
        let ga = g.scale(ga, 0.5)?;
        let ga = g.add_scalar(ga, 0.5)?;
        let diff = g.sub(pa, ga)?;
        let diff = g.abs(diff)?;
        let delta = g.scale(diff, cfg.tau)?;
        let dg = g.powf(delta, cfg.gamma)?;
        let nd = g.neg(delta)?;
        let arg = g.add_scalar(nd, 1.0 + cfg.eps_log)?;
        let lg = g.ln(arg)?;
        let prod = g.mul(dg, lg)?;
        let m = g.mean(prod)?;
        terms.push(g.neg(m)?);
    }
    sum_scalars(g, &terms)
}

/// Mean over pixels of `cos(a, b) = a·b / (‖a‖‖b‖ + ε)`, with pixels
/// where either norm is below `ε` counting as 0. `a, b: [P × 3]`.
pub fn mean_cosine<T: Element>(g: &mut Graph<T>, a: Var, b: Var, eps: f64) -> Result<Var> {
    let ab = g.mul(a, b)?;
    let dot = g.sum_last(ab)?;
    let aa = g.mul(a, a)?;
    let na2 = g.sum_last(aa)?;
    let bb = g.mul(b, b)?;
    let nb2 = g.sum_last(bb)?;
    let keep: Vec<T> = g
        .value(na2)
        .data()
        .iter()
        .zip(g.value(nb2).data())
        .map(|(&x, &y)| {
            let ok = x.as_f64().sqrt() >= eps && y.as_f64().sqrt() >= eps;
            if ok {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    let n = keep.len();
    let keep = g.constant(Tensor::new([n, 1], keep)?)?;
    // clamping before the root keeps the masked pixels' gradients finite
    let na2 = g.clamp(na2, eps * eps, f64::INFINITY)?;
    let na = g.sqrt(na2)?;
    let nb2 = g.clamp(nb2, eps * eps, f64::INFINITY)?;
    let nb = g.sqrt(nb2)?;
    let den = g.mul(na, nb)?;
    let den = g.add_scalar(den, eps)?;
    let cos = g.div(dot, den)?;
    let cos = g.mul(cos, keep)?;
    Ok(g.mean(cos)?)
}

/// Mean background/foreground RGB cosine inside each box, for one set of
/// target tokens (`[targets × 4p²]`, background first).
fn region_similarities<T: Element>(
    g: &mut Graph<T>,
    z: Var,
    layout: &TokenLayout,
    eps: f64,
) -> Result<Vec<Option<Var>>> {
    let ranges = layout.target_layer_ranges();
    let bg = g.slice_rows(z, ranges[0].start, ranges[0].end)?;
    let p = layout.patch();
    let mut out = Vec::with_capacity(ranges.len() - 1);
    for (j, r) in ranges[1..].iter().enumerate() {
        let idx = box_patch_indices(&layout.boxes()[j], p, layout.grid().1);
        if idx.is_empty() || r.is_empty() {
            out.push(None);
            continue;
        }
        let bg_j = g.gather_rows(bg, Arc::new(idx))?;
        let fg_j = g.slice_rows(z, r.start, r.end)?;
        let a = pixel_channels(g, bg_j, p, 0, 3)?;
        let b = pixel_channels(g, fg_j, p, 0, 3)?;
        out.push(Some(mean_cosine(g, a, b, eps)?));
    }
    Ok(out)
}

/// `Σ_j |sim_j(prediction) − sim_j(ground truth)|` over the boxes.
pub fn orth_loss<T: Element>(
    g: &mut Graph<T>,
    z_hat: Var,
    z_gt: Var,
    layout: &TokenLayout,
    cfg: &LossConfig,
) -> Result<Var> {
    let pred = region_similarities(g, z_hat, layout, cfg.eps_cos)?;
    let gt = region_similarities(g, z_gt, layout, cfg.eps_cos)?;
    let mut terms = Vec::new();
    for (p, q) in pred.into_iter().zip(gt) {
        if let (Some(p), Some(q)) = (p, q) {
            let d = g.sub(p, q)?;
            terms.push(g.abs(d)?);
        }
    }
    sum_scalars(g, &terms)
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub fm: Var,
    pub alpha: Var,
    pub orth: Var,
    pub total: Var,
}

impl LossParts {
    pub fn values<T: Element>(&self, g: &Graph<T>) -> LossValues {
        let get = |v: Var| g.value(v).item().as_f64();
        LossValues {
            fm: get(self.fm),
            alpha: get(self.alpha),
            orth: get(self.orth),
            total: get(self.total),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossValues {
    pub fm: f64,
    pub alpha: f64,
    pub orth: f64,
    pub total: f64,
}

/// `L = L_fm + λ_α·L_α + λ_o·L_orth` for one sample.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Element>(
    g: &mut Graph<T>,
    v_hat: Var,
    v_true: Var,
    z_t: Var,
    z_gt: Var,
    t: f64,
    layout: &TokenLayout,
    cfg: &LossConfig,
) -> Result<LossParts> {
    let ranges = layout.target_layer_ranges();
    let fm = fm_loss(g, v_hat, v_true, &ranges)?;
    let z_hat = clean_estimate_var(g, z_t, v_hat, t)?;
    let alpha = alpha_loss(g, z_hat, z_gt, &ranges[1..], layout.patch(), cfg)?;
    let orth = orth_loss(g, z_hat, z_gt, layout, cfg)?;
    let wa = g.scale(alpha, cfg.lambda_alpha)?;
    let wo = g.scale(orth, cfg.lambda_orth)?;
    let total = g.add(fm, wa)?;
    let total = g.add(total, wo)?;
    Ok(LossParts {
        fm,
        alpha,
        orth,
        total,
    })
}
