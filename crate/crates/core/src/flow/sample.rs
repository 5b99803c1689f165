//! Euler integration of the learned velocity field from noise to layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use revealtoy_tensor::{Element, Graph, Tensor};

use super::config::ModelConfig;
use super::loss::clean_estimate;
use super::net::{forward, Prepared};
use super::params::ParamStore;
use crate::codec::{patchify, select_tokens, unpatchify, BoundingBox, RgbaImage, TokenLayout};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleOptions {
    pub steps: usize,
    pub seed: u64,
    /// Crop every foreground's initial noise from one common canvas field.
    pub shared_noise: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            steps: 20,
            seed: 0,
            shared_noise: false,
        }
    }
}

/// Decoded layers: the full-canvas background and box-sized foregrounds in
/// the gray-converted domain, all clamped to [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub background: RgbaImage,
    pub foregrounds: Vec<RgbaImage>,
    pub boxes: Vec<BoundingBox>,
}

impl Decomposition {
    /// Foreground `j` placed on a transparent canvas.
    pub fn placed_foreground(&self, j: usize) -> Result<RgbaImage> {
        let (h, w) = (self.background.height(), self.background.width());
        RgbaImage::place(&self.foregrounds[j], &self.boxes[j], h, w)
    }
}

fn noise_field<T: Element>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<T> {
    let data = (0..rows * cols)
        .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new([rows, cols], data).expect("noise shape")
}

/// Initial `z_1` for every target token: a canvas-grid field for the
/// background, then per-foreground canvas fields cropped to each box (one
/// shared field when `shared`).
pub fn initial_noise<T: Element>(layout: &TokenLayout, seed: u64, shared: bool) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (g_len, td) = (layout.grid_len(), layout.token_dim());
    let (p, gw) = (layout.patch(), layout.grid().1);
    let bg: Tensor<T> = noise_field(&mut rng, g_len, td);
    let mut data = bg.data().to_vec();
    let common = shared.then(|| noise_field::<T>(&mut rng, g_len, td));
    for b in layout.boxes() {
        let field = match &common {
            Some(f) => f.clone(),
            None => noise_field(&mut rng, g_len, td),
        };
        data.extend_from_slice(select_tokens(&field, b, p, gw)?.data());
    }
    Ok(Tensor::new([layout.targets().len(), td], data)?)
}

/// Splits target tokens into decoded, clamped layers.
pub fn decode_targets<T: Element>(layout: &TokenLayout, tokens: &Tensor<T>) -> Result<Decomposition> {
    let ranges = layout.target_layer_ranges();
    let (p, td) = (layout.patch(), layout.token_dim());
    let (gh, gw) = layout.grid();
    let rows = |r: &std::ops::Range<usize>| &tokens.data()[r.start * td..r.end * td];
    let background = unpatchify(rows(&ranges[0]), gh, gw, p)?.clamped();
    let foregrounds = layout
        .boxes()
        .iter()
        .zip(&ranges[1..])
        .map(|(b, r)| Ok(unpatchify(rows(r), b.h / p, b.w / p, p)?.clamped()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Decomposition {
        background,
        foregrounds,
        boxes: layout.boxes().to_vec(),
    })
}

/// Prepares the forward-pass constants for decomposing `composite`.
pub fn prepare_inference<T: Element>(
    cfg: &ModelConfig,
    composite: &RgbaImage,
    boxes: &[BoundingBox],
) -> Result<Prepared<T>> {
    if composite.height() != cfg.canvas || composite.width() != cfg.canvas {
        return Err(Error::SizeMismatch(format!(
            "image is {}x{}, the model expects {}x{}",
            composite.height(),
            composite.width(),
            cfg.canvas,
            cfg.canvas
        )));
    }
    let layout = TokenLayout::new(cfg.canvas, cfg.canvas, cfg.patch, cfg.k_text, boxes)?;
    let cond = patchify::<T>(composite, cfg.patch)?;
    Prepared::new(cfg, layout, cond)
}

/// Velocity prediction without gradient bookkeeping.
pub fn predict_velocity<T: Element>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    prep: &Prepared<T>,
    z_t: &Tensor<T>,
    t: f64,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g)?;
    let z = g.constant(z_t.clone())?;
    let out = forward(&mut g, &bound, cfg, prep, z, t)?;
    Ok(g.value(out.velocity).clone())
}

/// Euler sampler that reports the clean estimate `ẑ = z_t − t·v̂` after
/// each step to `observe(step, t, ẑ)`.
pub fn sample_euler_observed<T: Element>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    composite: &RgbaImage,
    boxes: &[BoundingBox],
    opts: &SampleOptions,
    mut observe: impl FnMut(usize, f64, &Tensor<T>) -> Result<()>,
) -> Result<Decomposition> {
    if opts.steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    let prep = prepare_inference::<T>(cfg, composite, boxes)?;
    let mut z = initial_noise::<T>(&prep.layout, opts.seed, opts.shared_noise)?;
    let n = opts.steps;
    for i in 0..n {
        let t = 1.0 - i as f64 / n as f64;
        let t_next = 1.0 - (i + 1) as f64 / n as f64;
        let v = predict_velocity(params, cfg, &prep, &z, t)?;
        let z_hat = clean_estimate(&z, &v, t)?;
        observe(i, t, &z_hat)?;
        // on the last step t_next = 0, so this is exactly ẑ
        let dt = T::from_f64(t - t_next);
        let next: Vec<T> = z.data().iter().zip(v.data()).map(|(&a, &u)| a - dt * u).collect();
        z = Tensor::new(z.shape().to_vec(), next)?;
    }
    decode_targets(&prep.layout, &z)
}

pub fn sample_euler<T: Element>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    composite: &RgbaImage,
    boxes: &[BoundingBox],
    opts: &SampleOptions,
) -> Result<Decomposition> {
    sample_euler_observed(params, cfg, composite, boxes, opts, |_, _, _| Ok(()))
}
