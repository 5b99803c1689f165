//! Image and matte metrics, decomposition scoring and the box-robustness
//! sweep.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use revealtoy_tensor::{Element, Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::codec::{gray_background_convert, patchify, LayeredScene, RgbaImage, TokenLayout};
use crate::error::{io_err, json_err, Error, Result};
use crate::flow::{
    orth_loss, sample_euler, sample_euler_observed, Decomposition, LossConfig, ModelConfig,
    ParamStore, SampleOptions,
};
use crate::synth::{perturb_boxes, scene_seed, BoxVariant, ROBUSTNESS_VARIANTS};

pub const PSNR_CAP: f64 = 99.0;
/// Peak-to-peak range of signed pixel values.
pub const SIGNED_RANGE: f64 = 2.0;

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "mse inputs differ in length");
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `10·log10(max²/MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f64], b: &[f64], max_val: f64) -> f64 {
    let m = mse(a, b);
    if m == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (max_val * max_val / m).log10()).min(PSNR_CAP)
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WIN / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WIN * SSIM_WIN)
        .map(|i| {
            let (y, x) = ((i / SSIM_WIN) as f64 - c, (i % SSIM_WIN) as f64 - c);
            (-(x * x + y * y) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Windowed SSIM of two `h×w` grayscale images with value range `range`,
/// averaged over every fully contained 11×11 Gaussian window.
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> Result<f64> {
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(Error::SizeMismatch(format!("ssim needs at least 11x11, got {h}x{w}")));
    }
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::SizeMismatch("ssim inputs do not match the given size".into()));
    }
    let win = gaussian_window();
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let (oh, ow) = (h - SSIM_WIN + 1, w - SSIM_WIN + 1);
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WIN {
                for dx in 0..SSIM_WIN {
                    let k = win[dy * SSIM_WIN + dx];
                    let i = (y + dy) * w + x + dx;
                    ma += k * a[i];
                    mb += k * b[i];
                    aa += k * a[i] * a[i];
                    bb += k * b[i] * b[i];
                    ab += k * a[i] * b[i];
                }
            }
            let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// `Σ min(a,b) / Σ max(a,b)`; 1 when both maps are empty.
pub fn soft_iou(a: &[f64], b: &[f64]) -> f64 {
    let (mut lo, mut hi) = (0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        lo += x.min(y);
        hi += x.max(y);
    }
    if hi == 0.0 {
        1.0
    } else {
        lo / hi
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MattingErrors {
    /// Sum of absolute differences divided by 1000.
    pub sad: f64,
    pub mad: f64,
    pub mse: f64,
}

pub fn matting_errors(pred: &[f64], gt: &[f64]) -> MattingErrors {
    let n = pred.len().max(1) as f64;
    let sum: f64 = pred.iter().zip(gt).map(|(a, b)| (a - b).abs()).sum();
    MattingErrors {
        sad: sum / 1000.0,
        mad: sum / n,
        mse: mse(pred, gt),
    }
}

/// `ln(var(L ∗ img) + 1e-12)` with the 4-neighbour Laplacian over the
/// valid region.
pub fn texture_logvar_laplacian(img: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < 3 || w < 3 || img.len() != h * w {
        return Err(Error::SizeMismatch(format!("laplacian needs at least 3x3, got {h}x{w}")));
    }
    let mut resp = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let c = img[y * w + x];
            resp.push(img[(y - 1) * w + x] + img[(y + 1) * w + x] + img[y * w + x - 1] + img[y * w + x + 1] - 4.0 * c);
        }
    }
    let n = resp.len() as f64;
    let mean = resp.iter().sum::<f64>() / n;
    let var = resp.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    Ok((var + 1e-12).ln())
}

fn rgb(img: &RgbaImage) -> Vec<f64> {
    img.data().chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect()
}

/// Per-scene metrics. Foreground values are averaged over the scene's
/// layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub bg_psnr: f64,
    pub bg_ssim: f64,
    pub fg_psnr: f64,
    pub fg_soft_iou: f64,
    pub fg_sad: f64,
    pub fg_mad: f64,
    pub fg_mse: f64,
}

impl SceneMetrics {
    fn fields(&self) -> [f64; 7] {
        [self.bg_psnr, self.bg_ssim, self.fg_psnr, self.fg_soft_iou, self.fg_sad, self.fg_mad, self.fg_mse]
    }

    fn from_fields(f: [f64; 7]) -> Self {
        SceneMetrics {
            bg_psnr: f[0],
            bg_ssim: f[1],
            fg_psnr: f[2],
            fg_soft_iou: f[3],
            fg_sad: f[4],
            fg_mad: f[5],
            fg_mse: f[6],
        }
    }

    /// Arithmetic mean; all zeros for an empty slice.
    pub fn mean(items: &[SceneMetrics]) -> SceneMetrics {
        let mut acc = [0.0; 7];
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.fields()) {
                *a += v;
            }
        }
        let n = items.len().max(1) as f64;
        SceneMetrics::from_fields(acc.map(|v| v / n))
    }
}

impl Decomposition {
    /// The exact ground-truth layers, cropped to the scene's boxes.
    pub fn from_ground_truth(scene: &LayeredScene) -> Result<Self> {
        let foregrounds = scene
            .foregrounds
            .iter()
            .zip(&scene.boxes)
            .map(|(f, b)| gray_background_convert(f).crop(b))
            .collect::<Result<Vec<_>>>()?;
        Ok(Decomposition {
            background: scene.background.clone(),
            foregrounds,
            boxes: scene.boxes.clone(),
        })
    }
}

/// Scores a decomposition against ground truth. Foregrounds are compared on
/// the canvas (prediction placed at its own, possibly perturbed, box):
/// opacity maps over the whole canvas, gray RGB over the true box.
pub fn score_decomposition(pred: &Decomposition, scene: &LayeredScene) -> Result<SceneMetrics> {
    if pred.foregrounds.len() != scene.layer_count() {
        return Err(Error::InvalidScene(format!(
            "{} predicted layers for {} ground-truth layers",
            pred.foregrounds.len(),
            scene.layer_count()
        )));
    }
    let (h, w) = (scene.height(), scene.width());
    let bg_psnr = psnr(&rgb(&pred.background), &rgb(&scene.background), SIGNED_RANGE);
    let bg_ssim = ssim(&pred.background.luma(), &scene.background.luma(), h, w, 1.0)?;
    let mut fg = Vec::with_capacity(scene.layer_count());
    for j in 0..scene.layer_count() {
        let placed = pred.placed_foreground(j)?;
        let gt = gray_background_convert(&scene.foregrounds[j]);
        let b = &scene.boxes[j];
        let p_rgb = rgb(&placed.crop(b)?);
        let g_rgb = rgb(&gt.crop(b)?);
        let pa: Vec<f64> = placed.opacity_map();
        let ga: Vec<f64> = gt.opacity_map();
        let me = matting_errors(&pa, &ga);
        fg.push([psnr(&p_rgb, &g_rgb, SIGNED_RANGE), soft_iou(&pa, &ga), me.sad, me.mad, me.mse]);
    }
    let n = fg.len() as f64;
    let avg = |k: usize| fg.iter().map(|r| r[k]).sum::<f64>() / n;
    Ok(SceneMetrics {
        bg_psnr,
        bg_ssim,
        fg_psnr: avg(0),
        fg_soft_iou: avg(1),
        fg_sad: avg(2),
        fg_mad: avg(3),
        fg_mse: avg(4),
    })
}

/// Orthogonality loss of decoded (clamped) target tokens against the
/// ground-truth layers of `layout`.
pub fn orth_of_tokens<T: Element>(
    layout: &TokenLayout,
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<f64> {
    let (lo, hi) = (T::from_f64(-1.0), T::one());
    let clamped = pred.map(|v| v.max(lo).min(hi));
    let mut g = Graph::new();
    let p = g.constant(clamped)?;
    let q = g.constant(gt.clone())?;
    let l = orth_loss(&mut g, p, q, layout, cfg)?;
    Ok(g.value(l).item().as_f64())
}

/// Ground-truth target tokens of a scene, background first.
fn gt_targets<T: Element>(cfg: &ModelConfig, scene: &LayeredScene) -> Result<(TokenLayout, Tensor<T>)> {
    let (layout, tokens) = crate::codec::build_sequence::<T>(scene, cfg.patch, cfg.k_text)?;
    Ok((layout, tokens.stacked_targets()))
}

/// `L_orth` of the decoded clean estimate after every sampler step.
pub fn orth_trajectory<T: Element>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    scene: &LayeredScene,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let (layout, gt) = gt_targets::<T>(cfg, scene)?;
    let mut series = Vec::with_capacity(steps);
    let opts = SampleOptions {
        steps,
        seed,
        shared_noise: false,
    };
    sample_euler_observed(params, cfg, &scene.composite, &scene.boxes, &opts, |_, _, z_hat| {
        series.push(orth_of_tokens(&layout, z_hat, &gt, loss_cfg)?);
        Ok(())
    })?;
    Ok(series)
}

/// Orthogonality loss of a finished decomposition.
pub fn orth_of_decomposition<T: Element>(
    cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    pred: &Decomposition,
    scene: &LayeredScene,
) -> Result<f64> {
    let (layout, gt) = gt_targets::<T>(cfg, scene)?;
    let mut data = patchify::<T>(&pred.background, cfg.patch)?.data().to_vec();
    for f in &pred.foregrounds {
        data.extend_from_slice(patchify::<T>(f, cfg.patch)?.data());
    }
    let pred_tokens = Tensor::new(gt.shape().to_vec(), data)?;
    orth_of_tokens(&layout, &pred_tokens, &gt, loss_cfg)
}

/// Per-scene sampler seed derived from the run seed.
pub fn scene_sample_seed(seed: u64, index: usize) -> u64 {
    scene_seed(seed, index as u64)
}

/// Decomposes every scene with its ground-truth boxes and scores it.
pub fn evaluate_scenes<T: Element>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    scenes: &[LayeredScene],
    opts: &SampleOptions,
) -> Result<Vec<SceneMetrics>> {
    evaluate_variant(params, cfg, scenes, opts, &ROBUSTNESS_VARIANTS[0])
}

fn evaluate_variant<T: Element>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    scenes: &[LayeredScene],
    opts: &SampleOptions,
    variant: &BoxVariant,
) -> Result<Vec<SceneMetrics>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, scene)| {
            let boxes = match variant.kind {
                None => scene.boxes.clone(),
                Some(kind) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(opts.seed ^ 0xb0c5, i as u64));
                    let canvas = (scene.height(), scene.width());
                    perturb_boxes(&scene.boxes, kind, variant.lo, variant.hi, cfg.patch, canvas, &mut rng)?
                }
            };
            let o = SampleOptions {
                seed: scene_sample_seed(opts.seed, i),
                ..*opts
            };
            let pred = sample_euler(params, cfg, &scene.composite, &boxes, &o)?;
            score_decomposition(&pred, scene)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: String,
    pub metrics: SceneMetrics,
}

/// Decomposition quality under each box-perturbation variant.
pub fn robustness_sweep<T: Element>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    scenes: &[LayeredScene],
    opts: &SampleOptions,
) -> Result<Vec<VariantRow>> {
    ROBUSTNESS_VARIANTS
        .iter()
        .map(|v| {
            let per = evaluate_variant(params, cfg, scenes, opts, v)?;
            Ok(VariantRow {
                variant: v.name.to_string(),
                metrics: SceneMetrics::mean(&per),
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TextureStats {
    pub pred_background: f64,
    pub gt_background: f64,
    pub pred_foreground: f64,
    pub gt_foreground: f64,
}

/// Mean log-variance of the Laplacian over scenes, on luma.
pub fn texture_stats(preds: &[Decomposition], scenes: &[LayeredScene]) -> Result<TextureStats> {
    let mut s = TextureStats::default();
    let (mut nb, mut nf) = (0.0, 0.0);
    for (p, scene) in preds.iter().zip(scenes) {
        let (h, w) = (scene.height(), scene.width());
        s.pred_background += texture_logvar_laplacian(&p.background.luma(), h, w)?;
        s.gt_background += texture_logvar_laplacian(&scene.background.luma(), h, w)?;
        nb += 1.0;
        for (j, f) in p.foregrounds.iter().enumerate() {
            let b = &scene.boxes[j];
            if f.height() < 3 || f.width() < 3 || b.h < 3 || b.w < 3 {
                continue;
            }
            s.pred_foreground += texture_logvar_laplacian(&f.luma(), f.height(), f.width())?;
            let gt = gray_background_convert(&scene.foregrounds[j]).crop(b)?;
            s.gt_foreground += texture_logvar_laplacian(&gt.luma(), b.h, b.w)?;
            nf += 1.0;
        }
    }
    let (nb, nf) = (f64::max(nb, 1.0), f64::max(nf, 1.0));
    s.pred_background /= nb;
    s.gt_background /= nb;
    s.pred_foreground /= nf;
    s.gt_foreground /= nf;
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub checkpoint: String,
    pub seed: u64,
    pub steps: usize,
    pub scenes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: RunMeta,
    pub per_scene: Vec<SceneMetrics>,
    pub aggregate: SceneMetrics,
    pub robustness: Option<Vec<VariantRow>>,
    pub orth_trajectory: Vec<f64>,
    pub texture: TextureStats,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(json_err(path))?;
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let m = &self.meta;
        let _ = writeln!(s, "# Evaluation\n");
        let _ = writeln!(
            s,
            "checkpoint `{}`, {} scenes, {} sampler steps, seed {}\n",
            m.checkpoint, m.scenes, m.steps, m.seed
        );
        let header = "| rows | BG PSNR | BG SSIM | FG PSNR | SoftIoU | SAD | MAD | MSE |\n|---|---|---|---|---|---|---|---|";
        let row = |name: &str, x: &SceneMetrics| {
            format!(
                "| {name} | {:.2} | {:.4} | {:.2} | {:.4} | {:.4} | {:.4} | {:.4} |",
                x.bg_psnr, x.bg_ssim, x.fg_psnr, x.fg_soft_iou, x.fg_sad, x.fg_mad, x.fg_mse
            )
        };
        let _ = writeln!(s, "{header}\n{}\n", row("mean", &self.aggregate));
        if let Some(rows) = &self.robustness {
            let _ = writeln!(s, "## Box robustness\n\n{header}");
            for r in rows {
                let _ = writeln!(s, "{}", row(&r.variant, &r.metrics));
            }
            s.push('\n');
        }
        if !self.orth_trajectory.is_empty() {
            let traj: Vec<String> = self.orth_trajectory.iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(s, "## Orthogonality per sampler step (scene 0)\n\n{}\n", traj.join(", "));
        }
        let t = &self.texture;
        let _ = writeln!(
            s,
            "## Texture (log-variance of Laplacian)\n\n| | predicted | ground truth |\n|---|---|---|\n| background | {:.3} | {:.3} |\n| foreground | {:.3} | {:.3} |",
            t.pred_background, t.gt_background, t.pred_foreground, t.gt_foreground
        );
        s
    }
}

/// Full evaluation of `params` on `scenes`.
pub fn evaluate<T: Element>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    scenes: &[LayeredScene],
    opts: &SampleOptions,
    robustness: bool,
    checkpoint: &str,
) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(scenes.len());
    let mut per_scene = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let o = SampleOptions {
            seed: scene_sample_seed(opts.seed, i),
            ..*opts
        };
        let pred = sample_euler(params, cfg, &scene.composite, &scene.boxes, &o)?;
        per_scene.push(score_decomposition(&pred, scene)?);
        preds.push(pred);
    }
    let orth = match scenes.first() {
        Some(s) => orth_trajectory(params, cfg, loss_cfg, s, opts.steps, scene_sample_seed(opts.seed, 0))?,
        None => Vec::new(),
    };
    let robustness = if robustness {
        Some(robustness_sweep(params, cfg, scenes, opts)?)
    } else {
        None
    };
    Ok(EvalReport {
        meta: RunMeta {
            checkpoint: checkpoint.to_string(),
            seed: opts.seed,
            steps: opts.steps,
            scenes: scenes.len(),
        },
        aggregate: SceneMetrics::mean(&per_scene),
        per_scene,
        robustness,
        orth_trajectory: orth,
        texture: texture_stats(&preds, scenes)?,
    })
}

/// Report for ground-truth layers used as the prediction.
pub fn evaluate_oracle(scenes: &[LayeredScene], checkpoint: &str) -> Result<EvalReport> {
    let preds = scenes
        .iter()
        .map(Decomposition::from_ground_truth)
        .collect::<Result<Vec<_>>>()?;
    let per_scene = preds
        .iter()
        .zip(scenes)
        .map(|(p, s)| score_decomposition(p, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        meta: RunMeta {
            checkpoint: checkpoint.to_string(),
            seed: 0,
            steps: 0,
            scenes: scenes.len(),
        },
        aggregate: SceneMetrics::mean(&per_scene),
        per_scene,
        robustness: None,
        orth_trajectory: Vec::new(),
        texture: texture_stats(&preds, scenes)?,
    })
}
