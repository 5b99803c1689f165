//! Procedural layered scenes with exact ground truth, the dataset filters
//! and bounding-box perturbations.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{
    composite_layers, opacity, quantize, read_png, write_png, BoundingBox, LayeredScene, RgbaImage,
};
use crate::error::{io_err, json_err, Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Rectangle,
    SoftBlob,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Square canvas side in pixels.
    pub canvas: usize,
    /// Boxes are snapped outward to this grid.
    pub patch: usize,
    pub layers_min: usize,
    pub layers_max: usize,
    pub shapes: Vec<ShapeKind>,
    /// Shape radius / half-extent range in pixels.
    pub size_min: f64,
    pub size_max: f64,
    pub occlusion_min_iou: f64,
    /// Fraction of multi-layer scenes that must pass the occlusion filter.
    pub occluded_fraction: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            canvas: 32,
            patch: 2,
            layers_min: 2,
            layers_max: 3,
            shapes: vec![ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::SoftBlob],
            size_min: 4.0,
            size_max: 9.0,
            occlusion_min_iou: 0.1,
            occluded_fraction: 0.5,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.layers_min < 1 || self.layers_max < self.layers_min {
            return bad("need 1 <= layers_min <= layers_max");
        }
        if !(0.0..1.0).contains(&self.occlusion_min_iou) {
            return bad("occlusion_min_iou must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.occluded_fraction) {
            return bad("occluded_fraction must lie in [0, 1]");
        }
        if self.patch == 0 || !self.canvas.is_multiple_of(self.patch) {
            return bad("canvas must be divisible by the patch size");
        }
        if self.shapes.is_empty() {
            return bad("no shape kinds enabled");
        }
        if !(self.size_min >= 1.0 && self.size_max >= self.size_min)
            || self.size_max * 2.0 > self.canvas as f64
        {
            return bad("shape size range does not fit the canvas");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub scene: LayeredScene,
    pub seed: u64,
    /// Generator parameters the scene was drawn with.
    pub provenance: GeneratorConfig,
}

/// Seed of the `index`-th scene of a dataset (SplitMix64 finalizer).
pub fn scene_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    kind: ShapeKind,
    cy: f64,
    cx: f64,
    /// Radius, or half extents for rectangles.
    ry: f64,
    rx: f64,
    color: [f64; 3],
    tint: [f64; 3],
}

impl Shape {
    /// Fractional coverage of the pixel whose center is `(y + .5, x + .5)`.
    fn coverage(&self, y: usize, x: usize) -> f64 {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        match self.kind {
            ShapeKind::Disk => {
                let d = ((py - self.cy).powi(2) + (px - self.cx).powi(2)).sqrt();
                (self.ry - d + 0.5).clamp(0.0, 1.0)
            }
            ShapeKind::Rectangle => {
                let cov = |p: f64, c: f64, r: f64| {
                    let lo = (p - 0.5).max(c - r);
                    let hi = (p + 0.5).min(c + r);
                    (hi - lo).clamp(0.0, 1.0)
                };
                cov(py, self.cy, self.ry) * cov(px, self.cx, self.rx)
            }
            ShapeKind::SoftBlob => {
                let d = (((py - self.cy) / self.ry).powi(2) + ((px - self.cx) / self.rx).powi(2))
                    .sqrt();
                // solid core, linear-then-smooth falloff over the outer 45%
                let t = ((1.0 - d) / 0.45).clamp(0.0, 1.0);
                t * t * (3.0 - 2.0 * t)
            }
        }
    }

    fn rgb_at(&self, y: usize, x: usize, canvas: f64) -> [f64; 3] {
        let u = (y as f64 + x as f64) / (2.0 * canvas) - 0.25;
        let mut c = self.color;
        for ch in 0..3 {
            c[ch] = (c[ch] + self.tint[ch] * u).clamp(-1.0, 1.0);
        }
        c
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(-0.9..0.9),
        rng.random_range(-0.9..0.9),
        rng.random_range(-0.9..0.9),
    ]
}

fn background(rng: &mut ChaCha8Rng, size: usize) -> RgbaImage {
    let corners: Vec<[f64; 3]> = (0..4)
        .map(|_| {
            let c = random_color(rng);
            [c[0] * 0.7, c[1] * 0.7, c[2] * 0.7]
        })
        .collect();
    let freq = rng.random_range(0.5..2.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let amp = rng.random_range(0.05..0.15);
    let mut img = RgbaImage::filled(size, size, [0.0, 0.0, 0.0, 1.0]);
    let s = size as f64;
    for y in 0..size {
        for x in 0..size {
            let (v, u) = ((y as f64 + 0.5) / s, (x as f64 + 0.5) / s);
            let wave = amp * (std::f64::consts::TAU * freq * (u + 0.6 * v) + phase).sin();
            let mut px = [0.0, 0.0, 0.0, 1.0];
            for ch in 0..3 {
                let top = corners[0][ch] * (1.0 - u) + corners[1][ch] * u;
                let bot = corners[2][ch] * (1.0 - u) + corners[3][ch] * u;
                px[ch] = (top * (1.0 - v) + bot * v + wave).clamp(-0.95, 0.95);
            }
            img.set_pixel(y, x, px);
        }
    }
    quantize(&img)
}

fn mean_rgb(img: &RgbaImage) -> [f64; 3] {
    let n = (img.height() * img.width()) as f64;
    let mut m = [0.0; 3];
    for px in img.data().chunks(4) {
        for ch in 0..3 {
            m[ch] += px[ch] / n;
        }
    }
    m
}

fn draw_shape(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig, near: Option<&Shape>, bg_mean: [f64; 3]) -> Shape {
    let kind = cfg.shapes[rng.random_range(0..cfg.shapes.len())];
    let s = cfg.canvas as f64;
    let ry = rng.random_range(cfg.size_min..=cfg.size_max);
    let rx = match kind {
        ShapeKind::Disk => ry,
        _ => rng.random_range(cfg.size_min..=cfg.size_max),
    };
    let (cy, cx) = match near {
        Some(o) => {
            let dy = rng.random_range(-0.6..0.6) * (o.ry + ry) * 0.8;
            let dx = rng.random_range(-0.6..0.6) * (o.rx + rx) * 0.8;
            (
                (o.cy + dy).clamp(ry * 0.6, s - ry * 0.6),
                (o.cx + dx).clamp(rx * 0.6, s - rx * 0.6),
            )
        }
        None => (rng.random_range(ry * 0.6..s - ry * 0.6), rng.random_range(rx * 0.6..s - rx * 0.6)),
    };
    let color = loop {
        let c = random_color(rng);
        let dist: f64 = c.iter().zip(&bg_mean).map(|(a, b)| (a - b).abs()).sum();
        if dist > 0.6 {
            break c;
        }
    };
    let tint = [
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
    ];
    Shape {
        kind,
        cy,
        cx,
        ry,
        rx,
        color,
        tint,
    }
}

/// Rasterizes a shape into a quantized canvas layer and its tight,
/// grid-snapped box. Returns `None` if nothing is visible.
fn rasterize(shape: &Shape, cfg: &GeneratorConfig) -> Option<(RgbaImage, BoundingBox)> {
    let n = cfg.canvas;
    let mut img = RgbaImage::transparent(n, n);
    let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..n {
        for x in 0..n {
            let a = shape.coverage(y, x);
            let alpha = crate::codec::from_byte(crate::codec::to_byte(2.0 * a - 1.0));
            if alpha <= -1.0 {
                continue;
            }
            let rgb = shape.rgb_at(y, x, n as f64);
            img.set_pixel(y, x, [rgb[0], rgb[1], rgb[2], alpha]);
            y0 = y0.min(y);
            x0 = x0.min(x);
            y1 = y1.max(y + 1);
            x1 = x1.max(x + 1);
        }
    }
    if y0 == usize::MAX {
        return None;
    }
    let tight = BoundingBox::new(x0, y0, x1 - x0, y1 - y0);
    Some((quantize(&img), tight.snap_outward(cfg.patch, n, n)))
}

/// Draws one scene from the stream seeded by `seed`.
pub fn generate_scene(cfg: &GeneratorConfig, seed: u64) -> Result<SceneRecord> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = background(&mut rng, cfg.canvas);
    let bg_mean = mean_rgb(&bg);
    let n_layers = rng.random_range(cfg.layers_min..=cfg.layers_max);
    let want_occlusion = n_layers >= 2 && rng.random_bool(cfg.occluded_fraction);

    let mut attempts = 0usize;
    let (layers, boxes) = loop {
        attempts += 1;
        let mut shapes: Vec<Shape> = Vec::with_capacity(n_layers);
        let mut layers = Vec::with_capacity(n_layers);
        let mut boxes = Vec::with_capacity(n_layers);
        while layers.len() < n_layers {
            let near = if want_occlusion && !shapes.is_empty() {
                Some(shapes[rng.random_range(0..shapes.len())])
            } else {
                None
            };
            let shape = draw_shape(&mut rng, cfg, near.as_ref(), bg_mean);
            if let Some((img, b)) = rasterize(&shape, cfg) {
                shapes.push(shape);
                layers.push(img);
                boxes.push(b);
            }
        }
        if !want_occlusion || occlusion_pass(&layers, cfg.occlusion_min_iou) {
            break (layers, boxes);
        }
        if attempts > 10_000 {
            return Err(Error::Config(format!(
                "could not place occluding shapes with IoU >= {}",
                cfg.occlusion_min_iou
            )));
        }
    };
    let composite = quantize(&composite_layers(&bg, &layers)?);
    let scene = LayeredScene::new(composite, bg, layers, boxes)?;
    Ok(SceneRecord {
        scene,
        seed,
        provenance: cfg.clone(),
    })
}

/// Scenes `0..count` of the dataset described by `cfg`.
pub fn generate_dataset(cfg: &GeneratorConfig, count: usize) -> Result<Vec<SceneRecord>> {
    (0..count as u64)
        .map(|i| generate_scene(cfg, scene_seed(cfg.seed, i)))
        .collect()
}

/// Binarized support `α > 0` of a layer.
pub fn binary_mask(layer: &RgbaImage) -> Vec<bool> {
    layer.data().chunks(4).map(|p| p[3] > 0.0).collect()
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn occlusion_pass(layers: &[RgbaImage], min_iou: f64) -> bool {
    let masks: Vec<Vec<bool>> = layers.iter().map(binary_mask).collect();
    (0..masks.len()).any(|i| (i + 1..masks.len()).any(|j| mask_iou(&masks[i], &masks[j]) >= min_iou))
}

/// True iff some pair of distinct foregrounds has IoU ≥ `min_iou` between
/// their `α > 0` masks. Single-layer scenes never pass.
pub fn occlusion_filter(scene: &LayeredScene, min_iou: f64) -> bool {
    scene.layer_count() >= 2 && occlusion_pass(&scene.foregrounds, min_iou)
}

/// Mean absolute RGB error between composite and background over pixels
/// outside every foreground support (`α > −1`).
pub fn background_consistency_error(scene: &LayeredScene) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    let w = scene.width();
    for y in 0..scene.height() {
        for x in 0..w {
            if scene.foregrounds.iter().any(|f| f.pixel(y, x)[3] > -1.0) {
                continue;
            }
            let (c, b) = (scene.composite.pixel(y, x), scene.background.pixel(y, x));
            sum += (0..3).map(|ch| (c[ch] - b[ch]).abs()).sum::<f64>();
            n += 3;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Keeps a scene iff its background agrees with the composite outside all
/// foregrounds to within `tol` mean absolute error.
pub fn consistency_filter(scene: &LayeredScene, tol: f64) -> bool {
    background_consistency_error(scene) <= tol
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    Excessive,
    Offset,
    Inadequate,
}

/// One row of the box-robustness protocol.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxVariant {
    pub name: &'static str,
    pub kind: Option<PerturbKind>,
    pub lo: f64,
    pub hi: f64,
}

/// Precise boxes plus the five perturbation ranges of the robustness study.
pub const ROBUSTNESS_VARIANTS: [BoxVariant; 6] = [
    BoxVariant { name: "precise", kind: None, lo: 0.0, hi: 0.0 },
    BoxVariant { name: "excessive_10_20", kind: Some(PerturbKind::Excessive), lo: 0.10, hi: 0.20 },
    BoxVariant { name: "offset_0_5", kind: Some(PerturbKind::Offset), lo: 0.0, hi: 0.05 },
    BoxVariant { name: "offset_5_10", kind: Some(PerturbKind::Offset), lo: 0.05, hi: 0.10 },
    BoxVariant { name: "inadequate_0_5", kind: Some(PerturbKind::Inadequate), lo: 0.0, hi: 0.05 },
    BoxVariant { name: "inadequate_5_10", kind: Some(PerturbKind::Inadequate), lo: 0.05, hi: 0.10 },
];

const SNAP_EPS: f64 = 1e-9;

/// Applies one perturbation with a fixed draw `u` and offset signs.
/// Returns `None` if the clamped box is narrower than one patch.
pub fn perturb_box_with(
    b: &BoundingBox,
    kind: PerturbKind,
    u: f64,
    signs: (f64, f64),
    patch: usize,
    canvas: (usize, usize),
) -> Option<BoundingBox> {
    let (ch, cw) = (canvas.0 as f64, canvas.1 as f64);
    let p = patch as f64;
    let (w, h) = (b.w as f64, b.h as f64);
    let (cx, cy) = (b.x as f64 + w / 2.0, b.y as f64 + h / 2.0);
    match kind {
        PerturbKind::Offset => {
            if b.w > canvas.1 || b.h > canvas.0 {
                return None;
            }
            let x0 = cx + signs.0 * u * w - w / 2.0;
            let y0 = cy + signs.1 * u * h - h / 2.0;
            // translate back inside, then round the origin onto the grid
            let snap = |v: f64, ext: f64, lim: f64| {
                let v = v.clamp(0.0, lim - ext);
                ((v / p).round() * p).clamp(0.0, lim - ext) as usize
            };
            Some(BoundingBox::new(snap(x0, w, cw), snap(y0, h, ch), b.w, b.h))
        }
        PerturbKind::Excessive | PerturbKind::Inadequate => {
            let f = if kind == PerturbKind::Excessive { 1.0 + u } else { 1.0 - u };
            let (nw, nh) = (w * f, h * f);
            let x0 = (cx - nw / 2.0).max(0.0);
            let x1 = (cx + nw / 2.0).min(cw);
            let y0 = (cy - nh / 2.0).max(0.0);
            let y1 = (cy + nh / 2.0).min(ch);
            if x1 - x0 < p || y1 - y0 < p {
                return None;
            }
            let lo = |v: f64| ((v / p + SNAP_EPS).floor() * p) as usize;
            let hi = |v: f64| ((v / p - SNAP_EPS).ceil() * p) as usize;
            let (sx0, sy0) = (lo(x0), lo(y0));
            let (sx1, sy1) = (hi(x1).min(canvas.1), hi(y1).min(canvas.0));
            Some(BoundingBox::new(sx0, sy0, sx1 - sx0, sy1 - sy0))
        }
    }
}

/// Perturbs every box with `u ~ Uniform(lo, hi)` (fractions, e.g. 0.05 for
/// 5%). A draw that collapses a box is retried up to 8 times.
pub fn perturb_boxes(
    boxes: &[BoundingBox],
    kind: PerturbKind,
    lo: f64,
    hi: f64,
    patch: usize,
    canvas: (usize, usize),
    rng: &mut impl Rng,
) -> Result<Vec<BoundingBox>> {
    if !(0.0 <= lo && lo <= hi) {
        return Err(Error::Config(format!("invalid perturbation range [{lo}, {hi}]")));
    }
    boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            for _ in 0..8 {
                let u = if hi > lo { rng.random_range(lo..hi) } else { lo };
                let sx = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let sy = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                if let Some(nb) = perturb_box_with(b, kind, u, (sx, sy), patch, canvas) {
                    return Ok(nb);
                }
            }
            Err(Error::InvalidBox {
                index: i,
                reason: format!("{kind:?} perturbation collapsed the box 8 times"),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub canvas: usize,
    pub config: GeneratorConfig,
    pub format_version: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SceneMeta {
    boxes: Vec<BoundingBox>,
    seed: u64,
}

pub fn scene_dir_name(index: usize) -> String {
    format!("scene_{index:06}")
}

/// Writes `records` in the on-disk dataset format. Images must already be
/// 8-bit quantized for the round trip to be exact.
pub fn dataset_write(dir: &Path, cfg: &GeneratorConfig, records: &[SceneRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = Manifest {
        count: records.len(),
        canvas: cfg.canvas,
        config: cfg.clone(),
        format_version: FORMAT_VERSION,
    };
    let mpath = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(json_err(&mpath))?;
    fs::write(&mpath, text).map_err(io_err(&mpath))?;
    for (i, rec) in records.iter().enumerate() {
        let sdir = dir.join(scene_dir_name(i));
        fs::create_dir_all(&sdir).map_err(io_err(&sdir))?;
        write_png(&sdir.join("composite.png"), &rec.scene.composite)?;
        write_png(&sdir.join("background.png"), &rec.scene.background)?;
        for (j, fg) in rec.scene.foregrounds.iter().enumerate() {
            write_png(&sdir.join(format!("fg_{j:02}.png")), fg)?;
        }
        let meta = SceneMeta {
            boxes: rec.scene.boxes.clone(),
            seed: rec.seed,
        };
        let mp = sdir.join("scene.json");
        let text = serde_json::to_string_pretty(&meta).map_err(json_err(&mp))?;
        fs::write(&mp, text).map_err(io_err(&mp))?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(json_err(&mpath))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "dataset format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

pub fn read_scene(dir: &Path, index: usize, provenance: &GeneratorConfig) -> Result<SceneRecord> {
    let ds = |detail: String| Error::Dataset {
        scene: index,
        detail,
    };
    let sdir = dir.join(scene_dir_name(index));
    let text = fs::read_to_string(sdir.join("scene.json"))
        .map_err(|e| ds(format!("scene.json: {e}")))?;
    let meta: SceneMeta =
        serde_json::from_str(&text).map_err(|e| ds(format!("scene.json: {e}")))?;
    let load = |name: &str| read_png(&sdir.join(name)).map_err(|e| ds(format!("{name}: {e}")));
    let composite = load("composite.png")?;
    let background = load("background.png")?;
    let foregrounds = (0..meta.boxes.len())
        .map(|j| load(&format!("fg_{j:02}.png")))
        .collect::<Result<Vec<_>>>()?;
    let scene = LayeredScene::new(composite, background, foregrounds, meta.boxes)
        .map_err(|e| ds(e.to_string()))?;
    Ok(SceneRecord {
        scene,
        seed: meta.seed,
        provenance: provenance.clone(),
    })
}

pub fn dataset_read(dir: &Path) -> Result<(Manifest, Vec<SceneRecord>)> {
    let manifest = read_manifest(dir)?;
    let records = (0..manifest.count)
        .map(|i| read_scene(dir, i, &manifest.config))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, records))
}

/// Opacity of foreground `j` in [0, 1].
pub fn foreground_opacity(scene: &LayeredScene, j: usize) -> Vec<f64> {
    scene.foregrounds[j].data().chunks(4).map(|p| opacity(p[3])).collect()
}
