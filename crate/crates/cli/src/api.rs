//! JSON contract of the decomposition service and the inference path it
//! shares with the `decompose` command.

use std::path::Path;
use std::time::Instant;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use revealtoy_core::codec::{
    composite_layers, decode_png, encode_png, encode_png_rgb, BoundingBox, RgbaImage,
};
use revealtoy_core::flow::{
    checkpoint_id, load_checkpoint, sample_euler, Decomposition, ParamStore, RunConfig, SampleOptions,
};
use serde::{Deserialize, Serialize};

pub const MAX_BOXES: usize = 8;
pub const MAX_STEPS: usize = 200;
pub const DEFAULT_STEPS: usize = 20;

/// A loaded checkpoint, read-only once constructed.
pub struct Model {
    pub params: ParamStore<f32>,
    pub config: RunConfig,
    pub id: String,
}

impl Model {
    pub fn load(path: &Path) -> revealtoy_core::Result<Self> {
        let ck = load_checkpoint::<f32>(path)?;
        Ok(Model {
            id: checkpoint_id(path, ck.step()),
            params: ck.params,
            config: ck.config,
        })
    }
}

/// Validation failure tied to one request field.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FieldError {
    pub error: String,
    pub field: String,
}

impl FieldError {
    pub fn new(field: &str, error: impl Into<String>) -> Self {
        FieldError {
            error: error.into(),
            field: field.to_string(),
        }
    }
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.error)
    }
}

impl std::error::Error for FieldError {}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecomposeRequest {
    /// Base64 PNG.
    pub image: String,
    pub boxes: Vec<BoundingBox>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub shared_noise: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerOut {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    /// Base64 RGBA PNG of the snapped box extent.
    pub rgba: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub decode: u64,
    pub inference: u64,
    pub encode: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecomposeResponse {
    /// Base64 RGB PNG.
    pub background: String,
    pub layers: Vec<LayerOut>,
    pub snapped_boxes: Vec<BoundingBox>,
    /// Alpha-over of the returned layers, as an RGB PNG; lets clients check
    /// their own recomposite.
    pub composite: String,
    pub timings_ms: Timings,
    pub seed_used: u64,
    pub steps: usize,
}

/// Checks the box list against the canvas and snaps every box outward to
/// the patch grid.
pub fn validate_boxes(
    boxes: &[BoundingBox],
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Vec<BoundingBox>, FieldError> {
    if boxes.is_empty() || boxes.len() > MAX_BOXES {
        return Err(FieldError::new(
            "boxes",
            format!("expected 1 to {MAX_BOXES} boxes, got {}", boxes.len()),
        ));
    }
    boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            b.check_inside(height, width, i)
                .map_err(|e| FieldError::new(&format!("boxes[{i}]"), e.to_string()))?;
            Ok(b.snap_outward(patch, height, width))
        })
        .collect()
}

pub fn validate_steps(steps: Option<usize>) -> Result<usize, FieldError> {
    match steps.unwrap_or(DEFAULT_STEPS) {
        s @ 1..=MAX_STEPS => Ok(s),
        s => Err(FieldError::new("steps", format!("must lie in 1..={MAX_STEPS}, got {s}"))),
    }
}

/// Checks the image against the model canvas and marks it opaque.
pub fn check_image(model: &Model, img: RgbaImage) -> Result<RgbaImage, FieldError> {
    let c = model.config.model.canvas;
    if img.height() != c || img.width() != c {
        return Err(FieldError::new(
            "image",
            format!("image is {}x{}, the model expects {c}x{c}", img.width(), img.height()),
        ));
    }
    let mut img = img;
    img.data_mut().chunks_mut(4).for_each(|p| p[3] = 1.0);
    Ok(img)
}

/// Runs the sampler on already validated inputs.
pub fn decompose_image(
    model: &Model,
    image: &RgbaImage,
    snapped: &[BoundingBox],
    opts: &SampleOptions,
) -> revealtoy_core::Result<Decomposition> {
    let mut d = sample_euler(&model.params, &model.config.model, image, snapped, opts)?;
    d.background.data_mut().chunks_mut(4).for_each(|p| p[3] = 1.0);
    Ok(d)
}

/// Alpha-over of the decoded layers onto the background.
pub fn recomposite(d: &Decomposition) -> revealtoy_core::Result<RgbaImage> {
    let placed = (0..d.foregrounds.len())
        .map(|j| d.placed_foreground(j))
        .collect::<revealtoy_core::Result<Vec<_>>>()?;
    composite_layers(&d.background, &placed)
}

#[derive(Debug)]
pub enum ServeError {
    Invalid(FieldError),
    Internal(String),
}

impl From<FieldError> for ServeError {
    fn from(e: FieldError) -> Self {
        ServeError::Invalid(e)
    }
}

impl From<revealtoy_core::Error> for ServeError {
    fn from(e: revealtoy_core::Error) -> Self {
        ServeError::Internal(e.to_string())
    }
}

/// Full request handling. Pure in `(model, request)` once a seed is given;
/// without one, seed 0 is used and reported.
pub fn handle_decompose(model: &Model, req: &DecomposeRequest) -> Result<DecomposeResponse, ServeError> {
    let t0 = Instant::now();
    let bytes = B64
        .decode(req.image.trim())
        .map_err(|e| FieldError::new("image", format!("invalid base64: {e}")))?;
    let img = decode_png(&bytes).map_err(|e| FieldError::new("image", e.to_string()))?;
    let img = check_image(model, img)?;
    let snapped = validate_boxes(&req.boxes, img.height(), img.width(), model.config.model.patch)?;
    let steps = validate_steps(req.steps)?;
    let opts = SampleOptions {
        steps,
        seed: req.seed.unwrap_or(0),
        shared_noise: req.shared_noise.unwrap_or(false),
    };
    let t1 = Instant::now();
    let d = decompose_image(model, &img, &snapped, &opts)?;
    let t2 = Instant::now();
    let layers = d
        .foregrounds
        .iter()
        .zip(&snapped)
        .map(|(f, b)| {
            Ok(LayerOut {
                bbox: *b,
                rgba: B64.encode(encode_png(f)?),
            })
        })
        .collect::<revealtoy_core::Result<Vec<_>>>()?;
    let background = B64.encode(encode_png_rgb(&d.background)?);
    let composite = B64.encode(encode_png_rgb(&recomposite(&d)?)?);
    let ms = |a: Instant, b: Instant| (b - a).as_millis() as u64;
    Ok(DecomposeResponse {
        background,
        layers,
        snapped_boxes: snapped,
        composite,
        timings_ms: Timings {
            decode: ms(t0, t1),
            inference: ms(t1, t2),
            encode: ms(t2, Instant::now()),
        },
        seed_used: opts.seed,
        steps,
    })
}
