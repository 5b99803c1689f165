//! Batch commands. Each takes its parsed arguments and returns a summary so
//! tests can drive them without spawning the binary.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::Args;
use revealtoy_core::codec::{encode_png_rgb, read_png, write_png, BoundingBox, COMPOSITE_TOL};
use revealtoy_core::eval::{evaluate, evaluate_oracle, EvalReport};
use revealtoy_core::flow::{
    gradcheck_suite, load_checkpoint, run_steps, save_checkpoint, Adam, Checkpoint, CheckLine,
    ParamStore, RunConfig, SampleOptions, StepMetrics, TrainSample,
};
use revealtoy_core::synth::{
    consistency_filter, dataset_read, dataset_write, generate_dataset, occlusion_filter,
    GeneratorConfig,
};
use serde::{Deserialize, Serialize};

use crate::api::{check_image, decompose_image, validate_boxes, validate_steps, Model};

fn parse_layers(s: &str) -> Result<(usize, usize), String> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    match s.split_once("..") {
        Some((a, b)) => Ok((parse(a)?, parse(b.trim_start_matches('='))?)),
        None => parse(s).map(|n| (n, n)),
    }
}

#[derive(Args, Debug, Clone)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    /// Canvas side in pixels.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 2)]
    pub patch: usize,
    /// Layer count range, e.g. `2..3` (inclusive).
    #[arg(long, default_value = "2..3", value_parser = parse_layers)]
    pub layers: (usize, usize),
    #[arg(long, default_value_t = 0.1)]
    pub occlusion_min_iou: f64,
    #[arg(long, default_value_t = 0.5)]
    pub occluded_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FilterCounts {
    pub occlusion_pass: usize,
    pub occlusion_fail: usize,
    pub consistency_pass: usize,
    pub consistency_fail: usize,
}

pub fn gen_data(args: &GenDataArgs) -> Result<FilterCounts> {
    let cfg = GeneratorConfig {
        canvas: args.size,
        patch: args.patch,
        layers_min: args.layers.0,
        layers_max: args.layers.1,
        size_min: args.size as f64 / 8.0,
        size_max: args.size as f64 * 9.0 / 32.0,
        occlusion_min_iou: args.occlusion_min_iou,
        occluded_fraction: args.occluded_fraction,
        seed: args.seed,
        ..Default::default()
    };
    cfg.validate()?;
    let records = generate_dataset(&cfg, args.count)?;
    dataset_write(&args.out, &cfg, &records)?;
    let mut c = FilterCounts {
        occlusion_pass: 0,
        occlusion_fail: 0,
        consistency_pass: 0,
        consistency_fail: 0,
    };
    for r in &records {
        if occlusion_filter(&r.scene, cfg.occlusion_min_iou) {
            c.occlusion_pass += 1;
        } else {
            c.occlusion_fail += 1;
        }
        if consistency_filter(&r.scene, COMPOSITE_TOL) {
            c.consistency_pass += 1;
        } else {
            c.consistency_fail += 1;
        }
    }
    println!(
        "wrote {} scenes to {}",
        records.len(),
        args.out.display()
    );
    println!(
        "occlusion filter (IoU >= {}): {} pass, {} fail",
        cfg.occlusion_min_iou, c.occlusion_pass, c.occlusion_fail
    );
    println!(
        "consistency filter: {} pass, {} fail",
        c.consistency_pass, c.consistency_fail
    );
    Ok(c)
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// RunConfig JSON; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Total optimizer steps (including steps done before a resume).
    #[arg(long)]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

pub fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join(format!("step_{step:06}.rvlt"))
}

/// Per-step line of `metrics.jsonl`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub step: u64,
    pub loss_fm: f64,
    pub loss_alpha: f64,
    pub loss_orth: f64,
    pub loss_total: f64,
    pub grad_norm: f64,
}

impl From<&StepMetrics> for MetricsLine {
    fn from(m: &StepMetrics) -> Self {
        MetricsLine {
            step: m.step,
            loss_fm: m.fm,
            loss_alpha: m.alpha,
            loss_orth: m.orth,
            loss_total: m.total,
            grad_norm: m.grad_norm,
        }
    }
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: RunConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Trains and returns the path of the last checkpoint written.
pub fn train(args: &TrainArgs) -> Result<PathBuf> {
    let (manifest, records) = dataset_read(&args.data)?;
    let given = args.config.as_deref().map(read_config).transpose()?;
    let (run, mut params, mut opt) = match &args.resume {
        Some(path) => {
            let ck = load_checkpoint::<f32>(path)?;
            if let Some(g) = &given {
                ensure!(
                    g.model == ck.config.model,
                    "--config model section differs from the checkpoint being resumed"
                );
            }
            log::info!("resuming {} at step {}", path.display(), ck.step());
            (ck.config, ck.params, ck.optimizer)
        }
        None => {
            let run = given.unwrap_or_default();
            run.validate()?;
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(args.seed);
            let params = ParamStore::<f32>::init(&run.model, &mut rng)?;
            let opt = Adam::new(&run.train);
            (run, params, opt)
        }
    };
    let m = &run.model;
    if manifest.canvas != m.canvas || manifest.config.patch % m.patch != 0 {
        bail!(
            "dataset {} is {}px with {}px box grid; the model expects {}px with patch {}",
            args.data.display(),
            manifest.canvas,
            manifest.config.patch,
            m.canvas,
            m.patch
        );
    }
    ensure!(!records.is_empty(), "dataset {} is empty", args.data.display());
    ensure!(
        opt.step < args.steps,
        "checkpoint is at step {}, nothing to do for --steps {}",
        opt.step,
        args.steps
    );
    let samples = records
        .iter()
        .map(|r| TrainSample::from_scene(m, &r.scene))
        .collect::<revealtoy_core::Result<Vec<_>>>()?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let metrics_path = args.out.join("metrics.jsonl");
    let mut metrics = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .with_context(|| format!("opening {}", metrics_path.display()))?;
    let every = run.train.checkpoint_every.max(1);
    let mut last = None;
    run_steps(&mut params, &mut opt, &samples, args.seed, args.steps, &run, |m, p, o| {
        let line = serde_json::to_string(&MetricsLine::from(m)).expect("metrics serialize");
        writeln!(metrics, "{line}").map_err(|e| revealtoy_core::Error::Io {
            path: metrics_path.clone(),
            source: e,
        })?;
        if m.step % 10 == 0 || m.step == args.steps {
            log::info!(
                "step {} total {:.4} fm {:.4} alpha {:.4} orth {:.4}",
                m.step,
                m.total,
                m.fm,
                m.alpha,
                m.orth
            );
        }
        if m.step % every == 0 || m.step == args.steps {
            let path = checkpoint_path(&args.out, m.step);
            let ck = Checkpoint {
                config: run.clone(),
                params: p.clone(),
                optimizer: o.clone(),
            };
            save_checkpoint(&path, &ck)?;
            last = Some(path);
        }
        Ok(())
    })?;
    let last = last.expect("at least one step ran");
    println!("trained to step {}; checkpoint {}", opt.step, last.display());
    Ok(last)
}

#[derive(Args, Debug, Clone)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// JSON array of `{x, y, w, h}` boxes in pixels.
    #[arg(long)]
    pub boxes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub shared_noise: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecomposeResult {
    pub checkpoint: String,
    pub snapped_boxes: Vec<BoundingBox>,
    pub seed: u64,
    pub steps: usize,
    pub shared_noise: bool,
}

pub fn decompose(args: &DecomposeArgs) -> Result<DecomposeResult> {
    let model = Model::load(&args.ckpt)?;
    let img = check_image(&model, read_png(&args.image)?)?;
    let text = fs::read_to_string(&args.boxes)
        .with_context(|| format!("reading {}", args.boxes.display()))?;
    let boxes: Vec<BoundingBox> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", args.boxes.display()))?;
    let snapped = validate_boxes(&boxes, img.height(), img.width(), model.config.model.patch)?;
    let opts = SampleOptions {
        steps: validate_steps(Some(args.steps))?,
        seed: args.seed,
        shared_noise: args.shared_noise,
    };
    let d = decompose_image(&model, &img, &snapped, &opts)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let bg = args.out.join("background.png");
    fs::write(&bg, encode_png_rgb(&d.background)?).with_context(|| format!("writing {}", bg.display()))?;
    for (j, f) in d.foregrounds.iter().enumerate() {
        write_png(&args.out.join(format!("fg_{j:02}.png")), f)?;
    }
    let result = DecomposeResult {
        checkpoint: model.id.clone(),
        snapped_boxes: snapped,
        seed: opts.seed,
        steps: opts.steps,
        shared_noise: opts.shared_noise,
    };
    let path = args.out.join("result.json");
    fs::write(&path, serde_json::to_string_pretty(&result)?)
        .with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {} layers to {}", d.foregrounds.len() + 1, args.out.display());
    Ok(result)
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Output JSON path; a Markdown summary is written next to it.
    #[arg(long)]
    pub report: PathBuf,
    /// Also run the box-perturbation sweep.
    #[arg(long)]
    pub robustness: bool,
    /// Score the ground-truth layers instead of a model.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluate only the first N scenes.
    #[arg(long)]
    pub limit: Option<usize>,
}

pub fn eval(args: &EvalArgs) -> Result<EvalReport> {
    let (_, records) = dataset_read(&args.data)?;
    let n = args.limit.unwrap_or(records.len()).min(records.len());
    let scenes: Vec<_> = records.into_iter().take(n).map(|r| r.scene).collect();
    let report = match (&args.ckpt, args.oracle) {
        (_, true) => evaluate_oracle(&scenes, "ground-truth")?,
        (Some(path), false) => {
            let ck: Checkpoint<f32> = load_checkpoint(path)?;
            let id = revealtoy_core::flow::checkpoint_id(path, ck.step());
            let opts = SampleOptions {
                steps: validate_steps(Some(args.steps))?,
                seed: args.seed,
                shared_noise: false,
            };
            evaluate(
                &ck.params,
                &ck.config.model,
                &ck.config.loss,
                &scenes,
                &opts,
                args.robustness,
                &id,
            )?
        }
        (None, false) => bail!("--ckpt is required unless --oracle is given"),
    };
    if let Some(dir) = args.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    report.write_json(&args.report)?;
    let md = args.report.with_extension("md");
    fs::write(&md, report.to_markdown()).with_context(|| format!("writing {}", md.display()))?;
    println!("{}", report.to_markdown());
    Ok(report)
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Prints one line per check; true iff all pass.
pub fn gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let lines: Vec<CheckLine> = gradcheck_suite(args.seed)?;
    let mut ok = true;
    for l in &lines {
        let status = if l.passed() { "ok" } else { "FAIL" };
        ok &= l.passed();
        println!(
            "{status:4} {:<28} max rel err {:.3e} (tol {:.0e}, {} values)",
            l.name, l.report.max_rel_err, l.tol, l.report.checked
        );
    }
    println!("{} checks, {}", lines.len(), if ok { "all passed" } else { "FAILED" });
    Ok(ok)
}

#[derive(Args, Debug, Clone)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Static UI bundle served at `/`.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
    /// Base seed of the sample scenes handed out by `/api/scenes`.
    #[arg(long, default_value_t = 0)]
    pub scene_seed: u64,
}

pub async fn serve(args: &ServeArgs) -> Result<()> {
    let model = Model::load(&args.ckpt)?;
    log::info!("loaded {} ({} parameters)", model.id, model.params.count());
    let state = std::sync::Arc::new(crate::server::AppState::new(model, args.scene_seed));
    let app = crate::server::router(state, args.ui_dir.clone());
    let listener = tokio::net::TcpListener::bind(&args.addr)
        .await
        .with_context(|| format!("binding {}", args.addr))?;
    println!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
