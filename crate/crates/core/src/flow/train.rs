//! Adam and the training step.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use revealtoy_tensor::gradcheck::{self, GradCheckReport};
use revealtoy_tensor::{Element, Graph, Tensor, TensorError};
use serde::{Deserialize, Serialize};

use super::config::{LossConfig, ModelConfig, RunConfig, TrainConfig};
use super::loss::{interpolate, total_loss, LossValues};
use super::net::{forward, Prepared};
use super::params::{Bound, ParamStore};
use crate::codec::{build_sequence, LayeredScene};
use crate::error::{Error, Result};
use crate::synth::scene_seed;

/// A scene encoded for training: prepared layout plus clean target tokens.
#[derive(Clone, Debug)]
pub struct TrainSample<T: Element> {
    pub prep: Prepared<T>,
    pub targets: Tensor<T>,
}

impl<T: Element> TrainSample<T> {
    pub fn from_scene(cfg: &ModelConfig, scene: &LayeredScene) -> Result<Self> {
        let (layout, tokens) = build_sequence::<T>(scene, cfg.patch, cfg.k_text)?;
        let targets = tokens.stacked_targets();
        Ok(TrainSample {
            prep: Prepared::new(cfg, layout, tokens.cond)?,
            targets,
        })
    }
}

/// Adam moments, keyed like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Element> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        self.step += 1;
        let k = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(k);
        let bc2 = 1.0 - self.beta2.powi(k);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let p = params.get(&name).expect("known parameter");
            let shape = p.shape().to_vec();
            let n = p.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape.clone()));
            let mut md: Vec<T> = m.data().to_vec();
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape.clone()));
            let mut vd: Vec<T> = v.data().to_vec();
            let mut pd: Vec<T> = p.data().to_vec();
            for i in 0..n {
                let gi = g[i];
                let mi = self.beta1 * md[i].as_f64() + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * vd[i].as_f64() + (1.0 - self.beta2) * gi * gi;
                md[i] = T::from_f64(mi);
                vd[i] = T::from_f64(vi);
                let upd = self.lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                pd[i] = T::from_f64(pd[i].as_f64() - upd);
            }
            *self.m.get_mut(&name).expect("inserted") = Tensor::new(shape.clone(), md)?;
            *self.v.get_mut(&name).expect("inserted") = Tensor::new(shape.clone(), vd)?;
            params.set(&name, Tensor::new(shape, pd)?)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// 1-based index of the update this step applied.
    pub step: u64,
    pub fm: f64,
    pub alpha: f64,
    pub orth: f64,
    pub total: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// RNG stream of training step `step` for run seed `seed`. Independent of
/// how the run was split across resumes.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(scene_seed(seed ^ 0x7472_6169_6e00_0000, step))
}

/// Draws `batch` sample indices (with replacement) for one step.
pub fn pick_batch(rng: &mut impl Rng, n_samples: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n_samples)).collect()
}

fn non_finite(step: u64, detail: String) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::NonFiniteLoss {
            step,
            diagnostics: format!("non-finite value produced by {op}; {detail}"),
        },
        other => other,
    }
}

/// Loss components and parameter gradients of one sample at a given
/// `(t, ε)`.
pub fn sample_gradients<T: Element>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    sample: &TrainSample<T>,
    t: f64,
    eps: &Tensor<T>,
) -> Result<(LossValues, BTreeMap<String, Tensor<T>>)> {
    let (z_t, v_true) = interpolate(&sample.targets, eps, t)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g)?;
    let zt = g.constant(z_t)?;
    let vt = g.constant(v_true)?;
    let zgt = g.constant(sample.targets.clone())?;
    let out = forward(&mut g, &bound, cfg, &sample.prep, zt, t)?;
    let parts = total_loss(&mut g, out.velocity, vt, zt, zgt, t, &sample.prep.layout, loss_cfg)?;
    let values = parts.values(&g);
    let grads = g.backward(parts.total)?;
    let mut named = BTreeMap::new();
    for (name, var) in bound.iter() {
        if let Some(gr) = grads.get(*var) {
            named.insert(name.clone(), gr.clone());
        }
    }
    Ok((values, named))
}

/// One optimizer update on `batch`: per sample `t ~ U(0,1)` and
/// `ε ~ N(0, I)` over its target tokens, gradients averaged over the batch.
pub fn train_step<T: Element>(
    params: &mut ParamStore<T>,
    opt: &mut Adam<T>,
    batch: &[&TrainSample<T>],
    rng: &mut impl Rng,
    cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
) -> Result<StepMetrics> {
    let step = opt.step + 1;
    let scale = 1.0 / batch.len().max(1) as f64;
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut mean = LossValues::default();
    for sample in batch {
        if sample.prep.region_aware != cfg.raa {
            return Err(Error::Config(format!(
                "sample prepared with raa = {}, model has raa = {}",
                sample.prep.region_aware, cfg.raa
            )));
        }
        let t: f64 = rng.random();
        let eps_data: Vec<T> = (0..sample.targets.len())
            .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let eps = Tensor::new(sample.targets.shape().to_vec(), eps_data)?;
        let (values, grads) = sample_gradients(params, cfg, loss_cfg, sample, t, &eps)
            .map_err(non_finite(step, format!("t = {t:.4}")))?;
        if !values.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                diagnostics: format!("{values:?} at t = {t:.4}"),
            });
        }
        mean.fm += values.fm * scale;
        mean.alpha += values.alpha * scale;
        mean.orth += values.orth * scale;
        mean.total += values.total * scale;
        for (name, g) in grads {
            let slot = acc.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            for (s, &x) in slot.iter_mut().zip(g.data()) {
                *s += x.as_f64() * scale;
            }
        }
    }
    let grad_norm = acc
        .values()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            diagnostics: format!("gradient norm {grad_norm}"),
        });
    }
    if let Some(clip) = train_cfg.grad_clip {
        if grad_norm > clip {
            let s = clip / grad_norm;
            acc.values_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
        }
    }
    opt.update(params, &acc)?;
    Ok(StepMetrics {
        step,
        fm: mean.fm,
        alpha: mean.alpha,
        orth: mean.orth,
        total: mean.total,
        grad_norm,
    })
}

/// Central-difference check of `total_loss` with respect to every model
/// parameter at a fixed `(t, ε)`.
pub fn model_gradcheck(
    params: &ParamStore<f64>,
    cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    sample: &TrainSample<f64>,
    t: f64,
    eps: &Tensor<f64>,
    h: f64,
) -> Result<GradCheckReport> {
    let (z_t, v_true) = interpolate(&sample.targets, eps, t)?;
    let names: Vec<String> = params.names().cloned().collect();
    let tensors: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let report = gradcheck::check(&tensors, h, |g, vars| {
        let bound = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
        let run = |g: &mut Graph<f64>| -> Result<revealtoy_tensor::Var> {
            let zt = g.constant(z_t.clone())?;
            let vt = g.constant(v_true.clone())?;
            let zgt = g.constant(sample.targets.clone())?;
            let out = forward(g, &bound, cfg, &sample.prep, zt, t)?;
            Ok(total_loss(g, out.velocity, vt, zt, zgt, t, &sample.prep.layout, loss_cfg)?.total)
        };
        run(g).map_err(|e| match e {
            Error::Tensor(te) => te,
            other => TensorError::Invalid {
                op: "model",
                detail: other.to_string(),
            },
        })
    });
    Ok(report?)
}

pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

/// One line of the finite-difference suite.
#[derive(Clone, Debug)]
pub struct CheckLine {
    pub name: String,
    pub report: GradCheckReport,
    pub tol: f64,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tol)
    }
}

/// A model small enough (about 1.4k parameters) for an exhaustive
/// finite-difference check: 4×4 canvas, 1-pixel patches, one block.
pub fn gradcheck_model() -> ModelConfig {
    ModelConfig {
        dim: 6,
        heads: 1,
        rope: crate::codec::RopeSplit::new(2, 2, 2),
        blocks: 1,
        mlp_ratio: 1,
        patch: 1,
        k_text: 1,
        canvas: 4,
        ..ModelConfig::default()
    }
}

/// Every differentiable tensor op, then the full `total_loss` graph of
/// [`gradcheck_model`] on a two-layer scene.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<CheckLine>> {
    let mut lines: Vec<CheckLine> = gradcheck::op_suite(1e-6)?
        .into_iter()
        .map(|(name, report)| CheckLine {
            name: name.to_string(),
            report,
            tol: OP_TOL,
        })
        .collect();
    let cfg = gradcheck_model();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ParamStore::<f64>::init(&cfg, &mut rng)?.perturbed(0.3, &mut rng);
    let gen = crate::synth::GeneratorConfig {
        canvas: 4,
        patch: 1,
        size_min: 1.0,
        size_max: 2.0,
        layers_min: 2,
        layers_max: 2,
        seed,
        ..Default::default()
    };
    let scene = crate::synth::generate_scene(&gen, scene_seed(seed, 0))?.scene;
    let sample = TrainSample::from_scene(&cfg, &scene)?;
    let eps_data = (0..sample.targets.len())
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let eps = Tensor::new(sample.targets.shape().to_vec(), eps_data)?;
    let report = model_gradcheck(&params, &cfg, &LossConfig::default(), &sample, 0.6, &eps, 1e-5)?;
    lines.push(CheckLine {
        name: format!("total_loss ({} params)", params.count()),
        report,
        tol: MODEL_TOL,
    });
    Ok(lines)
}

/// Runs optimizer steps until `opt.step == until`, drawing each step's
/// batch and noise from [`step_rng`]. `on_step` sees the updated state.
#[allow(clippy::too_many_arguments)]
pub fn run_steps<T: Element>(
    params: &mut ParamStore<T>,
    opt: &mut Adam<T>,
    samples: &[TrainSample<T>],
    seed: u64,
    until: u64,
    run: &RunConfig,
    mut on_step: impl FnMut(&StepMetrics, &ParamStore<T>, &Adam<T>) -> Result<()>,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    while opt.step < until {
        let mut rng = step_rng(seed, opt.step);
        let idx = pick_batch(&mut rng, samples.len(), run.train.batch_size);
        let batch: Vec<&TrainSample<T>> = idx.iter().map(|&i| &samples[i]).collect();
        let m = train_step(params, opt, &batch, &mut rng, &run.model, &run.loss, &run.train)?;
        on_step(&m, params, opt)?;
    }
    Ok(())
}
