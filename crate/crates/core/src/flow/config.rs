use serde::{Deserialize, Serialize};

use crate::codec::{token_dim, RopeSplit};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Model width D.
    pub dim: usize,
    pub heads: usize,
    /// Per-head channel split between the layer, y and x RoPE axes.
    pub rope: RopeSplit,
    pub rope_theta: f64,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub k_text: usize,
    /// Square canvas side in pixels.
    pub canvas: usize,
    /// Region-aware attention mask; off means full self-attention.
    pub raa: bool,
    /// Occlusion-guided adapter after every block.
    pub oga: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            heads: 4,
            rope: RopeSplit::new(4, 6, 6),
            rope_theta: 100.0,
            blocks: 4,
            mlp_ratio: 4,
            patch: 2,
            k_text: 4,
            canvas: 32,
            raa: true,
            oga: true,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.rope.head_dim()
    }

    pub fn token_dim(&self) -> usize {
        token_dim(self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.rope.validate(self.head_dim())?;
        if self.heads == 0 || self.heads * self.head_dim() != self.dim {
            return bad(format!(
                "{} heads of width {} do not make dim {}",
                self.heads,
                self.head_dim(),
                self.dim
            ));
        }
        if self.blocks == 0 || self.mlp_ratio == 0 || self.k_text == 0 {
            return bad("blocks, mlp_ratio and k_text must be positive".into());
        }
        if self.patch == 0 || !self.canvas.is_multiple_of(self.patch) {
            return bad(format!("canvas {} not divisible by patch {}", self.canvas, self.patch));
        }
        if !(self.rope_theta > 1.0) {
            return bad("rope_theta must exceed 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub tau: f64,
    pub gamma: f64,
    pub eps_log: f64,
    pub eps_cos: f64,
    pub lambda_alpha: f64,
    pub lambda_orth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.95,
            gamma: 1.5,
            eps_log: 1e-6,
            eps_cos: 1e-6,
            lambda_alpha: 1.0,
            lambda_orth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        // δ^γ is differentiated at δ = 0, which needs γ ≥ 1
        let ok = self.tau > 0.0
            && self.tau < 1.0
            && self.gamma >= 1.0
            && self.eps_log > 0.0
            && self.eps_cos > 0.0
            && self.lambda_alpha >= 0.0
            && self.lambda_orth >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss config {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; `None` disables it.
    pub grad_clip: Option<f64>,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            grad_clip: Some(1.0),
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && self.batch_size > 0
            && self.grad_clip.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config {self:?}")))
        }
    }
}

/// Everything a `train` run needs besides data; the JSON form of `--config`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }
}
