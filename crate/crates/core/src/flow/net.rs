//! Forward pass of the toy multi-layer transformer.

use std::sync::Arc;

use revealtoy_tensor::{Element, Graph, RotaryTable, SparseMask, Tensor, Var};

use super::config::ModelConfig;
use super::params::Bound;
use crate::codec::{rope_table, Role, TokenLayout};
use crate::error::{Error, Result};
use crate::masks::{build_oga_attention_mask, build_oga_masks, build_raa_mask, AttentionMask};

const LN_EPS: f64 = 1e-6;

/// Per-scene constants of the forward pass: layout, condition tokens,
/// attention patterns and rotary tables.
#[derive(Clone, Debug)]
pub struct Prepared<T: Element> {
    pub layout: TokenLayout,
    pub cond: Tensor<T>,
    pub raa: AttentionMask,
    pub oga: AttentionMask,
    /// False when `raa` is the dense ablation mask.
    pub region_aware: bool,
    raa_sparse: Arc<SparseMask>,
    oga_sparse: Arc<SparseMask>,
    rope_all: Arc<RotaryTable<T>>,
    rope_targets: Arc<RotaryTable<T>>,
    rope_cond: Arc<RotaryTable<T>>,
    /// Role-embedding row per target token: 0 background, 1 foreground.
    roles: Arc<Vec<usize>>,
}

impl<T: Element> Prepared<T> {
    pub fn new(cfg: &ModelConfig, layout: TokenLayout, cond: Tensor<T>) -> Result<Self> {
        if layout.canvas() != (cfg.canvas, cfg.canvas)
            || layout.patch() != cfg.patch
            || layout.text().len() != cfg.k_text
        {
            return Err(Error::Config(format!(
                "layout (canvas {:?}, patch {}, {} text tokens) does not match the model",
                layout.canvas(),
                layout.patch(),
                layout.text().len()
            )));
        }
        if cond.shape() != [layout.grid_len(), cfg.token_dim()] {
            return Err(Error::SizeMismatch(format!(
                "condition tokens {:?} for a grid of {}",
                cond.shape(),
                layout.grid_len()
            )));
        }
        let l = layout.len();
        let raa = if cfg.raa {
            build_raa_mask(&layout, layout.boxes())
        } else {
            AttentionMask::full(l, l)
        };
        let regions = build_oga_masks(layout.boxes(), layout.patch(), layout.grid());
        let oga = build_oga_attention_mask(&layout, &regions);
        let pos = layout.positions();
        let rope = |p: &[[u32; 3]]| Arc::new(rope_table::<T>(p, cfg.rope, cfg.rope_theta));
        let roles = layout
            .targets()
            .map(|t| match layout.role_of(t) {
                Role::Background => 0,
                _ => 1,
            })
            .collect();
        Ok(Prepared {
            raa_sparse: Arc::new(raa.to_sparse()),
            oga_sparse: Arc::new(oga.to_sparse()),
            rope_all: rope(pos),
            rope_targets: rope(&pos[layout.targets()]),
            rope_cond: rope(&pos[layout.cond()]),
            roles: Arc::new(roles),
            layout,
            cond,
            raa,
            oga,
            region_aware: cfg.raa,
        })
    }

    pub fn n_targets(&self) -> usize {
        self.layout.targets().len()
    }
}

pub struct ForwardOut {
    /// Target-token hidden states entering the output head.
    pub features: Var,
    /// Predicted velocity `[targets × 4p²]`.
    pub velocity: Var,
}

/// Sinusoidal embedding of `t` with `dim` channels (cosines then sines).
pub fn timestep_embedding<T: Element>(t: f64, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = vec![T::zero(); dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        data[k] = T::from_f64(arg.cos());
        data[half + k] = T::from_f64(arg.sin());
    }
    Tensor::new([1, dim], data).expect("embedding shape")
}

struct Ctx<'a, T: Element> {
    g: &'a mut Graph<T>,
    p: &'a Bound,
    d: usize,
}

impl<T: Element> Ctx<'_, T> {
    fn linear(&mut self, x: Var, name: &str, bias: bool) -> Result<Var> {
        let w = self.p.get(&format!("{name}.w"));
        let b = bias.then(|| self.p.get(&format!("{name}.b")));
        Ok(self.g.linear(x, w, b)?)
    }

    /// Chunk `i` of a `[1 × k·D]` modulation vector.
    fn chunk(&mut self, m: Var, i: usize) -> Result<Var> {
        Ok(self.g.slice_cols(m, i * self.d, (i + 1) * self.d)?)
    }

    /// `LN(x) · (1 + scale) + shift`
    fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let h = self.g.layer_norm(x, LN_EPS)?;
        let s = self.g.add_scalar(scale, 1.0)?;
        let h = self.g.mul_row(h, s)?;
        Ok(self.g.add_row(h, shift)?)
    }

    fn mlp(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let (w1, b1) = (self.p.get(&format!("{prefix}.w1")), self.p.get(&format!("{prefix}.b1")));
        let (w2, b2) = (self.p.get(&format!("{prefix}.w2")), self.p.get(&format!("{prefix}.b2")));
        let h = self.g.linear(x, w1, Some(b1))?;
        let h = self.g.silu(h)?;
        Ok(self.g.linear(h, w2, Some(b2))?)
    }
}

/// One double-stream block: separate text/image weights, joint masked
/// self-attention over the whole sequence.
fn double_block<T: Element>(
    cx: &mut Ctx<'_, T>,
    cfg: &ModelConfig,
    prep: &Prepared<T>,
    b: usize,
    streams: [Var; 2],
    temb: Var,
) -> Result<[Var; 2]> {
    let names = ["txt", "img"];
    let mut mods = Vec::with_capacity(2);
    let (mut qs, mut ks, mut vs) = (Vec::new(), Vec::new(), Vec::new());
    for (s, &x) in names.iter().zip(&streams) {
        let prefix = format!("blocks.{b}.{s}");
        let m = cx.linear(temb, &format!("{prefix}.mod"), true)?;
        let chunks: Vec<Var> = (0..6).map(|i| cx.chunk(m, i)).collect::<Result<_>>()?;
        let h = cx.modulate(x, chunks[0], chunks[1])?;
        let qkv = cx.linear(h, &format!("{prefix}.qkv"), true)?;
        qs.push(cx.g.slice_cols(qkv, 0, cx.d)?);
        ks.push(cx.g.slice_cols(qkv, cx.d, 2 * cx.d)?);
        vs.push(cx.g.slice_cols(qkv, 2 * cx.d, 3 * cx.d)?);
        mods.push(chunks);
    }
    let q = cx.g.concat_rows(&qs)?;
    let k = cx.g.concat_rows(&ks)?;
    let v = cx.g.concat_rows(&vs)?;
    let q = cx.g.rotary(q, prep.rope_all.clone())?;
    let k = cx.g.rotary(k, prep.rope_all.clone())?;
    let a = cx.g.attention(q, k, v, prep.raa_sparse.clone(), cfg.heads)?;

    let n_text = prep.layout.text().len();
    let total = prep.layout.len();
    let mut out = [streams[0]; 2];
    for (si, s) in names.iter().enumerate() {
        let prefix = format!("blocks.{b}.{s}");
        let (lo, hi) = if si == 0 { (0, n_text) } else { (n_text, total) };
        let m = &mods[si];
        let a_s = cx.g.slice_rows(a, lo, hi)?;
        let o = cx.linear(a_s, &format!("{prefix}.proj"), true)?;
        let o = cx.g.mul_row(o, m[2])?;
        let x = cx.g.add(streams[si], o)?;
        let h = cx.modulate(x, m[3], m[4])?;
        let h = cx.mlp(h, &format!("{prefix}.mlp"))?;
        let h = cx.g.mul_row(h, m[5])?;
        out[si] = cx.g.add(x, h)?;
    }
    Ok(out)
}

/// Occlusion-guided adapter: target tokens cross-attend to the current
/// condition tokens through the per-layer region masks. The output
/// projection has no bias, so rows with no visible key pass through.
fn oga_block<T: Element>(
    cx: &mut Ctx<'_, T>,
    cfg: &ModelConfig,
    prep: &Prepared<T>,
    b: usize,
    img: Var,
) -> Result<Var> {
    let g_len = prep.layout.grid_len();
    let n = g_len + prep.n_targets();
    let cond = cx.g.slice_rows(img, 0, g_len)?;
    let tgt = cx.g.slice_rows(img, g_len, n)?;
    let prefix = format!("blocks.{b}.oga");
    let tq = cx.g.layer_norm(tgt, LN_EPS)?;
    let ck = cx.g.layer_norm(cond, LN_EPS)?;
    let q = cx.linear(tq, &format!("{prefix}.q"), false)?;
    let k = cx.linear(ck, &format!("{prefix}.k"), false)?;
    let v = cx.linear(ck, &format!("{prefix}.v"), false)?;
    let q = cx.g.rotary(q, prep.rope_targets.clone())?;
    let k = cx.g.rotary(k, prep.rope_cond.clone())?;
    let a = cx.g.attention(q, k, v, prep.oga_sparse.clone(), cfg.heads)?;
    let o = cx.linear(a, &format!("{prefix}.out"), false)?;
    let tgt = cx.g.add(tgt, o)?;
    Ok(cx.g.concat_rows(&[cond, tgt])?)
}

/// Predicts the velocity of every target token of `prep.layout` from the
/// noisy targets `z_t: [targets × 4p²]` at time `t`.
pub fn forward<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    prep: &Prepared<T>,
    z_t: Var,
    t: f64,
) -> Result<ForwardOut> {
    let n_t = prep.n_targets();
    if g.shape(z_t) != [n_t, cfg.token_dim()] {
        return Err(Error::SizeMismatch(format!(
            "noisy targets {:?}, layout has {n_t} target tokens",
            g.shape(z_t)
        )));
    }
    let d = cfg.dim;
    let mut cx = Ctx { g, p, d };

    let te = cx.g.constant(timestep_embedding(t, d))?;
    let temb = {
        let (w1, b1) = (cx.p.get("time.w1"), cx.p.get("time.b1"));
        let (w2, b2) = (cx.p.get("time.w2"), cx.p.get("time.b2"));
        let h = cx.g.linear(te, w1, Some(b1))?;
        let h = cx.g.silu(h)?;
        let h = cx.g.linear(h, w2, Some(b2))?;
        // every modulation reads silu(c)
        cx.g.silu(h)?
    };

    let cond_in = cx.g.constant(prep.cond.clone())?;
    let cond = cx.linear(cond_in, "cond_in", true)?;
    let tgt = cx.linear(z_t, "img_in", true)?;
    let role = cx.g.gather_rows(cx.p.get("role_emb"), prep.roles.clone())?;
    let tgt = cx.g.add(tgt, role)?;
    let mut img = cx.g.concat_rows(&[cond, tgt])?;
    let mut txt = cx.p.get("text_emb");

    for b in 0..cfg.blocks {
        [txt, img] = double_block(&mut cx, cfg, prep, b, [txt, img], temb)?;
        if cfg.oga {
            img = oga_block(&mut cx, cfg, prep, b, img)?;
        }
    }
    let g_len = prep.layout.grid_len();
    let features = cx.g.slice_rows(img, g_len, g_len + n_t)?;
    let m = cx.linear(temb, "final.mod", true)?;
    let (shift, scale) = (cx.chunk(m, 0)?, cx.chunk(m, 1)?);
    let h = cx.modulate(features, shift, scale)?;
    let velocity = cx.linear(h, "head", true)?;
    Ok(ForwardOut { features, velocity })
}
