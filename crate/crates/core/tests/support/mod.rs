//! Independent oracles shared by the integration tests and the acceptance
//! run.
#![allow(dead_code)]

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use revealtoy_core::codec::{BoundingBox, Role, TokenLayout};
use revealtoy_core::flow::{alpha_loss, LossConfig};
use revealtoy_tensor::{Graph, SparseMask, Tensor};

pub fn random_box(rng: &mut ChaCha8Rng, patch: usize, grid: (usize, usize)) -> BoundingBox {
    let gy = rng.random_range(0..grid.0);
    let gx = rng.random_range(0..grid.1);
    let gh = rng.random_range(1..=grid.0 - gy);
    let gw = rng.random_range(1..=grid.1 - gx);
    BoundingBox::new(gx * patch, gy * patch, gw * patch, gh * patch)
}

/// Random layout with at most 128 tokens and 1..=4 foregrounds.
pub fn random_layout(rng: &mut ChaCha8Rng) -> (TokenLayout, Vec<BoundingBox>) {
    loop {
        let patch = rng.random_range(1..=2);
        let grid = (rng.random_range(1..=6), rng.random_range(1..=6));
        let k_text = rng.random_range(1..=4);
        let n = rng.random_range(1..=4);
        let boxes: Vec<BoundingBox> = (0..n).map(|_| random_box(rng, patch, grid)).collect();
        let layout =
            TokenLayout::new(grid.0 * patch, grid.1 * patch, patch, k_text, &boxes).unwrap();
        if layout.len() <= 128 {
            return (layout, boxes);
        }
    }
}

/// Pixel-geometry test: does the patch at grid cell (gy, gx) lie in `b`?
pub fn cell_in_box(b: &BoundingBox, patch: usize, gy: usize, gx: usize) -> bool {
    let (y, x) = (gy * patch, gx * patch);
    y >= b.y && y + patch <= b.y + b.h && x >= b.x && x + patch <= b.x + b.w
}

#[derive(Clone, Copy, PartialEq)]
pub enum Class {
    Text,
    Cond,
    Bg,
    Fg(usize),
}

pub fn classes(layout: &TokenLayout) -> Vec<Class> {
    let mut out = Vec::with_capacity(layout.len());
    for seg in layout.segments() {
        let c = match seg.role {
            Role::Text => Class::Text,
            Role::Cond => Class::Cond,
            Role::Background => Class::Bg,
            Role::Foreground(j) => Class::Fg(j),
        };
        out.extend(seg.range.clone().map(|_| c));
    }
    out
}

pub fn oracle_allow(
    layout: &TokenLayout,
    boxes: &[BoundingBox],
    cls: &[Class],
    q: usize,
    k: usize,
) -> bool {
    let pos = layout.positions();
    let in_region = |i: usize, t: usize| {
        cls[t] == Class::Cond
            && cell_in_box(&boxes[i], layout.patch(), pos[t][1] as usize, pos[t][2] as usize)
    };
    cls[k] == Class::Text
        || matches!(cls[q], Class::Text | Class::Bg)
        || (cls[q] == Class::Cond && cls[k] == Class::Cond)
        || matches!(cls[q], Class::Fg(i) if cls[k] == Class::Fg(i) || in_region(i, k))
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::new([rows, cols], data).unwrap()
}

/// One masked attention application by both the fused sparse kernel and
/// the dense bias route.
pub fn attend(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, bias: &Tensor<f64>) -> [Vec<f64>; 2] {
    let l = q.rows();
    let mut g = Graph::new();
    let (qv, kv, vv) = (
        g.constant(q.clone()).unwrap(),
        g.constant(k.clone()).unwrap(),
        g.constant(v.clone()).unwrap(),
    );
    let mask = Arc::new(SparseMask::from_bias(bias.data(), l, l));
    let fused = g.attention(qv, kv, vv, mask, 1).unwrap();
    let kt = g.transpose(kv).unwrap();
    let logits = g.matmul(qv, kt).unwrap();
    let logits = g.scale(logits, 1.0 / (q.cols() as f64).sqrt()).unwrap();
    let p = g.softmax_masked(logits, bias).unwrap();
    let dense = g.matmul(p, vv).unwrap();
    [g.value(fused).data().to_vec(), g.value(dense).data().to_vec()]
}

pub fn oracle_oga(boxes: &[BoundingBox], patch: usize, grid: (usize, usize)) -> Vec<Vec<bool>> {
    let mut layers = vec![vec![false; grid.0 * grid.1]; boxes.len() + 1];
    for gy in 0..grid.0 {
        for gx in 0..grid.1 {
            let inside: Vec<usize> = (0..boxes.len())
                .filter(|&j| cell_in_box(&boxes[j], patch, gy, gx))
                .collect();
            let cell = gy * grid.1 + gx;
            match inside.as_slice() {
                [] => layers[0][cell] = true,
                [only] => layers[only + 1][cell] = true,
                _ => {}
            }
        }
    }
    layers
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn psnr_oracle(a: &[f64], b: &[f64], max_val: f64) -> f64 {
    let mut sq = 0.0;
    for i in 0..a.len() {
        sq += (a[i] - b[i]).powi(2);
    }
    if sq == 0.0 {
        return 99.0;
    }
    (20.0 * max_val.log10() - 10.0 * (sq / a.len() as f64).log10()).min(99.0)
}

/// Separable-filter SSIM: 1-D Gaussian taps, valid convolution.
pub fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> f64 {
    let taps: Vec<f64> = {
        let raw: Vec<f64> = (-5i32..=5).map(|k| (-(k * k) as f64 / 4.5).exp()).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    };
    let filt = |img: &[f64]| {
        let ow = w - 10;
        let mut rows = vec![0.0; h * ow];
        for y in 0..h {
            for x in 0..ow {
                rows[y * ow + x] = (0..11).map(|k| taps[k] * img[y * w + x + k]).sum();
            }
        }
        let oh = h - 10;
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..11).map(|k| taps[k] * rows[(y + k) * ow + x]).sum();
            }
        }
        out
    };
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let (ma, mb) = (filt(a), filt(b));
    let (saa, sbb, sab) = (filt(&prod(a, a)), filt(&prod(b, b)), filt(&prod(a, b)));
    let c1 = (0.01 * range) * (0.01 * range);
    let c2 = (0.03 * range) * (0.03 * range);
    let n = ma.len();
    (0..n)
        .map(|i| {
            let va = saa[i] - ma[i] * ma[i];
            let vb = sbb[i] - mb[i] * mb[i];
            let cov = sab[i] - ma[i] * mb[i];
            (2.0 * ma[i] * mb[i] + c1) * (2.0 * cov + c2)
                / ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2))
        })
        .sum::<f64>()
        / n as f64
}

pub fn soft_iou_oracle(a: &[f64], b: &[f64]) -> f64 {
    let inter: f64 = a.iter().zip(b).map(|(x, y)| if x < y { *x } else { *y }).sum();
    let union: f64 = a.iter().zip(b).map(|(x, y)| x + y).sum::<f64>() - inter;
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}

/// `(SAD/1000, MAD, MSE)` by direct summation.
pub fn matting_oracle(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut abs = 0.0;
    let mut sq = 0.0;
    for i in 0..a.len() {
        abs += (a[i] - b[i]).abs();
        sq += (a[i] - b[i]) * (a[i] - b[i]);
    }
    let n = a.len() as f64;
    (abs / 1000.0, abs / n, sq / n)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Per-layer mean squared error, summed over layers.
pub fn fm_oracle(vh: &Tensor<f64>, vt: &Tensor<f64>, layers: &[std::ops::Range<usize>]) -> f64 {
    let c = vh.cols();
    let mut total = 0.0;
    for r in layers {
        let mut s = 0.0;
        for i in r.clone() {
            for k in 0..c {
                let d = vh.data()[i * c + k] - vt.data()[i * c + k];
                s += d * d;
            }
        }
        total += s / (r.len() * c) as f64;
    }
    total
}

/// Alpha-loss of one layer where every token holds `p` pixels whose alpha
/// values are given (signed domain).
pub fn alpha_value(pred: &[f64], gt: &[f64], patch: usize, cfg: &LossConfig) -> f64 {
    let px = patch * patch;
    let rows = pred.len() / px;
    let tok = |a: &[f64]| {
        let mut d = vec![0.0; rows * px * 4];
        for (i, &v) in a.iter().enumerate() {
            d[i * 4 + 3] = v;
        }
        Tensor::new([rows, px * 4], d).unwrap()
    };
    let mut g = Graph::new();
    let a = g.constant(tok(pred)).unwrap();
    let b = g.constant(tok(gt)).unwrap();
    let l = alpha_loss(&mut g, a, b, &[0..rows], patch, cfg).unwrap();
    g.value(l).item()
}

pub fn alpha_oracle(pred: &[f64], gt: &[f64], cfg: &LossConfig) -> f64 {
    let n = pred.len() as f64;
    pred.iter()
        .zip(gt)
        .map(|(&p, &q)| {
            let pa = ((p + 1.0) / 2.0).clamp(0.0, 1.0);
            let qa = (q + 1.0) / 2.0;
            let d = cfg.tau * (pa - qa).abs();
            -d.powf(cfg.gamma) * (1.0 - d + cfg.eps_log).ln()
        })
        .sum::<f64>()
        / n
}

pub fn cosine_oracle(a: [f64; 3], b: [f64; 3], eps: f64) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < eps || nb < eps {
        return 0.0;
    }
    a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (na * nb + eps)
}

/// Random target tokens for `layout` (p = 1, so one pixel per token).
pub fn random_targets(rng: &mut ChaCha8Rng, layout: &TokenLayout) -> Tensor<f64> {
    randn(rng, &[layout.targets().len(), layout.token_dim()])
}

pub fn orth_oracle(layout: &TokenLayout, pred: &Tensor<f64>, gt: &Tensor<f64>, eps: f64) -> f64 {
    let gw = layout.grid().1;
    let ranges = layout.target_layer_ranges();
    let sim = |z: &Tensor<f64>, j: usize| {
        let b = layout.boxes()[j];
        let r = &ranges[j + 1];
        let mut total = 0.0;
        let mut k = 0;
        for y in b.y..b.y + b.h {
            for x in b.x..b.x + b.w {
                let bgp = z.row(y * gw + x);
                let fgp = z.row(r.start + k);
                total += cosine_oracle([bgp[0], bgp[1], bgp[2]], [fgp[0], fgp[1], fgp[2]], eps);
                k += 1;
            }
        }
        total / k as f64
    };
    (0..layout.n_foregrounds())
        .map(|j| (sim(pred, j) - sim(gt, j)).abs())
        .sum()
}

