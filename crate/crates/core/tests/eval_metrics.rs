mod support;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use revealtoy_core::codec::RopeSplit;
use revealtoy_core::eval::*;
use revealtoy_core::flow::{sample_euler, LossConfig, ModelConfig, ParamStore, SampleOptions};
use revealtoy_core::synth::{generate_dataset, GeneratorConfig, ROBUSTNESS_VARIANTS};
use support::*;

#[test]
fn metrics_match_brute_force_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let h = rng.random_range(11..20);
        let w = rng.random_range(11..20);
        let a = rand_vec(&mut rng, h * w, -1.0, 1.0);
        let b = rand_vec(&mut rng, h * w, -1.0, 1.0);
        assert!((psnr(&a, &b, 2.0) - psnr_oracle(&a, &b, 2.0)).abs() < 1e-9);
        let s = ssim(&a, &b, h, w, 2.0).unwrap();
        assert!((s - ssim_oracle(&a, &b, h, w, 2.0)).abs() < 1e-9);

        let pa = rand_vec(&mut rng, h * w, 0.0, 1.0);
        let pb = rand_vec(&mut rng, h * w, 0.0, 1.0);
        assert!((soft_iou(&pa, &pb) - soft_iou_oracle(&pa, &pb)).abs() < 1e-9);
        let m = matting_errors(&pa, &pb);
        let (sad, mad, mse) = matting_oracle(&pa, &pb);
        assert!((m.sad - sad).abs() < 1e-9);
        assert!((m.mad - mad).abs() < 1e-9);
        assert!((m.mse - mse).abs() < 1e-9);
    }
}

#[test]
fn psnr_examples() {
    let a = vec![0.25; 64];
    assert_eq!(psnr(&a, &a, 1.0), PSNR_CAP);
    // MSE 0.01 on a unit range is 20 dB
    let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
    assert!((psnr(&a, &b, 1.0) - 20.0).abs() < 1e-9);
}

#[test]
fn ssim_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_vec(&mut rng, 16 * 16, -1.0, 1.0);
    let b = rand_vec(&mut rng, 16 * 16, -1.0, 1.0);
    assert!((ssim(&a, &a, 16, 16, 2.0).unwrap() - 1.0).abs() < 1e-12);
    let ab = ssim(&a, &b, 16, 16, 2.0).unwrap();
    assert!((ab - ssim(&b, &a, 16, 16, 2.0).unwrap()).abs() < 1e-12);
    assert!((-1.0..1.0).contains(&ab));
    let shifted: Vec<f64> = a.iter().map(|v| v + 0.5).collect();
    assert!(ssim(&a, &shifted, 16, 16, 2.0).unwrap() < 1.0);
    assert!(ssim(&a, &a, 10, 16, 2.0).is_err());
}

#[test]
fn soft_iou_examples() {
    assert_eq!(soft_iou(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
    assert_eq!(soft_iou(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    assert!((soft_iou(&[0.5, 1.0], &[1.0, 1.0]) - 0.75).abs() < 1e-12);
}

#[test]
fn matting_uniform_offset() {
    let gt = vec![0.3; 100];
    let pred = vec![0.4; 100];
    let m = matting_errors(&pred, &gt);
    assert!((m.sad - 0.01).abs() < 1e-12);
    assert!((m.mad - 0.1).abs() < 1e-12);
    assert!((m.mse - 0.01).abs() < 1e-12);
}

#[test]
fn laplacian_texture_examples() {
    let flat = vec![0.7; 64];
    assert!((texture_logvar_laplacian(&flat, 8, 8).unwrap() - 1e-12f64.ln()).abs() < 1e-9);
    let checker: Vec<f64> = (0..64).map(|i| if (i / 8 + i % 8) % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let ramp: Vec<f64> = (0..64).map(|i| (i % 8) as f64 / 8.0).collect();
    assert!(
        texture_logvar_laplacian(&checker, 8, 8).unwrap() > texture_logvar_laplacian(&ramp, 8, 8).unwrap()
    );
}

fn small_model() -> ModelConfig {
    ModelConfig {
        dim: 16,
        heads: 2,
        rope: RopeSplit::new(2, 2, 4),
        blocks: 1,
        mlp_ratio: 2,
        k_text: 2,
        canvas: 16,
        ..Default::default()
    }
}

fn scenes(n: usize) -> Vec<revealtoy_core::codec::LayeredScene> {
    let gen = GeneratorConfig {
        canvas: 16,
        size_min: 3.0,
        size_max: 5.0,
        ..Default::default()
    };
    generate_dataset(&gen, n).unwrap().into_iter().map(|r| r.scene).collect()
}

#[test]
fn orth_trajectory_contracts() {
    let cfg = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = ParamStore::<f64>::init(&cfg, &mut rng).unwrap().perturbed(0.05, &mut rng);
    let scene = &scenes(1)[0];
    let lc = LossConfig::default();
    let a = orth_trajectory(&params, &cfg, &lc, scene, 4, 7).unwrap();
    let b = orth_trajectory(&params, &cfg, &lc, scene, 4, 7).unwrap();
    assert_eq!(a.len(), 4);
    assert_eq!(a, b);
    assert!(a.iter().all(|v| v.is_finite() && *v >= 0.0));
    let opts = SampleOptions {
        steps: 4,
        seed: 7,
        shared_noise: false,
    };
    let pred = sample_euler(&params, &cfg, &scene.composite, &scene.boxes, &opts).unwrap();
    let last = orth_of_decomposition::<f64>(&cfg, &lc, &pred, scene).unwrap();
    assert!((a[3] - last).abs() < 1e-9, "{} vs {last}", a[3]);
}

#[test]
fn oracle_decomposition_scores_perfectly() {
    let report = evaluate_oracle(&scenes(3), "oracle").unwrap();
    let m = report.aggregate;
    assert_eq!((m.bg_psnr, m.fg_psnr), (PSNR_CAP, PSNR_CAP));
    assert!((m.fg_soft_iou - 1.0).abs() < 1e-12 && (m.bg_ssim - 1.0).abs() < 1e-12);
    assert_eq!((m.fg_sad, m.fg_mad, m.fg_mse), (0.0, 0.0, 0.0));
}

#[test]
fn robustness_rows() {
    let cfg = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = ParamStore::<f32>::init(&cfg, &mut rng).unwrap().perturbed(0.05, &mut rng);
    let sc = scenes(2);
    let opts = SampleOptions {
        steps: 2,
        seed: 5,
        shared_noise: false,
    };
    let rows = robustness_sweep(&params, &cfg, &sc, &opts).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
    let expect: Vec<&str> = ROBUSTNESS_VARIANTS.iter().map(|v| v.name).collect();
    assert_eq!(names, expect);
    let plain = evaluate(&params, &cfg, &LossConfig::default(), &sc, &opts, false, "x").unwrap();
    assert_eq!(rows[0].metrics, plain.aggregate);
    assert!(plain.robustness.is_none());
    assert!(plain.to_markdown().contains("| mean |"));
}
