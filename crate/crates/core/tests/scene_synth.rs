use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use revealtoy_core::codec::{composite_layers, BoundingBox, LayeredScene, RgbaImage, COMPOSITE_TOL};
use revealtoy_core::synth::{
    background_consistency_error, binary_mask, consistency_filter, dataset_read, dataset_write,
    generate_dataset, generate_scene, mask_iou, occlusion_filter, perturb_box_with, perturb_boxes,
    GeneratorConfig, PerturbKind, ROBUSTNESS_VARIANTS,
};
use revealtoy_core::Error;

fn small_config() -> GeneratorConfig {
    GeneratorConfig {
        canvas: 24,
        size_min: 3.0,
        size_max: 7.0,
        ..Default::default()
    }
}

#[test]
fn same_seed_same_scene() {
    let cfg = small_config();
    assert_eq!(generate_scene(&cfg, 7).unwrap(), generate_scene(&cfg, 7).unwrap());
    assert_ne!(
        generate_scene(&cfg, 7).unwrap().scene,
        generate_scene(&cfg, 8).unwrap().scene
    );
}

#[test]
fn single_layer_config() {
    let cfg = GeneratorConfig {
        layers_min: 1,
        layers_max: 1,
        ..small_config()
    };
    for rec in generate_dataset(&cfg, 10).unwrap() {
        assert_eq!(rec.scene.layer_count(), 1);
        assert!(!occlusion_filter(&rec.scene, 0.1));
    }
}

/// Back-to-front "over" with opacities in [0, 1], written per pixel.
fn oracle_composite(scene: &LayeredScene) -> Vec<f64> {
    let mut out = Vec::new();
    for y in 0..scene.height() {
        for x in 0..scene.width() {
            let mut c = scene.background.pixel(y, x);
            for fg in &scene.foregrounds {
                let f = fg.pixel(y, x);
                let a = (f[3] + 1.0) / 2.0;
                for ch in 0..3 {
                    c[ch] = a * f[ch] + (1.0 - a) * c[ch];
                }
            }
            out.extend_from_slice(&c[..3]);
        }
    }
    out
}

#[test]
fn generated_scenes_recomposite_within_tolerance() {
    let cfg = small_config();
    for rec in generate_dataset(&cfg, 100).unwrap() {
        let scene = &rec.scene;
        scene.validate().unwrap();
        let oracle = oracle_composite(scene);
        let got: Vec<f64> = scene
            .composite
            .data()
            .chunks(4)
            .flat_map(|p| p[..3].to_vec())
            .collect();
        let err = oracle
            .iter()
            .zip(&got)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= COMPOSITE_TOL + 1e-12, "seed {} off by {err}", rec.seed);
        for (fg, b) in scene.foregrounds.iter().zip(&scene.boxes) {
            assert_eq!(b.x % cfg.patch + b.y % cfg.patch + b.w % cfg.patch + b.h % cfg.patch, 0);
            // tight: the snapped box shrunk by one patch on any side would cut off support
            let support: Vec<(usize, usize)> = (0..scene.height())
                .flat_map(|y| (0..scene.width()).map(move |x| (y, x)))
                .filter(|&(y, x)| fg.pixel(y, x)[3] > -1.0)
                .collect();
            let y0 = support.iter().map(|p| p.0).min().unwrap();
            let x0 = support.iter().map(|p| p.1).min().unwrap();
            assert_eq!(b.y, y0 / cfg.patch * cfg.patch);
            assert_eq!(b.x, x0 / cfg.patch * cfg.patch);
        }
        assert!(consistency_filter(scene, 1.0 / 255.0));
    }
}

#[test]
fn soft_blobs_have_fractional_alpha() {
    let cfg = GeneratorConfig {
        shapes: vec![revealtoy_core::synth::ShapeKind::SoftBlob],
        ..small_config()
    };
    let rec = generate_scene(&cfg, 1).unwrap();
    let fractional = rec.scene.foregrounds[0]
        .data()
        .chunks(4)
        .filter(|p| p[3] > -1.0 && p[3] < 1.0)
        .count();
    assert!(fractional > 10);
}

fn rect_layer(size: usize, b: BoundingBox) -> RgbaImage {
    let mut img = RgbaImage::transparent(size, size);
    for y in b.y..b.y + b.h {
        for x in b.x..b.x + b.w {
            img.set_pixel(y, x, [0.5, -0.5, 0.0, 1.0]);
        }
    }
    img
}

fn rect_scene(boxes: &[BoundingBox]) -> LayeredScene {
    let bg = RgbaImage::filled(20, 20, [0.0, 0.0, 0.0, 1.0]);
    let fgs: Vec<RgbaImage> = boxes.iter().map(|&b| rect_layer(20, b)).collect();
    let comp = composite_layers(&bg, &fgs).unwrap();
    LayeredScene::new(comp, bg, fgs, boxes.to_vec()).unwrap()
}

#[test]
fn occlusion_filter_examples() {
    let a = BoundingBox::new(0, 0, 10, 10);
    let b = BoundingBox::new(5, 0, 10, 10);
    let scene = rect_scene(&[a, b]);
    let iou = mask_iou(&binary_mask(&scene.foregrounds[0]), &binary_mask(&scene.foregrounds[1]));
    assert!((iou - 50.0 / 150.0).abs() < 1e-15);
    assert!(occlusion_filter(&scene, 0.1));
    assert!(!occlusion_filter(&scene, 0.34));
    let disjoint = rect_scene(&[a, BoundingBox::new(10, 10, 10, 10)]);
    assert!(!occlusion_filter(&disjoint, 0.1));
}

#[test]
fn occlusion_requirement_is_met() {
    let cfg = GeneratorConfig {
        occluded_fraction: 1.0,
        ..small_config()
    };
    for rec in generate_dataset(&cfg, 100).unwrap() {
        assert!(occlusion_filter(&rec.scene, 0.1), "seed {}", rec.seed);
    }
}

#[test]
fn consistency_filter_rejects_corruption() {
    let mut scene = rect_scene(&[BoundingBox::new(0, 0, 10, 10)]);
    assert!(consistency_filter(&scene, 1.0 / 255.0));
    let mut bg = scene.background.clone();
    for y in 0..20 {
        for x in 10..20 {
            let mut p = bg.pixel(y, x);
            p[0] += 0.5;
            bg.set_pixel(y, x, p);
        }
    }
    scene.background = bg;
    // 200 of 300 outside pixels moved by 0.5 in one of three channels
    let expected = 200.0 * 0.5 / (300.0 * 3.0);
    assert!((background_consistency_error(&scene) - expected).abs() < 1e-12);
    assert!(!consistency_filter(&scene, 1.0 / 255.0));
    assert!(consistency_filter(&scene, expected));
    assert!(!consistency_filter(&scene, expected - 1e-9));
}

#[test]
fn robustness_variant_table() {
    let names: Vec<&str> = ROBUSTNESS_VARIANTS.iter().map(|v| v.name).collect();
    assert_eq!(names.len(), 6);
    assert_eq!(names[0], "precise");
    let ex = ROBUSTNESS_VARIANTS[1];
    assert_eq!((ex.kind, ex.lo, ex.hi), (Some(PerturbKind::Excessive), 0.10, 0.20));
}

#[test]
fn collapse_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = [BoundingBox::new(10, 10, 2, 2)];
    let err = perturb_boxes(&b, PerturbKind::Inadequate, 0.6, 0.9, 2, (32, 32), &mut rng);
    assert!(matches!(err, Err(Error::InvalidBox { index: 0, .. })));
}

fn snapped_box() -> impl Strategy<Value = BoundingBox> {
    (0usize..15, 0usize..15, 1usize..16, 1usize..16).prop_map(|(gx, gy, gw, gh)| {
        let gw = gw.min(16 - gx);
        let gh = gh.min(16 - gy);
        BoundingBox::new(gx * 2, gy * 2, gw * 2, gh * 2)
    })
}

proptest! {
    #[test]
    fn offset_preserves_extent(b in snapped_box(), u in 0.0f64..0.3, sx in prop::bool::ANY, sy in prop::bool::ANY) {
        let signs = (if sx { 1.0 } else { -1.0 }, if sy { 1.0 } else { -1.0 });
        let nb = perturb_box_with(&b, PerturbKind::Offset, u, signs, 2, (32, 32)).unwrap();
        prop_assert_eq!((nb.w, nb.h), (b.w, b.h));
        prop_assert!(nb.x + nb.w <= 32 && nb.y + nb.h <= 32);
        prop_assert_eq!(nb.x % 2 + nb.y % 2, 0);
    }

    #[test]
    fn scaling_keeps_center(b in snapped_box(), u in 0.0f64..0.3, grow in prop::bool::ANY) {
        let kind = if grow { PerturbKind::Excessive } else { PerturbKind::Inadequate };
        if let Some(nb) = perturb_box_with(&b, kind, u, (1.0, 1.0), 2, (32, 32)) {
            prop_assert!(nb.x + nb.w <= 32 && nb.y + nb.h <= 32);
            prop_assert_eq!((nb.x % 2, nb.y % 2, nb.w % 2, nb.h % 2), (0, 0, 0, 0));
            // snapping moves each edge by less than one patch, clamping only inward
            let c0 = (b.x as f64 + b.w as f64 / 2.0, b.y as f64 + b.h as f64 / 2.0);
            let c1 = (nb.x as f64 + nb.w as f64 / 2.0, nb.y as f64 + nb.h as f64 / 2.0);
            let clamped = |lo: f64, hi: f64| lo <= 0.0 || hi >= 32.0;
            let half_w = b.w as f64 * if grow { 1.0 + u } else { 1.0 - u } / 2.0;
            let half_h = b.h as f64 * if grow { 1.0 + u } else { 1.0 - u } / 2.0;
            if !clamped(c0.0 - half_w, c0.0 + half_w) {
                prop_assert!((c1.0 - c0.0).abs() <= 1.0);
            }
            if !clamped(c0.1 - half_h, c0.1 + half_h) {
                prop_assert!((c1.1 - c0.1).abs() <= 1.0);
            }
            if grow {
                prop_assert!(nb.x <= b.x && nb.y <= b.y);
                prop_assert!(nb.x + nb.w >= b.x + b.w && nb.y + nb.h >= b.y + b.h);
            }
        }
    }
}

#[test]
fn dataset_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let records = generate_dataset(&cfg, 6).unwrap();
    dataset_write(dir.path(), &cfg, &records).unwrap();
    let (manifest, back) = dataset_read(dir.path()).unwrap();
    assert_eq!(manifest.count, 6);
    assert_eq!(back, records);
    let dirs = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_type().unwrap().is_dir())
        .count();
    assert_eq!(dirs, manifest.count);
}

#[test]
fn empty_dataset_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    dataset_write(dir.path(), &small_config(), &[]).unwrap();
    let (manifest, back) = dataset_read(dir.path()).unwrap();
    assert_eq!((manifest.count, back.len()), (0, 0));
}

#[test]
fn missing_background_names_scene() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let records = generate_dataset(&cfg, 3).unwrap();
    dataset_write(dir.path(), &cfg, &records).unwrap();
    std::fs::remove_file(dir.path().join("scene_000002/background.png")).unwrap();
    match dataset_read(dir.path()) {
        Err(Error::Dataset { scene, detail }) => {
            assert_eq!(scene, 2);
            assert!(detail.contains("background.png"));
        }
        other => panic!("expected dataset error, got {other:?}"),
    }
}
