mod support;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use revealtoy_core::codec::{BoundingBox, Role, TokenLayout};
use support::*;
use revealtoy_core::masks::{build_oga_attention_mask, build_oga_masks, build_raa_mask};
use revealtoy_tensor::{SparseMask, Tensor};

#[test]
fn four_token_example() {
    let boxes = [BoundingBox::new(0, 0, 1, 1)];
    let layout = TokenLayout::new(1, 1, 1, 1, &boxes).unwrap();
    let m = build_raa_mask(&layout, &boxes);
    let rows: Vec<Vec<usize>> = (0..4)
        .map(|q| (0..4).filter(|&k| m.is_allowed(q, k)).collect())
        .collect();
    assert_eq!(rows, vec![vec![0, 1, 2, 3], vec![0, 1], vec![0, 1, 2, 3], vec![0, 1, 3]]);
}

#[test]
fn cond_token_outside_every_box_is_in_no_region() {
    let boxes = [BoundingBox::new(0, 0, 2, 2)];
    let layout = TokenLayout::new(4, 4, 2, 2, &boxes).unwrap();
    let m = build_raa_mask(&layout, &boxes);
    let fg = layout.foreground(0).start;
    let cond = layout.cond();
    // patch 0 is inside, patches 1..4 are not
    assert!(m.is_allowed(fg, cond.start));
    for t in cond.start + 1..cond.end {
        assert!(!m.is_allowed(fg, t));
    }
}

#[test]
fn raa_matches_pair_oracle_on_random_layouts() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let (layout, boxes) = random_layout(&mut rng);
        let m = build_raa_mask(&layout, &boxes);
        let cls = classes(&layout);
        for q in 0..layout.len() {
            for k in 0..layout.len() {
                assert_eq!(m.is_allowed(q, k), oracle_allow(&layout, &boxes, &cls, q, k));
            }
            assert!(!m.is_skip(q), "fully blocked query row {q}");
        }
        for t in layout.text() {
            assert!((0..layout.len()).all(|q| m.is_allowed(q, t)));
        }
        let bg = layout.background();
        assert!((0..layout.len()).all(|k| m.is_allowed(bg.start, k)));
    }
}

#[test]
fn bias_and_sparse_forms_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (layout, boxes) = random_layout(&mut rng);
    let m = build_raa_mask(&layout, &boxes);
    let bias = m.bias::<f64>();
    let l = layout.len();
    assert_eq!(SparseMask::from_bias(bias.data(), l, l), m.to_sparse());
    assert!(bias.data().iter().all(|&b| b == 0.0 || b == revealtoy_tensor::BLOCKED));
}

#[test]
fn single_op_leakage_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let d = 4;
    let mut checked = 0;
    for _ in 0..200 {
        let (layout, boxes) = random_layout(&mut rng);
        let n = layout.n_foregrounds();
        if n < 2 {
            continue;
        }
        let bias = build_raa_mask(&layout, &boxes).bias::<f64>();
        let l = layout.len();
        let (q, k, v) = (
            random_tensor(&mut rng, l, d),
            random_tensor(&mut rng, l, d),
            random_tensor(&mut rng, l, d),
        );
        let base = attend(&q, &k, &v, &bias);
        let j = rng.random_range(0..n);
        let seg = layout.foreground(j);
        let perturb = |t: &Tensor<f64>, rng: &mut ChaCha8Rng| {
            let mut data = t.data().to_vec();
            for r in seg.clone() {
                for c in 0..d {
                    data[r * d + c] += rng.random_range(-50.0..50.0);
                }
            }
            Tensor::new([l, d], data).unwrap()
        };
        let (k2, v2) = (perturb(&k, &mut rng), perturb(&v, &mut rng));
        let moved = attend(&q, &k2, &v2, &bias);
        for i in (0..n).filter(|&i| i != j) {
            for r in layout.foreground(i) {
                for route in 0..2 {
                    let (a, b) = (&base[route][r * d..(r + 1) * d], &moved[route][r * d..(r + 1) * d]);
                    assert!(
                        a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
                        "FG({i}) row {r} changed when FG({j}) was perturbed"
                    );
                }
            }
        }
        checked += 1;
    }
    assert!(checked > 50);
}

#[test]
fn oga_two_box_example() {
    let b1 = BoundingBox::new(0, 0, 2, 1);
    let b2 = BoundingBox::new(1, 0, 2, 1);
    let m = build_oga_masks(&[b1, b2], 1, (3, 3));
    assert_eq!(m.layer(1), oracle_oga(&[b1, b2], 1, (3, 3))[1].as_slice());
    assert!(m.layer(1)[0] && m.layer(2)[2]);
    assert!((0..3).all(|i| !m.layer(i)[1]));
}

#[test]
fn oga_matches_set_oracle_and_is_disjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let patch = rng.random_range(1..=2);
        let grid = (rng.random_range(1..=8), rng.random_range(1..=8));
        let n = rng.random_range(1..=5);
        let boxes: Vec<BoundingBox> = (0..n).map(|_| random_box(&mut rng, patch, grid)).collect();
        let m = build_oga_masks(&boxes, patch, grid);
        let oracle = oracle_oga(&boxes, patch, grid);
        assert_eq!(m.n_layers(), n + 1);
        for (i, o) in oracle.iter().enumerate() {
            assert_eq!(m.layer(i), o.as_slice());
        }
        for cell in 0..grid.0 * grid.1 {
            let owners = (0..=n).filter(|&i| m.layer(i)[cell]).count();
            assert!(owners <= 1, "cell {cell} in {owners} masks");
            let covers = boxes
                .iter()
                .filter(|b| cell_in_box(b, patch, cell / grid.1, cell % grid.1))
                .count();
            assert_eq!(owners == 1, covers < 2);
        }
    }
}

#[test]
fn background_queries_see_outside_tokens_only() {
    let boxes = [BoundingBox::new(2, 2, 4, 2)];
    let layout = TokenLayout::new(8, 8, 2, 4, &boxes).unwrap();
    let rm = build_oga_masks(&boxes, 2, layout.grid());
    let am = build_oga_attention_mask(&layout, &rm);
    assert_eq!(am.n_queries(), layout.targets().len());
    assert_eq!(am.n_keys(), layout.grid_len());
    let inside = rm.region_patches(0).to_vec();
    assert_eq!(inside, vec![5, 6]);
    for k in 0..layout.grid_len() {
        assert_eq!(am.is_allowed(0, k), !inside.contains(&k));
    }
    assert_eq!(
        rm.region_tokens(&layout, 0),
        vec![layout.cond().start + 5, layout.cond().start + 6]
    );
}

#[test]
fn nested_box_rows_are_skipped() {
    let outer = BoundingBox::new(0, 0, 6, 6);
    let inner = BoundingBox::new(2, 2, 4, 4);
    let layout = TokenLayout::new(8, 8, 2, 4, &[outer, inner]).unwrap();
    let rm = build_oga_masks(&[outer, inner], 2, layout.grid());
    assert!(rm.is_empty_layer(2));
    assert!(!rm.is_empty_layer(1));
    let am = build_oga_attention_mask(&layout, &rm);
    let t0 = layout.targets().start;
    let fg2 = layout.foreground(1);
    let skipped: Vec<usize> = am.skip_rows().map(|r| r + t0).collect();
    assert_eq!(skipped, fg2.collect::<Vec<_>>());
    let sparse = am.to_sparse();
    assert!(skipped.iter().all(|&r| sparse.row(r - t0).is_empty()));
}

#[test]
fn oga_attention_matches_rule_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..200 {
        let (layout, boxes) = random_layout(&mut rng);
        let rm = build_oga_masks(&boxes, layout.patch(), layout.grid());
        let oracle = oracle_oga(&boxes, layout.patch(), layout.grid());
        let am = build_oga_attention_mask(&layout, &rm);
        let t0 = layout.targets().start;
        for q in layout.targets() {
            let layer = match layout.role_of(q) {
                Role::Background => 0,
                Role::Foreground(j) => j + 1,
                _ => unreachable!(),
            };
            for k in 0..layout.grid_len() {
                assert_eq!(am.is_allowed(q - t0, k), oracle[layer][k]);
            }
            assert_eq!(am.is_skip(q - t0), !oracle[layer].iter().any(|&c| c));
        }
    }
}
