mod common;

use motion_evolve::appearance::FeatureMap;
use motion_evolve::autograd::testing::random_tensor;
use motion_evolve::generator::{fuse_views, normalize_confidences, ConfidenceMask};
use motion_evolve::keypoints::{sparse_displacements, KeypointSet};
use motion_evolve::primitives::{warp, DeformationField};
use motion_evolve::Tensor;
use proptest::prelude::*;

#[test]
fn exact_invariants_hold() {
    common::exact_invariants().unwrap();
}

fn views(n: usize, seed: u64) -> (Vec<FeatureMap>, Vec<FeatureMap>, Vec<Tensor>) {
    let fm = |s: u64| FeatureMap::new(random_tensor(&[3, 4, 5], s, 1.0), 4).unwrap();
    let motion = (0..n as u64).map(|i| fm(seed + i)).collect();
    let appearance = (0..n as u64).map(|i| fm(seed + 100 + i)).collect();
    let masks: Vec<ConfidenceMask> = (0..n as u64)
        .map(|i| ConfidenceMask::new(random_tensor(&[1, 4, 5], seed + 200 + i, 1.0).map(f64::abs)).unwrap())
        .collect();
    (motion, appearance, normalize_confidences(&masks).unwrap())
}

fn rotate<T: Clone>(v: &[T], r: usize) -> Vec<T> {
    v[r..].iter().chain(&v[..r]).cloned().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fusion_ignores_view_order(n in 1usize..5, seed in 0u64..1000, rot in 0usize..5) {
        let (m, a, w) = views(n, seed);
        let (fm, fa) = fuse_views(&m, &a, &w).unwrap();
        let r = rot % n;
        let (gm, ga) = fuse_views(&rotate(&m, r), &rotate(&a, r), &rotate(&w, r)).unwrap();
        prop_assert!(fm.tensor().max_abs_diff(gm.tensor()) <= 1e-12);
        prop_assert!(fa.tensor().max_abs_diff(ga.tensor()) <= 1e-12);
    }

    #[test]
    fn normalized_confidences_sum_to_one(n in 1usize..6, seed in 0u64..1000, zero in any::<bool>()) {
        let masks: Vec<ConfidenceMask> = (0..n as u64)
            .map(|i| {
                let t = random_tensor(&[1, 3, 3], seed + i, 5.0).map(f64::abs);
                ConfidenceMask::new(if zero { Tensor::zeros(&[1, 3, 3]) } else { t }).unwrap()
            })
            .collect();
        let w = normalize_confidences(&masks).unwrap();
        for p in 0..9 {
            let s: f64 = w.iter().map(|t| t.data()[p]).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            prop_assert!(w.iter().all(|t| t.data()[p] >= 0.0));
        }
        if zero {
            prop_assert!(w.iter().all(|t| (t.data()[0] - 1.0 / n as f64).abs() < 1e-12));
        }
    }

    #[test]
    fn warping_a_constant_image_is_constant(c in -2.0f64..2.0, seed in 0u64..1000, scale in 0.0f64..3.0) {
        let img = Tensor::full(&[2, 6, 5], c);
        let field = DeformationField::new(random_tensor(&[2, 6, 5], seed, scale)).unwrap();
        let out = warp(&img, &field).unwrap();
        prop_assert!(out.data().iter().all(|&v| (v - c).abs() <= 1e-12));
    }

    #[test]
    fn whole_pixel_shift_moves_the_interior(seed in 0u64..1000, dx in -2i32..=2, dy in -2i32..=2) {
        let (h, w) = (7usize, 9usize);
        let img = random_tensor(&[1, h, w], seed, 1.0);
        let (ux, uy) = (2.0 * dx as f64 / (w - 1) as f64, 2.0 * dy as f64 / (h - 1) as f64);
        let out = warp(&img, &DeformationField::uniform(h, w, ux, uy)).unwrap();
        for y in 2..h - 2 {
            for x in 2..w - 2 {
                let sx = (x as i32 + dx) as usize;
                let sy = (y as i32 + dy) as usize;
                prop_assert!((out.at3(0, y, x) - img.at3(0, sy, sx)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn warp_is_bounded_by_its_input(seed in 0u64..1000, scale in 0.0f64..4.0) {
        let img = random_tensor(&[3, 5, 5], seed, 1.0);
        let field = DeformationField::new(random_tensor(&[2, 5, 5], seed + 1, scale)).unwrap();
        let out = warp(&img, &field).unwrap();
        for c in 0..3 {
            let ch = img.channel(c);
            let (lo, hi) = ch.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            prop_assert!(out.channel(c).iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
    }

    #[test]
    fn displacements_are_antisymmetric(pts in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..8)) {
        let a = KeypointSet::new(pts.iter().map(|p| (p.0, p.1)).collect()).unwrap();
        let b = KeypointSet::new(pts.iter().map(|p| (p.2, p.3)).collect()).unwrap();
        let ab = sparse_displacements(&a, &b).unwrap();
        let ba = sparse_displacements(&b, &a).unwrap();
        prop_assert_eq!(ab.delta(0), (0.0, 0.0));
        for i in 0..ab.len() {
            prop_assert_eq!(ab.delta(i).0, -ba.delta(i).0);
            prop_assert_eq!(ab.delta(i).1, -ba.delta(i).1);
        }
    }
}
