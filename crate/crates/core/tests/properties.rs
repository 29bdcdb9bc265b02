//! Randomized invariants, both as seeded sweeps and as shrinking property tests.

mod common;

use declutter::detector_math::{fcos_centerness, fcos_targets};
use declutter::hash_encoding::{spatial_hash, HashGrid, HashGridConfig};
use declutter::image::Image;
use declutter::metrics::{psnr, ssim, PixelMask};
use declutter::scene_io::BBox;
use declutter::volume_renderer::{composite, ShadedSample};
use proptest::prelude::*;
use rand::Rng;

fn assert_check(c: common::Check) {
    match c {
        Ok(msg) => println!("{msg}"),
        Err(msg) => panic!("{msg}"),
    }
}

#[test]
fn trilinear_fields_are_reproduced_exactly() {
    assert_check(common::trilinear_exactness());
}

#[test]
fn compositing_weights_and_remainder_sum_to_one() {
    assert_check(common::compositing_conservation());
}

#[test]
fn hashing_is_deterministic_and_dense_levels_are_one_to_one() {
    assert_check(common::hash_indexing());
}

#[test]
fn centerness_is_bounded_symmetric_and_invertible() {
    assert_check(common::centerness_properties());
}

#[test]
fn masked_rays_leave_hash_tables_untouched() {
    assert_check(common::masked_rays_zero_gradient());
}

fn noisy(base: &Image, amp: f64, seed: u64) -> Image {
    let mut r = common::rng(seed);
    let mut out = base.clone();
    for v in &mut out.data {
        *v = (*v + r.gen_range(-amp..amp)).clamp(0.0, 1.0);
    }
    out
}

fn textured(seed: u64) -> Image {
    let mut r = common::rng(seed);
    let mut img = Image::new(24, 24);
    for v in &mut img.data {
        *v = r.gen_range(0.2..0.8);
    }
    img
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encoding_is_a_pure_function(x in 0.0f64..1.0, y in 0.0f64..1.0, z in 0.0f64..1.0, seed in 0u64..1000) {
        let cfg = HashGridConfig { levels: 4, log2_table_size: 8, features: 2, coarsest: 4, finest: 64 };
        let grid = HashGrid::<f32>::new(cfg, seed).unwrap();
        let a = grid.encode([x, y, z]).unwrap();
        let b = grid.encode([x, y, z]).unwrap();
        prop_assert_eq!(a.vector, b.vector);
        for rec in &a.record {
            let s: f32 = rec.weights.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn hash_stays_in_range(x in any::<u32>(), y in any::<u32>(), z in any::<u32>(), log2 in 1u32..24) {
        let t = 1usize << log2;
        prop_assert!(spatial_hash([x, y, z], t) < t);
    }

    #[test]
    fn compositing_weights_sum_to_one(
        sigmas in prop::collection::vec(0.0f64..100.0, 1..48),
        delta in 0.001f64..0.5,
    ) {
        let samples: Vec<ShadedSample> = sigmas
            .iter()
            .enumerate()
            .map(|(i, &s)| ShadedSample { sigma: s, color: [0.3, 0.6, 0.9], t: i as f64 * delta, delta })
            .collect();
        let r = composite(&samples).unwrap();
        let total: f64 = r.per_sample_weights.iter().sum::<f64>() + r.transmittance_remainder;
        prop_assert!((total - 1.0).abs() < 1e-6);
        prop_assert!(r.per_sample_weights.iter().all(|w| *w >= 0.0));
    }

    #[test]
    fn centerness_is_in_unit_interval(
        x0 in 0.0f64..100.0, y0 in 0.0f64..100.0, w in 0.5f64..60.0, h in 0.5f64..60.0,
        fx in 0.0f64..1.0, fy in 0.0f64..1.0,
    ) {
        let b = BBox::new(x0, y0, x0 + w, y0 + h, 0);
        let loc = (x0 + fx * w, y0 + fy * h);
        let t = fcos_targets(loc, &b);
        let c = fcos_centerness(&t).unwrap();
        prop_assert!((0.0..=1.0).contains(&c));
        let rec = t.reconstruct(loc);
        for (got, want) in rec.iter().zip([b.x0, b.y0, b.x1, b.y1]) {
            prop_assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn psnr_and_ssim_are_symmetric(seed in 0u64..500, amp in 0.01f64..0.3) {
        let a = textured(seed);
        let b = noisy(&a, amp, seed + 1);
        let mask = PixelMask::from_boxes(24, 24, &[BBox::new(2.0, 3.0, 20.0, 21.0, 0)]);
        prop_assert_eq!(psnr(&a, &b, Some(&mask)).unwrap(), psnr(&b, &a, Some(&mask)).unwrap());
        prop_assert!((ssim(&a, &b, Some(&mask)).unwrap() - ssim(&b, &a, Some(&mask)).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn more_noise_scores_worse(seed in 0u64..500) {
        let a = textured(seed);
        // identical noise pattern, scaled: the larger error must score lower on both metrics
        let small = noisy(&Image::filled(24, 24, [0.5; 3]), 0.05, seed + 7);
        let mut lo = a.clone();
        let mut hi = a.clone();
        for ((l, h), n) in lo.data.iter_mut().zip(hi.data.iter_mut()).zip(&small.data) {
            *l += (n - 0.5) * 1.0;
            *h += (n - 0.5) * 3.0;
        }
        prop_assert!(psnr(&a, &lo, None).unwrap() > psnr(&a, &hi, None).unwrap());
        prop_assert!(ssim(&a, &lo, None).unwrap() > ssim(&a, &hi, None).unwrap());
    }
}
