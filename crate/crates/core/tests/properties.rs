//! Randomised invariants across modules.

use proptest::prelude::*;
use vaot_core::diffgraph::{Graph, Padding};
use vaot_core::io::{read_image, write_image};
use vaot_core::morphology::{binarize, hard_skeletonize, soft_erode, soft_skeletonize, BinaryMask, SoftMask};
use vaot_core::perceptual::{msssim_cost, psnr, ssim};
use vaot_core::rng;
use vaot_core::synthdata::{gen_clean, make_dataset, DegradeParams, SyntheticSample};
use vaot_core::topo::{detect_endpoints, evp_loss, sga_loss, EndpointSet, EndpointSource};
use vaot_core::{Grid2D, Tensor};

fn noise(h: usize, w: usize, seed: u64, lo: f64, hi: f64) -> Grid2D {
    let mut s = rng::stream(seed);
    let v = (0..h * w).map(|_| rng::uniform(&mut s, lo, hi)).collect();
    Grid2D::new(h, w, v).unwrap()
}

fn bin_mask(h: usize, w: usize, seed: u64, p: f64) -> BinaryMask {
    binarize(&SoftMask::new(noise(h, w, seed, 0.0, 1.0)).unwrap(), 1.0 - p)
}

/// Blobby binary mask: thresholded smooth noise, so skeletons are non-trivial.
fn blob_mask(h: usize, w: usize, seed: u64) -> BinaryMask {
    let n = noise(h, w, seed, 0.0, 1.0);
    let smooth = vaot_core::synthdata::gaussian_blur(&n, 1.5);
    let mean = smooth.mean();
    BinaryMask::new(smooth.map(|v| if v > mean { 1.0 } else { 0.0 })).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn shared_subgraph_gradient_is_two(v in -5.0f64..5.0) {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(v), true);
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        prop_assert_eq!(g.grad(x).unwrap().item(), 2.0);
    }

    #[test]
    fn conv_is_bit_deterministic(seed in 0u64..1000) {
        let run = || {
            let mut g = Graph::new();
            let mut s = rng::stream(seed);
            let x: Vec<f64> = (0..2 * 9 * 9).map(|_| rng::normal(&mut s)).collect();
            let k: Vec<f64> = (0..3 * 2 * 9).map(|_| rng::normal(&mut s)).collect();
            let xn = g.constant(Tensor::new(vec![2, 9, 9], x).unwrap());
            let kn = g.constant(Tensor::new(vec![3, 2, 3, 3], k).unwrap());
            let y = g.conv2d(xn, kn, None, 1, Padding::Same).unwrap();
            let y = g.maxpool3(y).unwrap();
            g.value(y).clone()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn soft_skeleton_is_exact_on_binary(seed in 0u64..10_000, h in 4usize..40, w in 4usize..40, k in 0usize..=20) {
        let m = blob_mask(h, w, seed);
        let soft = soft_skeletonize(&m.as_soft(), k).union;
        prop_assert_eq!(soft, hard_skeletonize(&m, k).into_grid());
    }

    #[test]
    fn erosion_support_shrinks(seed in 0u64..10_000, p in 0.3f64..0.95) {
        let mut r = bin_mask(20, 17, seed, p).as_soft();
        for _ in 0..6 {
            let e = soft_erode(&r);
            for (a, b) in e.grid().values().iter().zip(r.grid().values()) {
                prop_assert!(*a == 0.0 || *b > 0.0);
            }
            r = e;
        }
    }

    #[test]
    fn soft_layers_bounded_by_eroded_maps(seed in 0u64..10_000, k in 0usize..8) {
        let m = SoftMask::new(noise(18, 15, seed, 0.0, 1.0)).unwrap();
        let st = soft_skeletonize(&m, k);
        let mut r = m.clone();
        for layer in &st.layers {
            for (s, v) in layer.values().iter().zip(r.grid().values()) {
                prop_assert!(*s <= v + 1e-12);
            }
            r = soft_erode(&r);
        }
    }

    #[test]
    fn sga_in_unit_interval(seed in 0u64..10_000, k in 0usize..10) {
        let a = SoftMask::new(noise(16, 16, seed, 0.0, 1.0)).unwrap();
        let b = SoftMask::new(noise(16, 16, seed + 1, 0.0, 1.0)).unwrap();
        let l = sga_loss(&a, &b, k, 1e-3).unwrap();
        prop_assert!((-1e-9..=1.0 + 1e-9).contains(&l), "{}", l);
    }

    #[test]
    fn sga_of_binary_self_vanishes(seed in 0u64..10_000, k in 0usize..20) {
        let m = blob_mask(24, 24, seed);
        prop_assume!(hard_skeletonize(&m, k).count() > 0);
        prop_assert!(sga_loss(&m.as_soft(), &m.as_soft(), k, 1e-3).unwrap() <= 1e-6);
    }

    #[test]
    fn evp_self_and_translation(seed in 0u64..10_000, dr in 0usize..6, dc in 0usize..6) {
        let x = noise(24, 24, seed, 0.0, 1.0);
        let y = noise(24, 24, seed + 9, 0.0, 1.0);
        let pts = vec![(8, 9), (12, 15), (14, 10)];
        let a = EndpointSet::new(pts.clone(), EndpointSource::Union);
        prop_assert_eq!(evp_loss(&x, &x, &a, 8).unwrap(), 0.0);
        // Embed both images in a larger canvas shifted by (dr, dc).
        let place = |img: &Grid2D| Grid2D::from_fn(30, 30, |r, c| {
            if r >= dr && c >= dc && r - dr < 24 && c - dc < 24 { img.get(r - dr, c - dc) } else { 0.5 }
        });
        let moved = EndpointSet::new(pts.iter().map(|&(r, c)| (r + dr, c + dc)).collect(), EndpointSource::Union);
        let base = evp_loss(&x, &y, &a, 8).unwrap();
        let shifted = evp_loss(&place(&x), &place(&y), &moved, 8).unwrap();
        prop_assert!((base - shifted).abs() < 1e-12, "{} vs {}", base, shifted);
    }

    #[test]
    fn ssim_symmetric_and_bounded(seed in 0u64..10_000) {
        let a = noise(20, 20, seed, 0.0, 1.0);
        let b = noise(20, 20, seed + 1, 0.0, 1.0);
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab < 1.0 - 1e-9);
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let c = msssim_cost(&a, &b, 5).unwrap();
        prop_assert!(c > 1e-9);
        prop_assert!(msssim_cost(&a, &a, 5).unwrap().abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_noise(seed in 0u64..10_000) {
        let a = Grid2D::filled(16, 16, 0.5);
        let signs = noise(16, 16, seed, -1.0, 1.0).map(f64::signum);
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.05, 0.1, 0.2] {
            let b = Grid2D::new(16, 16, a.values().iter().zip(signs.values()).map(|(v, s)| v + amp * s).collect()).unwrap();
            let p = psnr(&a, &b).unwrap();
            prop_assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn degradation_keeps_mask(seed in 0u64..10_000) {
        let s = SyntheticSample::generate(seed, 32, 32, &DegradeParams::default()).unwrap();
        let (clean, mask) = gen_clean(seed, 32, 32).unwrap();
        prop_assert_eq!(&s.clean, &clean);
        prop_assert_eq!(&s.mask, &mask);
        let ends = detect_endpoints(&hard_skeletonize(&s.mask, 20), EndpointSource::Input);
        prop_assert!(ends.points().iter().all(|&(r, c)| s.mask.is_set(r, c)));
    }

    #[test]
    fn pgm_and_raw_agree(seed in 0u64..10_000) {
        let d = tempfile::tempdir().unwrap();
        let img = noise(9, 13, seed, 0.0, 1.0);
        let (p, t) = (d.path().join("a.pgm"), d.path().join("a.vt"));
        write_image(&p, &img).unwrap();
        write_image(&t, &img).unwrap();
        let (a, b) = (read_image(&p).unwrap(), read_image(&t).unwrap());
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() <= 1.0 / 510.0 + 1e-6);
        }
    }
}

#[test]
fn low_and_high_streams_share_no_seed() {
    let d = tempfile::tempdir().unwrap();
    let m = make_dataset(8, 8, 4, 11, (32, 32), d.path()).unwrap();
    use vaot_core::io::Role;
    let low = m.seeds(Role::Low);
    let high = m.seeds(Role::High);
    let eval = m.seeds(Role::EvalClean);
    assert_eq!((low.len(), high.len(), eval.len()), (8, 8, 4));
    assert!(low.iter().all(|s| !high.contains(s) && !eval.contains(s)));
    assert!(high.iter().all(|s| !eval.contains(s)));
}
