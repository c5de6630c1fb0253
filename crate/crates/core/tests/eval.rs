mod common;

use mbslam::eval::*;
use mbslam::image::ImageBuffer;
use mbslam::lie::PoseSE3;
use mbslam::Error;
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn random_poses(rng: &mut ChaCha8Rng, n: usize) -> Vec<(f64, PoseSE3)> {
    (0..n)
        .map(|i| {
            let r = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let t = Vector3::from_fn(|_, _| rng.gen_range(-3.0..3.0));
            (i as f64 * 0.05, PoseSE3::from_rotation_vector(r, t))
        })
        .collect()
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> ImageBuffer {
    ImageBuffer::from_fn(w, h, c, |_, _, _| rng.gen_range(0.0..1.0))
}

#[test]
fn ate_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gt = random_poses(&mut rng, 40);
    assert!(ate_rmse(&gt, &gt, 1e-6, false).unwrap().rmse < 1e-12);
    let g = PoseSE3::from_rotation_vector(Vector3::new(0.3, -2.0, 1.0), Vector3::new(5.0, -1.0, 2.0));
    let moved: Vec<(f64, PoseSE3)> = gt.iter().map(|(t, p)| (*t, g.compose(p))).collect();
    let report = ate_rmse(&moved, &gt, 1e-6, false).unwrap();
    assert!(report.rmse < 1e-9);
    assert_eq!(report.pairs, 40);
    let back = report.alignment.compose(&g);
    assert!(back.translation.norm() < 1e-9);
    assert!(back.rotation.vector_part().norm() < 1e-9);
}

#[test]
fn ate_monte_carlo_matches_sigma_root_three() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gt = random_poses(&mut rng, 1000);
    let sigma = 0.02;
    let normal = Normal::new(0.0, sigma).unwrap();
    let noisy: Vec<(f64, PoseSE3)> = gt
        .iter()
        .map(|(t, p)| {
            let n = Vector3::from_fn(|_, _| normal.sample(&mut rng));
            (*t, PoseSE3::new(p.rotation, p.translation + n))
        })
        .collect();
    let rmse = ate_rmse(&noisy, &gt, 1e-6, false).unwrap().rmse;
    assert!((rmse / (sigma * 3f64.sqrt()) - 1.0).abs() < 0.1, "{rmse}");
}

#[test]
fn similarity_alignment_recovers_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gt = random_poses(&mut rng, 30);
    let shrunk: Vec<(f64, PoseSE3)> = gt
        .iter()
        .map(|(t, p)| (*t, PoseSE3::new(p.rotation, p.translation * 0.4 + Vector3::new(1.0, 0.0, 0.0))))
        .collect();
    let rigid = ate_rmse(&shrunk, &gt, 1e-6, false).unwrap();
    let similar = ate_rmse(&shrunk, &gt, 1e-6, true).unwrap();
    assert!(rigid.rmse > 0.1);
    assert!(similar.rmse < 1e-9);
    assert!((similar.scale - 2.5).abs() < 1e-9);
}

#[test]
fn too_few_pairs_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gt = random_poses(&mut rng, 5);
    let late: Vec<(f64, PoseSE3)> = gt.iter().map(|(t, p)| (t + 10.0, *p)).collect();
    assert!(matches!(ate_rmse(&late, &gt, 0.02, false), Err(Error::InsufficientPairs { found: 0 })));
    assert!(matches!(ate_rmse(&gt[..1], &gt, 0.02, false), Err(Error::InsufficientPairs { found: 1 })));
}

#[test]
fn image_metric_examples() {
    let zero = ImageBuffer::filled(16, 16, 3, 0.0);
    let tenth = ImageBuffer::filled(16, 16, 3, 0.1);
    assert_eq!(psnr(&zero, &zero).unwrap(), f64::INFINITY);
    assert!((psnr(&zero, &tenth).unwrap() - 20.0).abs() < 1e-9);
    assert!(matches!(psnr(&zero, &ImageBuffer::filled(16, 15, 3, 0.0)), Err(Error::ShapeMismatch(_))));
    assert!(ssim(&zero, &ImageBuffer::filled(15, 16, 3, 0.0)).is_err());
}

#[test]
fn metrics_match_scalar_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (w, h, c) in [(20, 13, 3), (31, 31, 1), (11, 40, 3)] {
        let a = random_image(&mut rng, w, h, c);
        let b = random_image(&mut rng, w, h, c);
        let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / (w * h * c) as f64;
        assert!((psnr(&a, &b).unwrap() + 10.0 * mse.log10()).abs() < 1e-9);
        assert!((ssim(&a, &b).unwrap() - common::naive_ssim(&a, &b)).abs() < 1e-6);
    }
}

proptest! {
    #[test]
    fn metrics_are_symmetric_and_bounded(seed in any::<u64>(), binary in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = if binary {
            ImageBuffer::from_fn(16, 16, 1, |_, _, _| if rng.gen::<bool>() { 1.0 } else { 0.0 })
        } else {
            random_image(&mut rng, 16, 16, 3)
        };
        let b = random_image(&mut rng, a.width(), a.height(), a.channels());
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        if binary {
            prop_assert!(ssim(&a, &a.map(|v| 1.0 - v)).unwrap() < 0.0);
        }
    }
}
