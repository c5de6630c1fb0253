use mbslam::camera::Intrinsics;
use mbslam::image::ImageBuffer;
use mbslam::lie::{PoseSE3, UnitQuaternion};
use mbslam::splat::gaussian::{Gaussian3D, GaussianMap, PARAMS_PER_GAUSSIAN};
use mbslam::splat::project::{project_gaussian, COV2D_BLUR};
use mbslam::splat::raster::{
    rasterize, rasterize_cached, rasterize_gradients, rasterize_gradients_cached, ImageGradients,
    RenderOutput,
};
use nalgebra::{Matrix2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_gaussian(rng: &mut ChaCha8Rng) -> Gaussian3D {
    let q = UnitQuaternion::from_components(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(0.2..1.0),
    );
    Gaussian3D::new(
        Vector3::new(
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-0.4..0.4),
            rng.gen_range(1.5..3.0),
        ),
        Vector3::new(
            rng.gen_range(0.05..0.25),
            rng.gen_range(0.05..0.25),
            rng.gen_range(0.05..0.25),
        ),
        q,
        rng.gen_range(0.3..0.8),
        Vector3::new(rng.gen(), rng.gen(), rng.gen()),
    )
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> ImageBuffer {
    ImageBuffer::from_fn(w, h, c, |_, _, _| rng.gen_range(-1.0..1.0))
}

fn dot(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn scalar(out: &RenderOutput, up: &ImageGradients) -> f64 {
    up.color.as_ref().map_or(0.0, |g| dot(g, &out.color))
        + up.depth.as_ref().map_or(0.0, |g| dot(g, &out.depth))
        + up.alpha.as_ref().map_or(0.0, |g| dot(g, &out.alpha))
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / norm.max(1e-6)
}

struct Fixture {
    map: GaussianMap,
    pose: PoseSE3,
    cam: Intrinsics,
    upstream: ImageGradients,
}

fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = GaussianMap::from_gaussians((0..5).map(|_| random_gaussian(&mut rng)));
    let cam = Intrinsics::centered(16, 16, 18.0);
    let pose = PoseSE3::from_rotation_vector(Vector3::new(0.02, -0.03, 0.01), Vector3::new(0.03, -0.02, 0.05));
    let upstream = ImageGradients {
        color: Some(random_image(&mut rng, 16, 16, 3)),
        depth: Some(random_image(&mut rng, 16, 16, 1)),
        alpha: Some(random_image(&mut rng, 16, 16, 1)),
    };
    Fixture {
        map,
        pose,
        cam,
        upstream,
    }
}

#[test]
fn gaussian_gradients_match_central_differences() {
    for seed in 0..3 {
        let f = fixture(seed);
        let grads = rasterize_gradients(&f.map, &f.pose, &f.cam, &f.upstream);
        let h = 1e-6;
        let groups: [(&str, std::ops::Range<usize>); 5] = [
            ("mean", 0..3),
            ("log_scale", 3..6),
            ("rotation", 6..10),
            ("opacity", 10..11),
            ("color", 11..14),
        ];
        for i in 0..f.map.len() {
            let mut numeric = [0.0; PARAMS_PER_GAUSSIAN];
            for (j, n) in numeric.iter_mut().enumerate() {
                let eval = |d: f64| {
                    let mut m = f.map.clone();
                    let mut p = m.gaussians()[i].params();
                    p[j] += d;
                    m.gaussians_mut()[i] = Gaussian3D::from_params(&p);
                    scalar(&rasterize(&m, &f.pose, &f.cam), &f.upstream)
                };
                *n = (eval(h) - eval(-h)) / (2.0 * h);
            }
            for (name, r) in &groups {
                let e = rel_err(&grads.gaussians[i][r.clone()], &numeric[r.clone()]);
                assert!(e < 1e-3, "seed {seed} gaussian {i} {name}: rel err {e}");
            }
        }
    }
}

#[test]
fn pose_gradients_match_central_differences() {
    for seed in 0..3 {
        let f = fixture(seed);
        let grads = rasterize_gradients(&f.map, &f.pose, &f.cam, &f.upstream);
        let h = 1e-6;
        let mut rot = [0.0; 3];
        let mut trans = [0.0; 3];
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = h;
            let z = Vector3::zeros();
            let l = |p: PoseSE3| scalar(&rasterize(&f.map, &p, &f.cam), &f.upstream);
            rot[k] = (l(f.pose.boxplus(&e, &z)) - l(f.pose.boxplus(&-e, &z))) / (2.0 * h);
            trans[k] = (l(f.pose.boxplus(&z, &e)) - l(f.pose.boxplus(&z, &-e))) / (2.0 * h);
        }
        let er = rel_err(grads.pose.rotation.as_slice(), &rot);
        let et = rel_err(grads.pose.translation.as_slice(), &trans);
        assert!(er < 1e-3, "seed {seed} rotation rel err {er}");
        assert!(et < 1e-3, "seed {seed} translation rel err {et}");
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let f = fixture(7);
    let zero = ImageGradients {
        color: Some(ImageBuffer::new(16, 16, 3)),
        depth: Some(ImageBuffer::new(16, 16, 1)),
        alpha: None,
    };
    let g = rasterize_gradients(&f.map, &f.pose, &f.cam, &zero);
    assert!(g.gaussians.iter().flatten().all(|v| *v == 0.0));
    assert_eq!(g.pose.rotation, Vector3::zeros());
    assert_eq!(g.pose.translation, Vector3::zeros());
}

#[test]
fn on_axis_translation_gradient_matches_image_shift() {
    let cam = Intrinsics::centered(21, 21, 30.0);
    let (s, z, o) = (0.08, 2.0, 0.8);
    let g = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, z), s, o, Vector3::new(1.0, 0.0, 0.0));
    let map = GaussianMap::from_gaussians([g]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let up = random_image(&mut rng, 21, 21, 3);
    let grads = rasterize_gradients(
        &map,
        &PoseSE3::identity(),
        &cam,
        &ImageGradients {
            color: Some(up.clone()),
            ..Default::default()
        },
    );
    // Closed-form image of one isotropic Gaussian and its u-derivative.
    let var = (cam.fx * s / z).powi(2) + COV2D_BLUR;
    let mut inner = 0.0;
    for v in 0..21 {
        for u in 0..21 {
            let du = u as f64 - cam.cx;
            let dv = v as f64 - cam.cy;
            let alpha = o * (-(du * du + dv * dv) / (2.0 * var)).exp();
            if alpha < 1.0 / 255.0 {
                continue;
            }
            let d_image_du = -alpha * du / var;
            inner += up.get(u, v, 0) * d_image_du;
        }
    }
    let expected = -inner * cam.fx / z;
    let got = grads.gaussians[0][0];
    assert!((got - expected).abs() < 1e-9 * expected.abs().max(1.0), "{got} vs {expected}");
}

#[test]
fn axis_aligned_projection_covariance() {
    let cam = Intrinsics::centered(64, 48, 50.0);
    let (s, z) = (0.1, 2.5);
    let g = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, z), s, 0.5, Vector3::zeros());
    let p = project_gaussian(&g, &PoseSE3::identity(), &cam).unwrap();
    let expected = Matrix2::new((cam.fx * s / z).powi(2) + COV2D_BLUR, 0.0, 0.0, (cam.fy * s / z).powi(2) + COV2D_BLUR);
    assert!((p.cov2d - expected).norm() < 1e-12);
    assert_eq!(p.depth, z);

    let mut rotated = g;
    rotated.rotation = UnitQuaternion::from_components(0.3, -0.5, 0.2, 0.7).coords();
    let pr = project_gaussian(&rotated, &PoseSE3::identity(), &cam).unwrap();
    assert!((pr.cov2d - p.cov2d).norm() < 1e-12);

    let behind = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, -1.0), s, 0.5, Vector3::zeros());
    assert!(project_gaussian(&behind, &PoseSE3::identity(), &cam).is_none());
    let at_camera = Gaussian3D::isotropic(Vector3::zeros(), s, 0.5, Vector3::zeros());
    assert!(project_gaussian(&at_camera, &PoseSE3::identity(), &cam).is_none());
}

#[test]
fn empty_map_renders_background() {
    let cam = Intrinsics::centered(20, 12, 15.0);
    let out = rasterize(&GaussianMap::new(), &PoseSE3::identity(), &cam);
    for img in [&out.color, &out.depth, &out.alpha] {
        assert!(img.data().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn single_gaussian_peak_and_falloff() {
    let cam = Intrinsics::centered(17, 17, 40.0);
    let (s, z) = (0.1, 2.0);
    let color = Vector3::new(0.2, 0.6, 0.9);
    let g = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, z), s, 0.99999, color);
    let out = rasterize(&GaussianMap::from_gaussians([g]), &PoseSE3::identity(), &cam);
    let (cu, cv) = (cam.cx as usize, cam.cy as usize);
    for c in 0..3 {
        assert!((out.color.get(cu, cv, c) - color[c] * 0.999).abs() < 1e-12);
    }
    let var = (cam.fx * s / z).powi(2) + COV2D_BLUR;
    for r in 1..4 {
        let expected = g.opacity() * (-((r * r) as f64) / (2.0 * var)).exp();
        assert!((out.alpha.get(cu + r, cv, 0) - expected.min(0.999)).abs() < 1e-12);
        assert!(out.alpha.get(cu + r, cv, 0) < out.alpha.get(cu + r - 1, cv, 0));
    }
}

#[test]
fn transparent_front_gaussian_is_negligible() {
    let cam = Intrinsics::centered(24, 24, 30.0);
    let back = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, 3.0), 0.3, 0.7, Vector3::new(0.1, 0.8, 0.3));
    let eps = 0.01;
    let front = Gaussian3D::isotropic(Vector3::new(0.05, 0.0, 1.5), 0.2, eps, Vector3::new(1.0, 0.0, 1.0));
    let alone = rasterize(&GaussianMap::from_gaussians([back]), &PoseSE3::identity(), &cam);
    let both = rasterize(&GaussianMap::from_gaussians([front, back]), &PoseSE3::identity(), &cam);
    assert!(both.color.max_abs_diff(&alone.color) <= 2.0 * eps);
    assert!(both.alpha.max_abs_diff(&alone.alpha) <= 2.0 * eps);
}

#[test]
fn compositing_weights_and_final_transmittance_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let gaussians: Vec<Gaussian3D> = (0..40)
        .map(|_| {
            let mut g = random_gaussian(&mut rng);
            g.color = Vector3::from_element(1.0);
            g
        })
        .collect();
    let cam = Intrinsics::centered(16, 16, 18.0);
    let out = rasterize(&GaussianMap::from_gaussians(gaussians), &PoseSE3::identity(), &cam);
    // With unit colors, each channel is Σ αᵢTᵢ; alpha is 1 − T_final.
    for v in 0..16 {
        for u in 0..16 {
            let weights = out.color.get(u, v, 0);
            let t_final = 1.0 - out.alpha.get(u, v, 0);
            assert!((weights + t_final - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn submission_order_does_not_change_render() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gaussians: Vec<Gaussian3D> = (0..30).map(|_| random_gaussian(&mut rng)).collect();
    let cam = Intrinsics::centered(40, 32, 36.0);
    let pose = PoseSE3::from_translation(Vector3::new(0.01, 0.0, -0.1));
    let reference = rasterize(&GaussianMap::from_gaussians(gaussians.clone()), &pose, &cam);
    let mut shuffled = gaussians;
    shuffled.reverse();
    shuffled.rotate_left(7);
    let other = rasterize(&GaussianMap::from_gaussians(shuffled), &pose, &cam);
    assert_eq!(reference, other);
}

#[test]
fn cached_reverse_pass_matches_recomputed() {
    let f = fixture(4);
    let (out, cache) = rasterize_cached(&f.map, &f.pose, &f.cam);
    assert_eq!(out, rasterize(&f.map, &f.pose, &f.cam));
    let cached = rasterize_gradients_cached(&f.map, &f.pose, &f.cam, &cache, &f.upstream);
    assert_eq!(cached, rasterize_gradients(&f.map, &f.pose, &f.cam, &f.upstream));
}
