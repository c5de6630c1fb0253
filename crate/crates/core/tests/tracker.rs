use mbslam::camera::Intrinsics;
use mbslam::dataset::RgbdFrame;
use mbslam::image::ImageBuffer;
use mbslam::lie::{interpolate_pose, ExposureTrajectory, PoseSE3};
use mbslam::synth::{generate_sequence, SequenceSpec, SyntheticScene};
use mbslam::tracker::*;
use mbslam::Error;
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn smooth_reference(w: usize, h: usize) -> ImageBuffer {
    ImageBuffer::from_fn(w, h, 1, |x, y, _| {
        let (x, y) = (x as f64, y as f64);
        0.5 + 0.2 * (0.21 * x + 0.05 * y).sin() + 0.15 * (0.13 * y - 0.07 * x + 1.0).sin()
            + 0.1 * (0.3 * x * 0.5 + 0.27 * y).cos()
    })
}

fn small_motion() -> ExposureTrajectory {
    let start = PoseSE3::from_rotation_vector(Vector3::new(0.004, -0.01, 0.002), Vector3::new(-0.02, 0.01, 0.0));
    let end = PoseSE3::from_rotation_vector(Vector3::new(-0.003, 0.012, -0.001), Vector3::new(0.025, -0.005, 0.01));
    ExposureTrajectory::new(start, end, 0.02).unwrap()
}

/// Ray through `x` of the virtual camera `pose`, cut with the plane `z = d`
/// of the reference frame and projected into the reference camera.
fn plane_hit(x: &Vector2<f64>, d: f64, pose: &PoseSE3, cam: &Intrinsics) -> Vector2<f64> {
    let dir = pose.rotation_matrix() * Vector3::new((x.x - cam.cx) / cam.fx, (x.y - cam.cy) / cam.fy, 1.0);
    let s = (d - pose.translation.z) / dir.z;
    let p = pose.translation + dir * s;
    Vector2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy)
}

#[test]
fn reblur_matches_averaged_full_image_warps() {
    let cam = Intrinsics::centered(48, 48, 40.0);
    let reference = smooth_reference(48, 48);
    let traj = small_motion();
    let d = 2.0;
    for n in [1, 4, 13] {
        let times: Vec<f64> = if n == 1 {
            vec![traj.exposure / 2.0]
        } else {
            (0..n).map(|i| traj.exposure * i as f64 / (n - 1) as f64).collect()
        };
        let warps: Vec<ImageBuffer> = times
            .iter()
            .map(|&t| {
                let pose = interpolate_pose(&traj, t).unwrap();
                ImageBuffer::from_fn(48, 48, 1, |u, v, _| {
                    let x = plane_hit(&Vector2::new(u as f64, v as f64), d, &pose, &cam);
                    reference.bilinear(x.x, x.y, 0).unwrap_or(f64::NAN)
                })
            })
            .collect();
        for v in 6..42 {
            for u in 6..42 {
                let x = Vector2::new(u as f64, v as f64);
                let oracle = warps.iter().map(|w| w.get(u, v, 0)).sum::<f64>() / n as f64;
                let got = reblur_pixel(&x, &reference, d, &traj, n, &cam).unwrap().unwrap();
                assert!((got - oracle).abs() < 1e-10, "n={n} at {x:?}: {got} vs {oracle}");
            }
        }
    }
}

#[test]
fn static_identity_reblur_samples_the_reference() {
    let cam = Intrinsics::centered(48, 48, 40.0);
    let reference = smooth_reference(48, 48);
    let traj = ExposureTrajectory::stationary(PoseSE3::identity(), 0.03);
    for n in [1, 2, 7, 13] {
        for (u, v) in [(10.0, 12.5), (24.25, 30.0), (40.0, 7.75)] {
            let got = reblur_pixel(&Vector2::new(u, v), &reference, 1.7, &traj, n, &cam).unwrap().unwrap();
            assert!((got - reference.bilinear(u, v, 0).unwrap()).abs() < 1e-12);
        }
    }
}

fn exact_problem<'a>(reference: &'a ImageBuffer, truth: &ExposureTrajectory, n: usize) -> AlignmentProblem<'a> {
    let cam = Intrinsics::centered(48, 48, 40.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples = (0..400)
        .filter_map(|_| {
            let pixel = Vector2::new(rng.gen_range(12..36) as f64, rng.gen_range(12..36) as f64);
            let plane_depth = rng.gen_range(1.5..3.0);
            let observed = reblur_pixel(&pixel, reference, plane_depth, truth, n, &cam).unwrap()?;
            Some(PixelSample {
                pixel,
                plane_depth,
                observed,
            })
        })
        .collect();
    AlignmentProblem {
        reference,
        cam,
        samples,
        n_virtual: n,
        huber_delta: 0.1,
    }
}

fn trajectory_gap(a: &ExposureTrajectory, b: &ExposureTrajectory) -> f64 {
    let d = |p: &PoseSE3, q: &PoseSE3| {
        (p.translation - q.translation).norm() + (p.rotation.coords() - q.rotation.coords()).norm()
    };
    d(&a.start, &b.start) + d(&a.end, &b.end)
}

#[test]
fn exact_model_is_recovered_and_is_a_fixed_point() {
    let reference = smooth_reference(48, 48);
    let truth = small_motion();
    let problem = exact_problem(&reference, &truth, 7);
    let mut delta = [0.0; 12];
    for (i, v) in delta.iter_mut().enumerate() {
        *v = if i % 6 < 3 { 0.004 } else { -0.006 } * if i % 2 == 0 { 1.0 } else { -1.0 };
    }
    let init = truth.boxplus(&delta);
    let out = optimize_level(&problem, &init, 200, 1e-3, 1e-10).unwrap();
    assert!(trajectory_gap(&out.trajectory, &truth) < 1e-6, "{:?}", out.trajectory);
    assert!(out.summary.cost < 1e-12);

    let again = optimize_level(&problem, &out.trajectory, 10, 1e-3, 1e-6).unwrap();
    assert!(again.first_update_norm < 1e-6, "{}", again.first_update_norm);
}

#[test]
fn cost_never_increases_across_iterations() {
    let reference = smooth_reference(48, 48);
    let truth = small_motion();
    let problem = exact_problem(&reference, &truth, 5);
    let init = truth.boxplus(&[0.01, -0.01, 0.0, 0.02, 0.0, -0.01, 0.0, 0.01, 0.01, -0.02, 0.01, 0.0]);
    let mut last = problem.cost(&init).unwrap().cost;
    for iterations in 1..25 {
        let out = optimize_level(&problem, &init, iterations, 1e-3, 0.0).unwrap();
        assert!(out.summary.cost <= last + 1e-15, "iteration {iterations}");
        last = out.summary.cost;
    }
}

fn frame(color: ImageBuffer, depth: f64, exposure: f64) -> RgbdFrame {
    let (w, h) = (color.width(), color.height());
    RgbdFrame {
        color,
        depth: ImageBuffer::filled(w, h, 1, depth),
        timestamp: 0.0,
        intrinsics: Intrinsics::centered(w, h, 60.0),
        exposure,
    }
}

#[test]
fn identical_frames_track_to_identity() {
    let scene = SyntheticScene::standard(5);
    let cam = Intrinsics::centered(64, 64, 50.0);
    let (color, depth) = mbslam::synth::render_scene(&scene, &PoseSE3::identity(), &cam);
    let cur = RgbdFrame {
        color: color.clone(),
        depth,
        timestamp: 0.0,
        intrinsics: cam,
        exposure: 0.02,
    };
    let init = ExposureTrajectory::stationary(PoseSE3::identity(), 0.02);
    let res = track_frame(&color, &cur, &init, &TrackerConfig::default()).unwrap();
    for p in [res.trajectory.start, res.trajectory.end] {
        assert!(p.translation.norm() < 1e-6);
        assert!(p.rotation.vector_part().norm() < 1e-6);
    }
    assert!(res.final_cost >= 0.0 && (0.0..=1.0).contains(&res.inlier_fraction));
}

#[test]
fn constant_frame_has_too_few_keypoints() {
    let flat = ImageBuffer::filled(64, 64, 3, 0.5);
    let cur = frame(flat.clone(), 2.0, 0.02);
    let init = ExposureTrajectory::stationary(PoseSE3::identity(), 0.02);
    let err = track_frame(&flat, &cur, &init, &TrackerConfig::default()).unwrap_err();
    assert!(matches!(err, Error::InsufficientKeypoints { .. }), "{err}");
}

#[test]
fn checkerboard_keypoints_take_each_cells_strongest_gradient() {
    let board = ImageBuffer::from_fn(128, 128, 1, |u, v, _| ((u / 8 + v / 8) % 2) as f64);
    let depth = ImageBuffer::filled(128, 128, 1, 1.0);
    let params = SelectionParams {
        max_keypoints: 64,
        gradient_threshold: 0.05,
        patch_size: 9,
    };
    let points = select_keypoints(&board, &depth, &params).unwrap();
    assert_eq!(points.len(), 64);
    let margin = 5;
    let mut best = [[0.0f64; 8]; 8];
    for v in margin..128 - margin {
        for u in margin..128 - margin {
            let gx = 0.5 * (board.get(u + 1, v, 0) - board.get(u - 1, v, 0));
            let gy = 0.5 * (board.get(u, v + 1, 0) - board.get(u, v - 1, 0));
            let cell = &mut best[v / 16][u / 16];
            *cell = cell.max(gx.hypot(gy));
        }
    }
    let mut seen = [[false; 8]; 8];
    for p in &points {
        let (cu, cv) = (p.pixel.x as usize / 16, p.pixel.y as usize / 16);
        assert!(!seen[cv][cu]);
        seen[cv][cu] = true;
        assert_eq!(p.gradient_mag, best[cv][cu]);
    }
}

#[test]
fn blur_model_beats_single_sample_on_blurred_frames() {
    let spec = SequenceSpec {
        frames: 11,
        ..SequenceSpec::standard()
    };
    let seq = generate_sequence(&SyntheticScene::standard(7), &spec).unwrap();
    let mid_error = |n_virtual: usize| {
        let cfg = TrackerConfig {
            n_virtual,
            ..TrackerConfig::default()
        };
        let mut sum = 0.0;
        for k in 1..seq.frames.len() {
            let to_ref = seq.trajectories[k - 1].mid().inverse();
            let truth = seq.trajectories[k].left_compose(&to_ref);
            let prev = seq.trajectories[k - 1].left_compose(&to_ref);
            let init = constant_velocity_guess(&prev, spec.frame_interval - spec.exposure, spec.exposure);
            let est = track_frame(&seq.sharp[k - 1], &seq.frames[k], &init, &cfg).unwrap().trajectory;
            sum += (est.mid().translation - truth.mid().translation).norm_squared();
        }
        (sum / (seq.frames.len() - 1) as f64).sqrt()
    };
    let (blind, aware) = (mid_error(1), mid_error(13));
    assert!(aware < blind, "n=13 {aware} vs n=1 {blind}");
}
