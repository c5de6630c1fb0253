use mbslam::blur::synthesize_blur;
use mbslam::camera::Intrinsics;
use mbslam::lie::PoseSE3;
use mbslam::synth::*;
use mbslam::Error;
use nalgebra::Vector3;

fn back_wall_only() -> SyntheticScene {
    let mut scene = SyntheticScene::standard(9);
    scene.surfaces.truncate(1);
    scene
}

fn short(spec: SequenceSpec) -> SequenceSpec {
    SequenceSpec {
        frames: 3,
        intrinsics: Intrinsics::centered(48, 48, 40.0),
        ..spec
    }
}

#[test]
fn sideways_translation_shifts_by_focal_over_depth() {
    let scene = back_wall_only();
    let cam = Intrinsics::centered(64, 64, 100.0);
    // 2 px at 2.4 m.
    let dx = 2.0 * 2.4 / 100.0;
    let (a, _) = render_scene(&scene, &PoseSE3::identity(), &cam);
    let (b, _) = render_scene(&scene, &PoseSE3::from_translation(Vector3::new(dx, 0.0, 0.0)), &cam);
    for v in 0..64 {
        for u in 0..62 {
            for c in 0..3 {
                assert!((b.get(u, v, c) - a.get(u + 2, v, c)).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn depth_matches_ray_geometry() {
    let scene = back_wall_only();
    let cam = Intrinsics::centered(40, 40, 50.0);
    let pose = PoseSE3::from_rotation_vector(Vector3::new(0.05, -0.08, 0.3), Vector3::new(0.1, -0.05, 0.2));
    let (_, depth) = render_scene(&scene, &pose, &cam);
    let rot = pose.rotation_matrix();
    for v in 0..40 {
        for u in 0..40 {
            let dir = rot * Vector3::new((u as f64 - cam.cx) / cam.fx, (v as f64 - cam.cy) / cam.fy, 1.0);
            let s = (2.4 - pose.translation.z) / dir.z;
            let hit = pose.translation + dir * s;
            let expected = if hit.x.abs() <= 1.4 && hit.y.abs() <= 0.9 { s } else { 0.0 };
            assert!((depth.get(u, v, 0) - expected).abs() < 1e-9, "({u}, {v})");
        }
    }
}

#[test]
fn zero_exposure_frames_are_sharp() {
    let spec = SequenceSpec {
        exposure: 0.0,
        ..short(SequenceSpec::standard())
    };
    let seq = generate_sequence(&SyntheticScene::standard(7), &spec).unwrap();
    for (f, s) in seq.frames.iter().zip(&seq.sharp) {
        assert_eq!(&f.color, s);
    }
}

#[test]
fn oracle_blur_has_converged() {
    let scene = SyntheticScene::standard(7);
    let spec = short(SequenceSpec::standard());
    let a = generate_sequence(&scene, &spec).unwrap();
    let b = generate_sequence(&scene, &SequenceSpec { n_oracle: 128, ..spec }).unwrap();
    for (x, y) in a.frames.iter().zip(&b.frames) {
        assert!(x.color.mean_abs_diff(&y.color) < 1e-3);
    }
}

#[test]
fn blur_model_reproduces_interpolated_windows() {
    let scene = SyntheticScene::standard(7);
    let spec = short(SequenceSpec::high_blur());
    let seq = generate_sequence(&scene, &spec).unwrap();
    for (f, traj) in seq.frames.iter().zip(&seq.trajectories) {
        let cam = seq.intrinsics;
        let model = synthesize_blur(|p| Ok(render_scene(&scene, p, &cam).0), traj, spec.n_oracle).unwrap();
        assert!(model.max_abs_diff(&f.color) < 1e-6);
    }
}

#[test]
fn shaken_windows_defeat_linear_interpolation() {
    let scene = SyntheticScene::standard(7);
    let spec = short(SequenceSpec::shaken());
    let seq = generate_sequence(&scene, &spec).unwrap();
    let cam = seq.intrinsics;
    for (f, traj) in seq.frames.iter().zip(&seq.trajectories) {
        let model = synthesize_blur(|p| Ok(render_scene(&scene, p, &cam).0), traj, spec.n_oracle).unwrap();
        assert!(model.mean_abs_diff(&f.color) > 5e-3);
    }
}

#[test]
fn ground_truth_endpoints_follow_the_path() {
    let spec = short(SequenceSpec::standard());
    let seq = generate_sequence(&SyntheticScene::standard(7), &spec).unwrap();
    for (k, traj) in seq.trajectories.iter().enumerate() {
        let t0 = spec.frame_start(k);
        assert_eq!(traj.start, spec.path.pose_at(t0));
        assert_eq!(traj.end, spec.path.pose_at(t0 + spec.exposure));
        assert_eq!(seq.frames[k].timestamp, t0);
    }
}

#[test]
fn empty_view_fails_validation() {
    let spec = SequenceSpec {
        path: TrajectorySpec::Static {
            pose: PoseSE3::from_translation(Vector3::new(0.0, 0.0, 10.0)),
        },
        ..short(SequenceSpec::standard())
    };
    let err = generate_sequence(&SyntheticScene::standard(7), &spec).unwrap_err();
    assert!(matches!(err, Error::Visibility(_)), "{err}");
}

#[test]
fn noise_is_seeded() {
    let scene = SyntheticScene::standard(7);
    let spec = SequenceSpec {
        noise_sigma: 0.02,
        noise_seed: 4,
        ..short(SequenceSpec::standard())
    };
    let a = generate_sequence(&scene, &spec).unwrap();
    let b = generate_sequence(&scene, &spec).unwrap();
    let c = generate_sequence(&scene, &SequenceSpec { noise_seed: 5, ..spec }).unwrap();
    assert_eq!(a.frames, b.frames);
    assert_ne!(a.frames[0].color, c.frames[0].color);
    assert!(a.frames[0].color.data().iter().all(|v| (0.0..=1.0).contains(v)));
}
