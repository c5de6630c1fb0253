//! Sequential tracking and windowed mapping over a frame sequence.

use std::time::{Duration, Instant};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{format_trajectory, FrameProvider, PoseSelect, RgbdFrame};
use crate::error::{Error, Result};
use crate::lie::{interpolate_pose, quat_log, quat_mul, ExposureTrajectory, PoseSE3};
use crate::splat::gaussian::GaussianMap;
use crate::splat::mapper::{optimize_map, seed_gaussians, Keyframe, MapperConfig};
use crate::splat::raster::rasterize;
use crate::tracker::{constant_velocity_guess, track_frame, TrackerConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub tracker: TrackerConfig,
    pub mapper: MapperConfig,
    /// Meters; `None` uses 5% of the scene extent.
    pub keyframe_translation: Option<f64>,
    pub keyframe_rotation_deg: f64,
    pub keyframe_max_gap: usize,
    /// Keyframes per mapping call: the newest plus randomly drawn older ones.
    pub window_size: usize,
    /// Mapping iterations on the first frame.
    pub init_iterations: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tracker: TrackerConfig::default(),
            mapper: MapperConfig::default(),
            keyframe_translation: None,
            keyframe_rotation_deg: 10.0,
            keyframe_max_gap: 20,
            window_size: 8,
            init_iterations: 160,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.tracker.validate()?;
        self.mapper.validate()?;
        let ok = self.keyframe_translation.is_none_or(|t| t > 0.0)
            && self.keyframe_rotation_deg > 0.0
            && self.keyframe_max_gap > 0
            && self.window_size > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "keyframe thresholds and window size must be positive".into(),
            ))
        }
    }

    /// Uses a single virtual image in both tracker and mapper.
    pub fn without_blur_model(mut self) -> Self {
        self.tracker.n_virtual = 1;
        self.mapper.n_virtual = 1;
        self
    }
}

/// What happened to one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDiagnostics {
    pub index: usize,
    pub timestamp: f64,
    /// Keyframe whose mid-exposure pose the frame was tracked against;
    /// `None` for the first frame.
    pub reference_keyframe: Option<usize>,
    /// Trajectory relative to the reference keyframe's mid-exposure pose.
    pub relative: ExposureTrajectory,
    pub is_keyframe: bool,
    pub final_cost: f64,
    pub iterations: usize,
    pub inlier_fraction: f64,
    /// Tracking failed and the constant-velocity prediction was kept.
    pub diverged: bool,
    pub track_time: Duration,
    pub map_time: Duration,
}

#[derive(Debug, Clone)]
pub struct SequenceResult {
    /// Camera-to-world trajectory of every frame; frame 0's mid-exposure
    /// pose is the origin.
    pub trajectories: Vec<ExposureTrajectory>,
    /// Exposure start time of every frame.
    pub timestamps: Vec<f64>,
    /// Frame indices of the keyframes, ascending.
    pub keyframes: Vec<usize>,
    pub diagnostics: Vec<FrameDiagnostics>,
    pub map: GaussianMap,
    /// Final keyframe states, in the order of `keyframes`.
    pub keyframe_states: Vec<Keyframe>,
    pub scene_extent: f64,
}

impl SequenceResult {
    pub fn poses(&self, which: PoseSelect) -> Vec<(f64, PoseSE3)> {
        self.timestamps
            .iter()
            .zip(&self.trajectories)
            .map(|(&t, traj)| which.pick(t, traj))
            .collect()
    }
}

/// TUM-format trajectory text, one line per frame, sorted by time.
pub fn export_trajectory(result: &SequenceResult, which: PoseSelect) -> String {
    format_trajectory(&result.poses(which))
}

/// Mean valid depth of a frame, used as the scene scale.
pub fn estimate_scene_extent(frame: &RgbdFrame) -> Result<f64> {
    let valid: Vec<f64> = frame
        .depth
        .data()
        .iter()
        .copied()
        .filter(|d| *d > 0.0 && d.is_finite())
        .collect();
    if valid.is_empty() {
        return Err(Error::InvalidArgument("first frame has no valid depth".into()));
    }
    Ok(valid.iter().sum::<f64>() / valid.len() as f64)
}

/// Exposure trajectory centered on the identity with the given motion
/// across the exposure.
fn centered_trajectory(motion: &PoseSE3, exposure: f64) -> Result<ExposureTrajectory> {
    let step = ExposureTrajectory::new(PoseSE3::identity(), *motion, exposure)?;
    let half = interpolate_pose(&step, exposure / 2.0)?;
    let half_t = motion.translation / 2.0;
    ExposureTrajectory::new(
        PoseSE3::new(half.rotation.inverse(), -half_t),
        PoseSE3::new(half.rotation, half_t),
        exposure,
    )
}

/// Constant-velocity prediction of the next exposure, in the reference
/// frame, from the mid-exposure poses of the last two frames.
fn predict(
    world: &[ExposureTrajectory],
    timestamps: &[f64],
    to_reference: &PoseSE3,
    timestamp: f64,
    exposure: f64,
) -> Result<ExposureTrajectory> {
    let k = world.len();
    let last = &world[k - 1];
    let last_mid_time = timestamps[k - 1] + last.exposure / 2.0;
    let gap = timestamp - last_mid_time;
    if k < 2 {
        let prev = last.left_compose(to_reference);
        return Ok(constant_velocity_guess(&prev, gap - last.exposure / 2.0, exposure));
    }
    let before = &world[k - 2];
    let span = last_mid_time - (timestamps[k - 2] + before.exposure / 2.0);
    if span <= 0.0 || gap < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "timestamps must increase, got {} after {}",
            timestamp, timestamps[k - 1]
        )));
    }
    let mids = ExposureTrajectory::new(
        to_reference.compose(&before.mid()),
        to_reference.compose(&last.mid()),
        span,
    )?;
    Ok(constant_velocity_guess(&mids, gap, exposure))
}

/// The blur of a frame is unchanged when its exposure runs backwards, so
/// the tracker cannot tell start from end. Picks the order that moves in
/// the direction of travel from the previous mid-exposure pose.
pub fn orient_along(traj: &ExposureTrajectory, prev_mid: &PoseSE3, extent: f64) -> ExposureTrajectory {
    let mid = traj.mid();
    let travel_t = mid.translation - prev_mid.translation;
    let travel_r = quat_log(&quat_mul(&prev_mid.rotation.inverse(), &mid.rotation)).0;
    let blur_t = traj.end.translation - traj.start.translation;
    let blur_r = quat_log(&quat_mul(&traj.start.rotation.inverse(), &traj.end.rotation)).0;
    if travel_t.dot(&blur_t) + extent * extent * travel_r.dot(&blur_r) < 0.0 {
        ExposureTrajectory {
            start: traj.end,
            end: traj.start,
            exposure: traj.exposure,
        }
    } else {
        *traj
    }
}

struct State<'a> {
    cfg: &'a PipelineConfig,
    mapper: MapperConfig,
    map: GaussianMap,
    keyframes: Vec<Keyframe>,
    keyframe_frames: Vec<usize>,
    rng: ChaCha8Rng,
}

impl State<'_> {
    /// Seeds from the newest keyframe, then optimizes it together with up
    /// to `window_size − 1` random older keyframes.
    fn map_newest(&mut self, iterations: usize) -> Result<()> {
        let newest = self.keyframes.len() - 1;
        let kf = &self.keyframes[newest];
        let alpha = rasterize(&self.map, &kf.trajectory.mid(), &kf.frame.intrinsics).alpha;
        let seeded = seed_gaussians(&mut self.map, kf, &alpha, &self.mapper);
        let mut window: Vec<usize> = (0..newest).collect();
        window.shuffle(&mut self.rng);
        window.truncate(self.cfg.window_size - 1);
        window.push(newest);
        window.sort_unstable();
        let mut selected: Vec<Keyframe> = window.iter().map(|&i| self.keyframes[i].clone()).collect();
        let cfg = MapperConfig {
            iterations,
            ..self.mapper.clone()
        };
        let trace = optimize_map(&mut self.map, &mut selected, &cfg)?;
        for (&i, kf) in window.iter().zip(selected) {
            self.keyframes[i] = kf;
        }
        info!(
            "mapped keyframe {} (frame {}): seeded {seeded}, window {:?}, loss {:.4}, {} gaussians",
            newest,
            self.keyframe_frames[newest],
            window,
            trace.losses.last().map_or(0.0, |l| l.total),
            self.map.len()
        );
        Ok(())
    }
}

/// Tracks every frame against a render of the map at the newest keyframe,
/// promotes keyframes, and refines map and keyframe trajectories.
pub fn run_slam(frames: &dyn FrameProvider, cfg: &PipelineConfig) -> Result<SequenceResult> {
    cfg.validate()?;
    if frames.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 frames, got {}",
            frames.len()
        )));
    }
    let first = frames.frame(0)?;
    let extent = match cfg.mapper.scene_extent {
        Some(e) => e,
        None => estimate_scene_extent(&first)?,
    };
    let translation_threshold = cfg.keyframe_translation.unwrap_or(0.05 * extent);
    let rotation_threshold = cfg.keyframe_rotation_deg.to_radians();
    let mut state = State {
        cfg,
        mapper: MapperConfig {
            scene_extent: Some(extent),
            ..cfg.mapper.clone()
        },
        map: GaussianMap::new(),
        keyframes: Vec::new(),
        keyframe_frames: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };

    let start = Instant::now();
    let first_traj = ExposureTrajectory::stationary(PoseSE3::identity(), first.exposure);
    let mut timestamps = vec![first.timestamp];
    let mut world = vec![first_traj];
    let mut raw_first = Some(first.color.clone());
    state.keyframes.push(Keyframe::new(first, first_traj));
    state.keyframe_frames.push(0);
    let mut diagnostics = vec![FrameDiagnostics {
        index: 0,
        timestamp: timestamps[0],
        reference_keyframe: None,
        relative: first_traj,
        is_keyframe: true,
        final_cost: 0.0,
        iterations: 0,
        inlier_fraction: 1.0,
        diverged: false,
        track_time: Duration::ZERO,
        map_time: Duration::ZERO,
    }];

    for k in 1..frames.len() {
        let frame = frames.frame(k)?;
        let kf_index = state.keyframes.len() - 1;
        let reference_pose = state.keyframes[kf_index].trajectory.mid();
        // Cold start: the first frame's capture stands in for a render.
        let reference = match raw_first.take() {
            Some(img) => img,
            None => rasterize(&state.map, &reference_pose, &frame.intrinsics).color,
        };
        let to_reference = reference_pose.inverse();
        let init = predict(&world, &timestamps, &to_reference, frame.timestamp, frame.exposure)?;

        let t0 = Instant::now();
        let tracked = track_frame(&reference, &frame, &init, &cfg.tracker);
        let track_time = t0.elapsed();
        let (relative, final_cost, iterations, inlier_fraction, diverged) = match tracked {
            Ok(r) => (
                r.trajectory,
                r.final_cost,
                r.iterations_per_level.iter().sum(),
                r.inlier_fraction,
                false,
            ),
            Err(Error::TrackingDiverged(msg)) => {
                warn!("frame {k}: tracking diverged ({msg}); keeping constant-velocity guess");
                (init, f64::NAN, 0, 0.0, true)
            }
            Err(e) => return Err(e),
        };
        let relative = if diverged {
            relative
        } else {
            orient_along(&relative, &to_reference.compose(&world[k - 1].mid()), extent)
        };
        let traj = relative.left_compose(&reference_pose);
        timestamps.push(frame.timestamp);
        world.push(traj);

        if k == 1 && !diverged {
            // The first keyframe has no tracked motion of its own; give it
            // the second frame's motion, centered on the origin.
            let motion = relative.start.inverse().compose(&relative.end);
            let centered = centered_trajectory(&motion, state.keyframes[0].trajectory.exposure)?;
            state.keyframes[0].trajectory = centered;
            world[0] = centered;
        }
        if k == 1 {
            // The map starts once the first keyframe's exposure is known.
            let t = Instant::now();
            state.map_newest(cfg.init_iterations)?;
            diagnostics[0].map_time = t.elapsed();
        }

        let last_mid = reference_pose;
        let mid = traj.mid();
        let moved = (mid.translation - last_mid.translation).norm();
        let turned = mid.rotation.angle_to(&last_mid.rotation);
        let gap_frames = k - state.keyframe_frames[kf_index];
        let promote = !diverged
            && (moved >= translation_threshold
                || turned >= rotation_threshold
                || gap_frames >= cfg.keyframe_max_gap);
        let t1 = Instant::now();
        if promote {
            state.keyframes.push(Keyframe::new(frame, traj));
            state.keyframe_frames.push(k);
            state.map_newest(cfg.mapper.iterations)?;
        }
        diagnostics.push(FrameDiagnostics {
            index: k,
            timestamp: timestamps[k],
            reference_keyframe: Some(kf_index),
            relative,
            is_keyframe: promote,
            final_cost,
            iterations,
            inlier_fraction,
            diverged,
            track_time,
            map_time: t1.elapsed(),
        });
        info!(
            "frame {k}: cost {final_cost:.5}, {iterations} iterations, moved {:.3} m / {:.2}°{}",
            moved,
            turned.to_degrees(),
            if promote { ", keyframe" } else { "" }
        );
    }

    // Non-keyframes follow their reference keyframe's refined pose.
    let mut trajectories = world;
    for d in &diagnostics {
        if let Some(kf) = d.reference_keyframe {
            trajectories[d.index] = d.relative.left_compose(&state.keyframes[kf].trajectory.mid());
        }
    }
    for (kf, &frame) in state.keyframes.iter().zip(&state.keyframe_frames) {
        trajectories[frame] = kf.trajectory;
    }
    info!("sequence done in {:.1} s", start.elapsed().as_secs_f64());
    Ok(SequenceResult {
        trajectories,
        timestamps,
        keyframes: state.keyframe_frames,
        diagnostics,
        map: state.map,
        keyframe_states: state.keyframes,
        scene_extent: extent,
    })
}

