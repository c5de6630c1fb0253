//! Procedural RGB-D blur sequences rendered by analytic ray casting.
//!
//! The scene is a box-shaped room of textured axis-aligned rectangles with
//! a few boxes inside. The camera looks down world `+z` with `+y` pointing
//! down, matching the camera frame at the identity pose.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::camera::Intrinsics;
use crate::dataset::{PoseSelect, RgbdFrame};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::lie::{interpolate_pose, quat_exp, ExposureTrajectory, PoseSE3, RotationVector};

/// Minimum fraction of pixels that must hit textured geometry.
pub const MIN_COVERAGE: f64 = 0.6;

/// Band-limited procedural texture: two octaves of smooth value noise mixed
/// with a soft checker, mapped between two colors.
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    pub seed: u64,
    pub color_a: [f64; 3],
    pub color_b: [f64; 3],
    /// Lattice spacing of the coarse noise octave, meters.
    pub noise_cell: f64,
    /// Checker period, meters.
    pub checker_period: f64,
}

impl Texture {
    fn value(&self, s: f64, t: f64) -> f64 {
        let c = self.noise_cell;
        let n = 0.6 * value_noise(self.seed, s / c, t / c)
            + 0.4 * value_noise(self.seed ^ 0x9e37_79b9, 2.5 * s / c, 2.5 * t / c);
        let w = 2.0 * PI / self.checker_period;
        let checker = 0.5 + 0.5 * (3.0 * (w * s).sin() * (w * t).sin()).tanh();
        0.55 * n + 0.45 * checker
    }

    pub fn color(&self, s: f64, t: f64) -> [f64; 3] {
        let v = self.value(s, t);
        std::array::from_fn(|k| self.color_a[k] + v * (self.color_b[k] - self.color_a[k]))
    }
}

fn lattice(seed: u64, i: i64, j: i64) -> f64 {
    let mut z = seed
        .wrapping_add((i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add((j as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (i, j) = (fx as i64, fy as i64);
    let fade = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
    let (u, v) = (fade(x - fx), fade(y - fy));
    let a = lattice(seed, i, j);
    let b = lattice(seed, i + 1, j);
    let c = lattice(seed, i, j + 1);
    let d = lattice(seed, i + 1, j + 1);
    let top = a + u * (b - a);
    let bottom = c + u * (d - c);
    top + v * (bottom - top)
}

/// A textured rectangle on the plane `x[axis] = offset`, bounded in the two
/// remaining coordinates (in increasing axis order).
#[derive(Debug, Clone, PartialEq)]
pub struct AxisRect {
    pub axis: usize,
    pub offset: f64,
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub texture: Texture,
}

impl AxisRect {
    fn others(&self) -> (usize, usize) {
        match self.axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        }
    }

    /// Ray parameter of the hit, if any.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let den = d[self.axis];
        if den.abs() < 1e-12 {
            return None;
        }
        let t = (self.offset - o[self.axis]) / den;
        if t <= 0.0 {
            return None;
        }
        let (a, b) = self.others();
        let pa = o[a] + t * d[a];
        let pb = o[b] + t * d[b];
        (pa >= self.lo[0] && pa <= self.hi[0] && pb >= self.lo[1] && pb <= self.hi[1]).then_some(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub surfaces: Vec<AxisRect>,
    pub seed: u64,
}

impl SyntheticScene {
    /// The standard room: walls at `x = ±1.4`, floor and ceiling at
    /// `y = ±0.9`, back wall at `z = 2.4`, plus two boxes.
    pub fn standard(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let texture = |rng: &mut ChaCha8Rng| {
            let dark: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.3));
            let light: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.65..0.95));
            Texture {
                seed: rng.gen(),
                color_a: dark,
                color_b: light,
                noise_cell: rng.gen_range(0.18..0.26),
                checker_period: rng.gen_range(0.35..0.5),
            }
        };
        let mut surfaces = Vec::new();
        let mut rect = |axis, offset, lo, hi, rng: &mut ChaCha8Rng| {
            surfaces.push(AxisRect {
                axis,
                offset,
                lo,
                hi,
                texture: texture(rng),
            })
        };
        rect(2, 2.4, [-1.4, -0.9], [1.4, 0.9], &mut rng);
        rect(0, -1.4, [-0.9, -1.5], [0.9, 2.4], &mut rng);
        rect(0, 1.4, [-0.9, -1.5], [0.9, 2.4], &mut rng);
        rect(1, 0.9, [-1.4, -1.5], [1.4, 2.4], &mut rng);
        rect(1, -0.9, [-1.4, -1.5], [1.4, 2.4], &mut rng);
        let mut scene = Self { surfaces, seed };
        scene.add_box([-0.95, 0.35, 1.55], [-0.4, 0.9, 2.05], &mut rng);
        scene.add_box([0.3, -0.45, 1.75], [0.8, 0.05, 2.2], &mut rng);
        scene
    }

    /// Adds the six faces of an axis-aligned box sharing one texture.
    pub fn add_box(&mut self, min: [f64; 3], max: [f64; 3], rng: &mut ChaCha8Rng) {
        let tex = Texture {
            seed: rng.gen(),
            color_a: std::array::from_fn(|_| rng.gen_range(0.1..0.4)),
            color_b: std::array::from_fn(|_| rng.gen_range(0.6..1.0)),
            noise_cell: 0.12,
            checker_period: 0.2,
        };
        for axis in 0..3 {
            let (a, b) = match axis {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            for offset in [min[axis], max[axis]] {
                self.surfaces.push(AxisRect {
                    axis,
                    offset,
                    lo: [min[a], min[b]],
                    hi: [max[a], max[b]],
                    texture: tex.clone(),
                });
            }
        }
    }

    /// Nearest hit along a world ray: `(t, color)`.
    pub fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, [f64; 3])> {
        let mut best: Option<(f64, usize)> = None;
        for (i, s) in self.surfaces.iter().enumerate() {
            if let Some(t) = s.intersect(o, d) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, i));
                }
            }
        }
        best.map(|(t, i)| {
            let s = &self.surfaces[i];
            let (a, b) = s.others();
            let p = o + d * t;
            (t, s.texture.color(p[a], p[b]))
        })
    }
}

/// Renders color and metric depth from the camera-to-world pose `pose`.
/// Pixels that hit nothing are black with depth 0.
pub fn render_scene(
    scene: &SyntheticScene,
    pose: &PoseSE3,
    cam: &Intrinsics,
) -> (ImageBuffer, ImageBuffer) {
    let (w, h) = (cam.width, cam.height);
    let rot = pose.rotation_matrix();
    let o = pose.translation;
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut rgb = Vec::with_capacity(3 * w);
            let mut depth = Vec::with_capacity(w);
            for u in 0..w {
                // Unnormalized ray with unit camera z: the hit parameter is the depth.
                let ray = cam.backproject(u as f64, v as f64, 1.0);
                let d = rot * ray;
                match scene.cast(&o, &d) {
                    Some((t, c)) => {
                        rgb.extend_from_slice(&c);
                        depth.push(t);
                    }
                    None => {
                        rgb.extend_from_slice(&[0.0; 3]);
                        depth.push(0.0);
                    }
                }
            }
            (rgb, depth)
        })
        .collect();
    let mut rgb = Vec::with_capacity(3 * w * h);
    let mut depth = Vec::with_capacity(w * h);
    for (r, d) in rows {
        rgb.extend(r);
        depth.extend(d);
    }
    (
        ImageBuffer::from_vec(w, h, 3, rgb).expect("row sizes"),
        ImageBuffer::from_vec(w, h, 1, depth).expect("row sizes"),
    )
}

/// A smooth camera path, sampled as camera-to-world poses.
#[derive(Debug, Clone, PartialEq)]
pub enum TrajectorySpec {
    /// Fixed camera.
    Static { pose: PoseSE3 },
    /// The camera center runs on a circle of `radius` in the `x`–`y` plane
    /// while the rotation vector runs on a circle of `rot_amplitude`,
    /// both at angular rate `omega`. Sequences read the exposure endpoints
    /// off the circle and interpolate between them inside each exposure.
    Orbit {
        radius: f64,
        rot_amplitude: f64,
        omega: f64,
    },
    /// An orbit with an added rotational oscillation of `shake_amplitude`
    /// radians and period `shake_period` seconds. Sequences follow the
    /// continuous path inside each exposure.
    Shaken {
        radius: f64,
        rot_amplitude: f64,
        omega: f64,
        shake_amplitude: f64,
        shake_period: f64,
    },
}

impl TrajectorySpec {
    /// Whether motion inside an exposure is interpolated between its
    /// endpoint poses rather than read off the continuous path.
    pub fn interpolates_exposures(&self) -> bool {
        !matches!(self, TrajectorySpec::Shaken { .. })
    }

    pub fn pose_at(&self, t: f64) -> PoseSE3 {
        let orbit = |radius: f64, amp: f64, omega: f64| {
            let phi = omega * t;
            let center = Vector3::new(radius * phi.sin(), radius * (1.0 - phi.cos()), 0.0);
            let r = Vector3::new(amp * phi.cos() - amp, amp * phi.sin(), 0.0);
            (center, r)
        };
        match *self {
            TrajectorySpec::Static { pose } => pose,
            TrajectorySpec::Orbit {
                radius,
                rot_amplitude,
                omega,
            } => {
                let (c, r) = orbit(radius, rot_amplitude, omega);
                PoseSE3::new(quat_exp(&RotationVector(r)), c)
            }
            TrajectorySpec::Shaken {
                radius,
                rot_amplitude,
                omega,
                shake_amplitude,
                shake_period,
            } => {
                let (c, mut r) = orbit(radius, rot_amplitude, omega);
                let s = shake_amplitude * (2.0 * PI * t / shake_period).sin();
                r += Vector3::new(0.3 * s, s, 0.0);
                PoseSE3::new(quat_exp(&RotationVector(r)), c)
            }
        }
    }
}

/// Timing and rendering parameters of a generated sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSpec {
    pub path: TrajectorySpec,
    pub frames: usize,
    /// Time between exposure starts, seconds.
    pub frame_interval: f64,
    pub exposure: f64,
    /// Sub-renders averaged per blurry frame.
    pub n_oracle: usize,
    pub intrinsics: Intrinsics,
    /// Standard deviation of additive Gaussian noise on color; 0 disables.
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

const FRAME_INTERVAL: f64 = 1.0 / 30.0;

impl SequenceSpec {
    /// 20 frames at 128×128 orbiting once, with about 2° of rotation and
    /// 2 cm of translation during each exposure.
    pub fn standard() -> Self {
        let omega = 2.0 * PI / (20.0 * FRAME_INTERVAL);
        let exposure = FRAME_INTERVAL / 2.0;
        let per_exposure = omega * exposure;
        Self {
            path: TrajectorySpec::Orbit {
                radius: 0.02 / per_exposure,
                rot_amplitude: 2f64.to_radians() / per_exposure,
                omega,
            },
            frames: 20,
            frame_interval: FRAME_INTERVAL,
            exposure,
            n_oracle: 64,
            intrinsics: Intrinsics::centered(128, 128, 100.0),
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }

    /// The standard path with the shutter open for the whole frame
    /// interval: 4° and 4 cm of motion per exposure.
    pub fn high_blur() -> Self {
        Self {
            exposure: FRAME_INTERVAL,
            ..Self::standard()
        }
    }

    /// The standard orbit with a rotational oscillation that reverses
    /// direction in the middle of every exposure.
    pub fn shaken() -> Self {
        let spec = Self::standard();
        let TrajectorySpec::Orbit {
            radius,
            rot_amplitude,
            omega,
        } = spec.path
        else {
            unreachable!()
        };
        Self {
            path: TrajectorySpec::Shaken {
                radius,
                rot_amplitude,
                omega,
                shake_amplitude: 1.5f64.to_radians(),
                // Peaks at the exposure middle: t0 + τ/2 = period / 4.
                shake_period: spec.frame_interval,
            },
            exposure: spec.frame_interval / 2.0,
            ..spec
        }
    }

    pub fn frame_start(&self, k: usize) -> f64 {
        k as f64 * self.frame_interval
    }
}

/// A rendered sequence with its ground truth.
#[derive(Debug, Clone)]
pub struct GtSequence {
    /// Blurry color with the sharp mid-exposure depth.
    pub frames: Vec<RgbdFrame>,
    pub sharp: Vec<ImageBuffer>,
    /// Camera-to-world exposure trajectories read off the path.
    pub trajectories: Vec<ExposureTrajectory>,
    pub intrinsics: Intrinsics,
    pub exposure: f64,
}

impl GtSequence {
    /// `(timestamp, pose)` at the start, middle, or end of each exposure.
    pub fn groundtruth(&self, which: PoseSelect) -> Vec<(f64, PoseSE3)> {
        self.frames
            .iter()
            .zip(&self.trajectories)
            .map(|(f, t)| which.pick(f.timestamp, t))
            .collect()
    }
}

/// Renders `spec.frames` frames. Blurry color is the mean of `n_oracle`
/// renders at uniform times across each exposure window.
pub fn generate_sequence(scene: &SyntheticScene, spec: &SequenceSpec) -> Result<GtSequence> {
    if spec.frames == 0 || spec.n_oracle == 0 {
        return Err(Error::InvalidArgument(
            "frame and oracle counts must be positive".into(),
        ));
    }
    if !(spec.exposure >= 0.0 && spec.frame_interval > 0.0) {
        return Err(Error::InvalidArgument("invalid sequence timing".into()));
    }
    spec.intrinsics.validate()?;
    let cam = &spec.intrinsics;
    let normal = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);

    let mut frames = Vec::with_capacity(spec.frames);
    let mut sharp_images = Vec::with_capacity(spec.frames);
    let mut trajectories = Vec::with_capacity(spec.frames);
    for k in 0..spec.frames {
        let t0 = spec.frame_start(k);
        let tau = spec.exposure;
        let trajectory = ExposureTrajectory {
            start: spec.path.pose_at(t0),
            end: spec.path.pose_at(t0 + tau),
            exposure: tau,
        };
        let pose_in_window = |s: f64| {
            if tau > 0.0 && spec.path.interpolates_exposures() {
                interpolate_pose(&trajectory, s).expect("time inside exposure")
            } else {
                spec.path.pose_at(t0 + s)
            }
        };
        let (sharp, depth) = render_scene(scene, &pose_in_window(tau / 2.0), cam);
        let coverage = depth.data().iter().filter(|&&d| d > 0.0).count() as f64
            / depth.pixel_count() as f64;
        if coverage < MIN_COVERAGE {
            return Err(Error::Visibility(format!(
                "frame {k} sees {:.0}% textured geometry, need {:.0}%",
                100.0 * coverage,
                100.0 * MIN_COVERAGE
            )));
        }
        let mut blurry = if tau == 0.0 {
            sharp.clone()
        } else {
            let n = spec.n_oracle;
            let mut acc = ImageBuffer::new(cam.width, cam.height, 3);
            for i in 0..n {
                let s = if n == 1 {
                    tau / 2.0
                } else {
                    tau * i as f64 / (n - 1) as f64
                };
                let (img, _) = render_scene(scene, &pose_in_window(s), cam);
                for (a, b) in acc.data_mut().iter_mut().zip(img.data()) {
                    *a += b;
                }
            }
            acc.scale(1.0 / n as f64)
        };
        if spec.noise_sigma > 0.0 {
            for v in blurry.data_mut() {
                *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        frames.push(RgbdFrame {
            color: blurry,
            depth,
            timestamp: t0,
            intrinsics: *cam,
            exposure: tau,
        });
        sharp_images.push(sharp);
        trajectories.push(trajectory);
    }
    Ok(GtSequence {
        frames,
        sharp: sharp_images,
        trajectories,
        intrinsics: *cam,
        exposure: spec.exposure,
    })
}
