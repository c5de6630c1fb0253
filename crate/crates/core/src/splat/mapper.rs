//! Blur-aware bundle adjustment of the Gaussian map and keyframe exposure
//! trajectories.

use nalgebra::{Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::gaussian::{logit, Gaussian3D, GaussianMap, PARAMS_PER_GAUSSIAN};
use super::loss::{loss_and_gradients, LossBreakdown};
use crate::dataset::RgbdFrame;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::lie::ExposureTrajectory;

/// A keyframe: its captured frame and camera-to-world exposure trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub frame: RgbdFrame,
    pub trajectory: ExposureTrajectory,
    adam_m: [f64; 12],
    adam_v: [f64; 12],
    adam_step: u64,
}

impl Keyframe {
    pub fn new(frame: RgbdFrame, trajectory: ExposureTrajectory) -> Self {
        Self {
            frame,
            trajectory,
            adam_m: [0.0; 12],
            adam_v: [0.0; 12],
            adam_step: 0,
        }
    }
}

/// Adam step sizes per parameter group. Mean and trajectory translation
/// rates are multiplied by the scene extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub mean: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
    pub trajectory_rotation: f64,
    pub trajectory_translation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            mean: 1.6e-4,
            scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            color: 2.5e-3,
            trajectory_rotation: 1e-4,
            trajectory_translation: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapperConfig {
    pub n_virtual: usize,
    pub lambda_color: f64,
    pub lambda_ssim: f64,
    pub lambda_depth: f64,
    pub lambda_reg: f64,
    /// Largest scale ratio that is not penalized.
    pub reg_ratio: f64,
    /// Iterations per `optimize_map` call.
    pub iterations: usize,
    /// Pixels whose rendered opacity is below this are seeded.
    pub seed_alpha: f64,
    /// Pixel stride of seeding.
    pub seed_stride: usize,
    pub seed_opacity: f64,
    /// Iterations between densification passes; 0 disables densification.
    pub densify_interval: usize,
    /// Mean screen-space positional gradient, scaled by the image's pixel
    /// count, that triggers densification.
    pub densify_grad_threshold: f64,
    /// Gaussians larger than this fraction of the scene extent are split,
    /// smaller ones cloned.
    pub densify_scale_fraction: f64,
    pub prune_opacity: f64,
    /// Gaussians larger than this fraction of the scene extent are pruned.
    pub prune_scale_fraction: f64,
    /// Scene size in meters; `None` lets the pipeline estimate it.
    pub scene_extent: Option<f64>,
    pub learning_rates: LearningRates,
    pub optimize_trajectories: bool,
    pub seed: u64,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            n_virtual: 13,
            lambda_color: 0.8,
            lambda_ssim: 0.2,
            lambda_depth: 1.0,
            lambda_reg: 10.0,
            reg_ratio: 1.0,
            iterations: 160,
            seed_alpha: 0.5,
            seed_stride: 2,
            seed_opacity: 0.5,
            densify_interval: 100,
            densify_grad_threshold: 0.7,
            densify_scale_fraction: 0.01,
            prune_opacity: 0.005,
            prune_scale_fraction: 0.1,
            scene_extent: None,
            learning_rates: LearningRates::default(),
            optimize_trajectories: true,
            seed: 0,
        }
    }
}

impl MapperConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.lambda_color,
            self.lambda_ssim,
            self.lambda_depth,
            self.lambda_reg,
        ];
        let ok = self.n_virtual > 0
            && weights.iter().all(|w| *w >= 0.0)
            && self.reg_ratio >= 1.0
            && (0.0..=1.0).contains(&self.seed_alpha)
            && self.seed_stride > 0
            && self.seed_opacity > 0.0
            && self.seed_opacity < 1.0
            && (0.0..1.0).contains(&self.prune_opacity)
            && self.scene_extent.is_none_or(|e| e > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid mapper config {self:?}")))
        }
    }

    pub fn extent(&self) -> f64 {
        self.scene_extent.unwrap_or(1.0)
    }
}

/// Adds Gaussians at strided pixels whose rendered opacity is below the
/// seeding threshold and whose captured depth is valid. Returns the count.
pub fn seed_gaussians(
    map: &mut GaussianMap,
    keyframe: &Keyframe,
    alpha: &ImageBuffer,
    cfg: &MapperConfig,
) -> usize {
    let frame = &keyframe.frame;
    let cam = frame.intrinsics;
    let mid = keyframe.trajectory.mid();
    let stride = cfg.seed_stride;
    let mut added = 0;
    for v in (0..cam.height).step_by(stride) {
        for u in (0..cam.width).step_by(stride) {
            if alpha.get(u, v, 0) >= cfg.seed_alpha {
                continue;
            }
            let d = frame.depth.get(u, v, 0);
            if !(d > 0.0 && d.is_finite()) {
                continue;
            }
            let p = mid.transform_point(&cam.backproject(u as f64, v as f64, d));
            let px = frame.color.pixel(u, v);
            let color = Vector3::from_fn(|k, _| px[k.min(px.len() - 1)]);
            // One pixel's footprint at the seeded depth.
            let scale = d / cam.fx;
            map.push(Gaussian3D::isotropic(p, scale, cfg.seed_opacity, color));
            added += 1;
        }
    }
    added
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DensifyCounts {
    pub split: usize,
    pub cloned: usize,
    pub pruned: usize,
}

/// Divisor applied to the scale of split children.
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;

/// Splits or clones Gaussians with large accumulated positional gradients
/// and prunes transparent or oversized ones. Statistics are reset.
pub fn densify_and_prune(map: &mut GaussianMap, cfg: &MapperConfig) -> DensifyCounts {
    let extent = cfg.extent();
    let dense_scale = cfg.densify_scale_fraction * extent;
    let mut counts = DensifyCounts::default();
    let mut children = Vec::new();
    let mut split_parent = vec![false; map.len()];
    let mut cloned = Vec::new();
    for (i, (g, s)) in map.gaussians().iter().zip(map.stats()).enumerate() {
        if s.count == 0 || s.mean() < cfg.densify_grad_threshold {
            continue;
        }
        if g.scale().max() <= dense_scale {
            cloned.push(i);
            counts.cloned += 1;
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ map.ids()[i].wrapping_mul(0x9e37_79b9_7f4a_7c15));
            children.extend(split_children(g, &mut rng));
            split_parent[i] = true;
            counts.split += 1;
        }
    }
    // A clone and its source share the source's coverage: 1 − (1 − o′)² = o.
    let share = |g: &mut Gaussian3D| g.opacity_logit = logit(1.0 - (1.0 - g.opacity()).sqrt());
    let mut clones = Vec::with_capacity(cloned.len());
    for &i in &cloned {
        let g = &mut map.gaussians_mut()[i];
        share(g);
        clones.push(*g);
    }
    map.retain(|i, _| !split_parent[i]);
    for c in clones.into_iter().chain(children) {
        map.push(c);
    }
    let max_scale = cfg.prune_scale_fraction * extent;
    counts.pruned = map.retain(|_, g| g.opacity() >= cfg.prune_opacity && g.scale().max() <= max_scale);
    map.reset_stats();
    counts
}

/// Two children with means drawn from the parent distribution and scales
/// divided by [`SPLIT_SCALE_DIVISOR`].
pub fn split_children(g: &Gaussian3D, rng: &mut ChaCha8Rng) -> [Gaussian3D; 2] {
    let r = g.rotation_matrix();
    let s = g.scale();
    std::array::from_fn(|_| {
        let z = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let mut c = *g;
        c.mean = g.mean + r * s.component_mul(&z);
        c.log_scale = g.log_scale.map(|l| l - SPLIT_SCALE_DIVISOR.ln());
        c
    })
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

fn adam_step(m: &mut f64, v: &mut f64, g: f64, lr: f64, step: u64) -> f64 {
    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
    let mh = *m / (1.0 - ADAM_BETA1.powi(step as i32));
    let vh = *v / (1.0 - ADAM_BETA2.powi(step as i32));
    -lr * mh / (vh.sqrt() + ADAM_EPS)
}

fn param_rates(lr: &LearningRates, extent: f64) -> [f64; PARAMS_PER_GAUSSIAN] {
    let mut r = [0.0; PARAMS_PER_GAUSSIAN];
    r[0..3].fill(lr.mean * extent);
    r[3..6].fill(lr.scale);
    r[6..10].fill(lr.rotation);
    r[10] = lr.opacity;
    r[11..14].fill(lr.color);
    r
}

/// Per-iteration record of an optimization run.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingTrace {
    pub losses: Vec<LossBreakdown>,
    pub densify: Vec<DensifyCounts>,
}

impl MappingTrace {
    pub fn totals(&self) -> Vec<f64> {
        self.losses.iter().map(|l| l.total).collect()
    }
}

/// Runs `cfg.iterations` Adam steps, visiting keyframes round-robin.
///
/// Every Gaussian parameter is optimized. Keyframe trajectories are
/// optimized too, except the first keyframe of `keyframes`, which fixes
/// the gauge. Adam step counts carry over from previous calls.
pub fn optimize_map(
    map: &mut GaussianMap,
    keyframes: &mut [Keyframe],
    cfg: &MapperConfig,
) -> Result<MappingTrace> {
    if keyframes.is_empty() {
        return Err(Error::NoKeyframes);
    }
    cfg.validate()?;
    let extent = cfg.extent();
    let rates = param_rates(&cfg.learning_rates, extent);
    let mut trace = MappingTrace {
        losses: Vec::with_capacity(cfg.iterations),
        densify: Vec::new(),
    };
    for it in 0..cfg.iterations {
        let k = it % keyframes.len();
        let (loss, grads) = loss_and_gradients(map, &keyframes[k], cfg)?;
        trace.losses.push(loss);
        let pixels = keyframes[k].frame.intrinsics.width * keyframes[k].frame.intrinsics.height;
        map.adam_step += 1;
        let step = map.adam_step;
        for (s, (m, g)) in map
            .stats_mut()
            .iter_mut()
            .zip(grads.mean2d_norm.iter().zip(&grads.gaussians))
        {
            if g.iter().any(|v| *v != 0.0) {
                s.grad_sum += m * pixels as f64;
                s.count += 1;
            }
        }
        let (gaussians, moments) = map.parts_mut();
        for ((g, mo), grad) in gaussians.iter_mut().zip(moments.iter_mut()).zip(&grads.gaussians) {
            let mut p = g.params();
            for j in 0..PARAMS_PER_GAUSSIAN {
                p[j] += adam_step(&mut mo.m[j], &mut mo.v[j], grad[j], rates[j], step);
            }
            let mut next = Gaussian3D::from_params(&p);
            let n = next.rotation.norm();
            next.rotation = if n > 0.0 {
                next.rotation / n
            } else {
                Vector4::new(0.0, 0.0, 0.0, 1.0)
            };
            next.color = next.color.map(|c| c.clamp(0.0, 1.0));
            *g = next;
        }
        if cfg.optimize_trajectories && k != 0 {
            let kf = &mut keyframes[k];
            kf.adam_step += 1;
            let mut delta = [0.0; 12];
            for j in 0..12 {
                let lr = if j % 6 < 3 {
                    cfg.learning_rates.trajectory_rotation
                } else {
                    cfg.learning_rates.trajectory_translation * extent
                };
                delta[j] = adam_step(
                    &mut kf.adam_m[j],
                    &mut kf.adam_v[j],
                    grads.trajectory[j],
                    lr,
                    kf.adam_step,
                );
            }
            kf.trajectory = kf.trajectory.boxplus(&delta);
        }
        if cfg.densify_interval > 0 && (it + 1) % cfg.densify_interval == 0 {
            trace.densify.push(densify_and_prune(map, cfg));
        }
    }
    Ok(trace)
}
