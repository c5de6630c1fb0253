//! Motion-blur-aware frame-to-keyframe tracking.
//!
//! The tracker estimates where the camera was at the start and at the end of
//! the current exposure, relative to a sharp reference image. Patches are
//! anchored in the current blurry frame; each of their pixels is transferred
//! into the reference for every virtual pose of the candidate trajectory,
//! and the averaged (re-blurred) intensity is compared with the captured
//! one. Levenberg–Marquardt minimizes the Huber-robustified residuals over
//! the 12 local parameters `[Δr_start, Δt_start, Δr_end, Δt_end]`, coarse to
//! fine.

mod keypoints;
mod transfer;

use nalgebra::{Matrix4x3, SMatrix, SVector, Vector2, Vector3, Vector4};
use rayon::prelude::*;

pub use keypoints::{grid_cells, select_keypoints, Keypoint, Patch, SelectionParams, MIN_KEYPOINTS};
pub use transfer::{
    reblur_pixel, transfer_point, transfer_point_jacobian, TransferJacobian, TRANSFER_EPS,
};

use crate::blur::virtual_timestamps;
use crate::camera::Intrinsics;
use crate::dataset::RgbdFrame;
use crate::error::{Error, Result};
use crate::image::{build_pyramid, ImageBuffer};
use crate::lie::{interp_jacobians, interpolate_pose, ExposureTrajectory, PoseSE3};

pub type Matrix12 = SMatrix<f64, 12, 12>;
pub type Vector12 = SVector<f64, 12>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub n_virtual: usize,
    pub pyramid_levels: usize,
    /// Huber threshold on `[0, 1]` intensities.
    pub huber_delta: f64,
    pub max_iterations: usize,
    pub lm_lambda_init: f64,
    /// Update-norm threshold that ends a level.
    pub convergence_tol: f64,
    /// Keypoint budget at the finest level; coarser levels get a quarter per level.
    pub max_keypoints: usize,
    pub gradient_threshold: f64,
    pub patch_size: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            n_virtual: 13,
            pyramid_levels: 3,
            huber_delta: 0.1,
            max_iterations: 50,
            lm_lambda_init: 1e-3,
            convergence_tol: 1e-6,
            max_keypoints: 512,
            gradient_threshold: 0.05,
            patch_size: 9,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_virtual > 0
            && self.pyramid_levels > 0
            && self.huber_delta > 0.0
            && self.max_iterations > 0
            && self.lm_lambda_init > 0.0
            && self.convergence_tol > 0.0
            && self.max_keypoints > 0
            && self.gradient_threshold > 0.0
            && self.patch_size % 2 == 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid tracker config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult {
    pub trajectory: ExposureTrajectory,
    pub final_cost: f64,
    /// LM iterations per pyramid level, coarsest first; skipped levels report 0.
    pub iterations_per_level: Vec<usize>,
    pub converged: bool,
    /// Fraction of residuals that are valid and within the Huber threshold.
    pub inlier_fraction: f64,
    pub residual_count: usize,
}

/// Largest damping before a level stops.
const MAX_LAMBDA: f64 = 1e10;
/// Consecutive rejected steps at maximum damping that signal divergence.
const MAX_REJECTIONS_AT_MAX_DAMPING: usize = 5;
/// An accepted step that lowers the cost by less than this fraction ends
/// the level.
const STALL_DECREASE: f64 = 1e-5;

#[inline]
pub fn huber_cost(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

#[inline]
pub fn huber_weight(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

/// One photometric residual: a current-frame pixel with its plane depth in
/// the reference frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelSample {
    pub pixel: Vector2<f64>,
    pub plane_depth: f64,
    pub observed: f64,
}

/// Per-virtual-pose quantities shared by all residuals.
struct VirtualPose {
    q: Vector4<f64>,
    rot: nalgebra::Matrix3<f64>,
    p: Vector3<f64>,
    dq_dr_start: Matrix4x3<f64>,
    dq_dr_end: Matrix4x3<f64>,
    w_start: f64,
    w_end: f64,
}

fn virtual_set(traj: &ExposureTrajectory, n: usize, jacobians: bool) -> Result<Vec<VirtualPose>> {
    let sched = virtual_timestamps(n, traj.exposure)?;
    sched
        .times
        .iter()
        .map(|&t| {
            let pose = interpolate_pose(traj, t)?;
            let (dq_dr_start, dq_dr_end, w_start, w_end) = if jacobians {
                let j = interp_jacobians(traj, t)?;
                (j.dq_dr_start, j.dq_dr_end, j.dt_dtstart[(0, 0)], j.dt_dtend[(0, 0)])
            } else {
                (Matrix4x3::zeros(), Matrix4x3::zeros(), 0.0, 0.0)
            };
            Ok(VirtualPose {
                q: pose.rotation.coords(),
                rot: pose.rotation_matrix(),
                p: pose.translation,
                dq_dr_start,
                dq_dr_end,
                w_start,
                w_end,
            })
        })
        .collect()
}

/// Photometric alignment of current-frame samples against a sharp reference.
pub struct AlignmentProblem<'a> {
    pub reference: &'a ImageBuffer,
    pub cam: Intrinsics,
    pub samples: Vec<PixelSample>,
    pub n_virtual: usize,
    pub huber_delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostSummary {
    /// Huber cost summed over valid residuals.
    pub cost: f64,
    pub valid: usize,
    pub inliers: usize,
    pub total: usize,
}

impl CostSummary {
    pub fn valid_fraction(&self) -> f64 {
        self.valid as f64 / self.total.max(1) as f64
    }

    pub fn inlier_fraction(&self) -> f64 {
        self.inliers as f64 / self.total.max(1) as f64
    }
}

struct Linearization {
    h: Matrix12,
    g: Vector12,
    residuals: Vec<Option<f64>>,
    summary: CostSummary,
}

const CHUNK: usize = 256;

impl AlignmentProblem<'_> {
    /// Residual `observed − reblurred` and its 12-dim gradient row.
    fn residual_row(
        &self,
        s: &PixelSample,
        vps: &[VirtualPose],
        rays: &Vector3<f64>,
        with_jacobian: bool,
    ) -> Option<(f64, Vector12)> {
        let inv_n = 1.0 / vps.len() as f64;
        let mut pred = 0.0;
        let mut row = Vector12::zeros();
        for vp in vps {
            let t = transfer::transfer_ray(rays, s.plane_depth, &vp.q, &vp.rot, &vp.p, &self.cam)
                .ok()?;
            let (val, gu, gv) = self.reference.bilinear_with_gradient(t.pixel.x, t.pixel.y, 0)?;
            pred += val;
            if with_jacobian {
                let (dpz, dq) =
                    transfer::point_jacobian(rays, s.plane_depth, &vp.q, vp.p.z, t.lambda);
                let jp = self.cam.project_jacobian(&t.point);
                // h = ∇I · ∂π/∂p′
                let h = jp.transpose() * Vector2::new(gu, gv);
                let hp = Vector3::new(h.x, h.y, h.dot(&dpz));
                let hq: Vector4<f64> = dq.transpose() * h;
                let rs = vp.dq_dr_start.transpose() * hq;
                let re = vp.dq_dr_end.transpose() * hq;
                for k in 0..3 {
                    row[k] += rs[k];
                    row[3 + k] += hp[k] * vp.w_start;
                    row[6 + k] += re[k];
                    row[9 + k] += hp[k] * vp.w_end;
                }
            }
        }
        Some((s.observed - pred * inv_n, row * -inv_n))
    }

    fn rays(&self) -> Vec<Vector3<f64>> {
        self.samples
            .iter()
            .map(|s| self.cam.unit_ray(s.pixel.x, s.pixel.y))
            .collect()
    }

    /// Residuals for every sample, `None` where a transfer leaves the image.
    pub fn residuals(&self, traj: &ExposureTrajectory) -> Result<Vec<Option<f64>>> {
        let vps = virtual_set(traj, self.n_virtual, false)?;
        let rays = self.rays();
        Ok(self
            .samples
            .par_iter()
            .zip(rays.par_iter())
            .map(|(s, r)| self.residual_row(s, &vps, r, false).map(|(v, _)| v))
            .collect())
    }

    /// Residuals with their analytic Jacobian rows.
    pub fn linearize_rows(&self, traj: &ExposureTrajectory) -> Result<Vec<Option<(f64, Vector12)>>> {
        let vps = virtual_set(traj, self.n_virtual, true)?;
        let rays = self.rays();
        Ok(self
            .samples
            .par_iter()
            .zip(rays.par_iter())
            .map(|(s, r)| self.residual_row(s, &vps, r, true))
            .collect())
    }

    fn summarize(&self, residuals: impl Iterator<Item = Option<f64>>) -> CostSummary {
        let mut out = CostSummary {
            cost: 0.0,
            valid: 0,
            inliers: 0,
            total: 0,
        };
        for r in residuals {
            out.total += 1;
            match r {
                Some(r) => {
                    out.valid += 1;
                    if r.abs() <= self.huber_delta {
                        out.inliers += 1;
                    }
                    out.cost += huber_cost(r, self.huber_delta);
                }
                None => {}
            }
        }
        out
    }

    pub fn cost(&self, traj: &ExposureTrajectory) -> Result<CostSummary> {
        Ok(self.summarize(self.residuals(traj)?.into_iter()))
    }

    fn linearize(&self, traj: &ExposureTrajectory) -> Result<Linearization> {
        let vps = virtual_set(traj, self.n_virtual, true)?;
        let rays = self.rays();
        let delta = self.huber_delta;
        // Fixed-size chunks reduced in order keep the sums bit-reproducible.
        let partials: Vec<(Matrix12, Vector12, Vec<Option<f64>>)> = self
            .samples
            .par_chunks(CHUNK)
            .zip(rays.par_chunks(CHUNK))
            .map(|(ss, rs)| {
                let mut h = Matrix12::zeros();
                let mut g = Vector12::zeros();
                let mut res = Vec::with_capacity(ss.len());
                for (s, r) in ss.iter().zip(rs) {
                    match self.residual_row(s, &vps, r, true) {
                        Some((r, row)) => {
                            let w = huber_weight(r, delta);
                            h.syger(w, &row, &row, 1.0);
                            g += row * (w * r);
                            res.push(Some(r));
                        }
                        None => res.push(None),
                    }
                }
                (h, g, res)
            })
            .collect();
        let mut h = Matrix12::zeros();
        let mut g = Vector12::zeros();
        let mut all = Vec::with_capacity(self.samples.len());
        for (ph, pg, pr) in partials {
            h += ph;
            g += pg;
            all.extend(pr);
        }
        h.fill_upper_triangle_with_lower_triangle();
        let summary = self.summarize(all.iter().copied());
        Ok(Linearization {
            h,
            g,
            residuals: all,
            summary,
        })
    }
}

/// Huber costs of two residual sets over the samples valid in both, so that
/// samples leaving the image neither reward nor penalize a step.
fn common_costs(a: &[Option<f64>], b: &[Option<f64>], delta: f64) -> (f64, f64) {
    a.iter()
        .zip(b)
        .filter_map(|(x, y)| Some((x.as_ref()?, y.as_ref()?)))
        .fold((0.0, 0.0), |(ca, cb), (x, y)| {
            (ca + huber_cost(*x, delta), cb + huber_cost(*y, delta))
        })
}

#[derive(Debug, Clone)]
pub struct LevelOutcome {
    pub trajectory: ExposureTrajectory,
    pub summary: CostSummary,
    pub iterations: usize,
    pub converged: bool,
    /// Norm of the first computed update.
    pub first_update_norm: f64,
}

/// Levenberg–Marquardt with multiplicative damping on the diagonal.
pub fn optimize_level(
    problem: &AlignmentProblem<'_>,
    init: &ExposureTrajectory,
    max_iterations: usize,
    lambda_init: f64,
    tol: f64,
) -> Result<LevelOutcome> {
    let mut traj = *init;
    let mut lin = problem.linearize(&traj)?;
    let mut lambda = lambda_init;
    let mut rejections_at_max = 0;
    let mut iterations = 0;
    let mut converged = false;
    let mut first_update_norm = f64::NAN;

    while iterations < max_iterations {
        iterations += 1;
        if lin.summary.valid == 0 {
            break;
        }
        let scale = lin.h.diagonal().max().max(1e-12);
        let mut damped = lin.h;
        for k in 0..12 {
            damped[(k, k)] += lambda * (lin.h[(k, k)] + 1e-9 * scale);
        }
        let Some(chol) = damped.cholesky() else {
            lambda = (lambda * 10.0).min(MAX_LAMBDA);
            continue;
        };
        // H δ = −g with r = observed − predicted and J = ∂r/∂δ.
        let step = chol.solve(&(-lin.g));
        let step_norm = step.norm();
        if first_update_norm.is_nan() {
            first_update_norm = step_norm;
        }
        if !step_norm.is_finite() {
            return Err(Error::TrackingDiverged("non-finite update".into()));
        }
        if step_norm < tol {
            converged = true;
            break;
        }
        let candidate = traj.boxplus(step.as_slice());
        let cand = problem.residuals(&candidate)?;
        let (before, after) = common_costs(&lin.residuals, &cand, problem.huber_delta);
        if after < before {
            traj = candidate;
            lin = problem.linearize(&traj)?;
            lambda = (lambda * 0.5).max(1e-12);
            rejections_at_max = 0;
            if before - after < STALL_DECREASE * before {
                converged = true;
                break;
            }
        } else {
            if lambda >= MAX_LAMBDA {
                rejections_at_max += 1;
                if rejections_at_max >= MAX_REJECTIONS_AT_MAX_DAMPING {
                    return Err(Error::TrackingDiverged(
                        "cost keeps increasing at maximum damping".into(),
                    ));
                }
            }
            lambda = (lambda * 10.0).min(MAX_LAMBDA);
        }
    }
    if !lin.summary.cost.is_finite() || !traj.start.is_finite() || !traj.end.is_finite() {
        return Err(Error::TrackingDiverged("non-finite cost or pose".into()));
    }
    Ok(LevelOutcome {
        trajectory: traj,
        summary: lin.summary,
        iterations,
        converged,
        first_update_norm,
    })
}

/// Builds the residual samples of one pyramid level.
///
/// Each patch shares the plane depth of its anchor, moved into the
/// reference frame with the mid-exposure pose of `estimate`.
pub fn build_samples(
    cur: &ImageBuffer,
    keypoints: &[Keypoint],
    patch_size: usize,
    cam: &Intrinsics,
    estimate: &ExposureTrajectory,
) -> Vec<PixelSample> {
    let mid = estimate.mid();
    let mut out = Vec::with_capacity(keypoints.len() * patch_size * patch_size);
    for kp in keypoints {
        let anchor = cam.backproject(kp.pixel.x, kp.pixel.y, kp.depth);
        let plane_depth = mid.transform_point(&anchor).z;
        if plane_depth <= TRANSFER_EPS {
            continue;
        }
        let patch = Patch::new(*kp, patch_size);
        for px in patch.pixels() {
            let (u, v) = (px.x as isize, px.y as isize);
            if u < 0 || v < 0 || u as usize >= cur.width() || v as usize >= cur.height() {
                continue;
            }
            out.push(PixelSample {
                pixel: px,
                plane_depth,
                observed: cur.get(u as usize, v as usize, 0),
            });
        }
    }
    out
}

/// Estimates the exposure trajectory of `cur` relative to `reference`.
///
/// `reference` is a sharp rendering of the keyframe; the returned poses map
/// current-camera coordinates to reference-camera coordinates.
pub fn track_frame(
    reference: &ImageBuffer,
    cur: &RgbdFrame,
    init: &ExposureTrajectory,
    cfg: &TrackerConfig,
) -> Result<TrackResult> {
    cfg.validate()?;
    reference.luminance().check_same_shape(&cur.color.luminance())?;
    if cur.depth.width() != cur.color.width() || cur.depth.height() != cur.color.height() {
        return Err(Error::ShapeMismatch("depth map not aligned to color".into()));
    }
    let levels = cfg.pyramid_levels;
    let ref_pyr = build_pyramid(&reference.luminance(), levels);
    let cur_pyr = build_pyramid(&cur.color.luminance(), levels);
    let mut depth_pyr = vec![cur.depth.clone()];
    for _ in 1..levels {
        let next = depth_pyr.last().unwrap().decimate();
        depth_pyr.push(next);
    }

    let mut traj = *init;
    let mut iterations_per_level = vec![0; levels];
    let mut final_outcome: Option<LevelOutcome> = None;
    for level in (0..levels).rev() {
        let cam = cur.intrinsics.at_level(level);
        let params = SelectionParams {
            max_keypoints: (cfg.max_keypoints >> (2 * level)).max(MIN_KEYPOINTS),
            gradient_threshold: cfg.gradient_threshold,
            patch_size: cfg.patch_size,
        };
        let keypoints = match select_keypoints(&cur_pyr[level], &depth_pyr[level], &params) {
            Ok(k) => k,
            Err(Error::InsufficientKeypoints { .. }) if level > 0 => continue,
            Err(e) => return Err(e),
        };
        let samples = build_samples(&cur_pyr[level], &keypoints, cfg.patch_size, &cam, &traj);
        let problem = AlignmentProblem {
            reference: &ref_pyr[level],
            cam,
            samples,
            n_virtual: cfg.n_virtual,
            huber_delta: cfg.huber_delta,
        };
        let outcome = optimize_level(
            &problem,
            &traj,
            cfg.max_iterations,
            cfg.lm_lambda_init,
            cfg.convergence_tol,
        )?;
        iterations_per_level[levels - 1 - level] = outcome.iterations;
        traj = outcome.trajectory;
        final_outcome = Some(outcome);
    }
    let outcome = final_outcome.expect("finest level always runs");
    if outcome.summary.valid_fraction() < 0.5 {
        return Err(Error::TrackingDiverged(format!(
            "only {:.0}% of residuals remain inside the reference image",
            100.0 * outcome.summary.valid_fraction()
        )));
    }
    Ok(TrackResult {
        trajectory: traj,
        final_cost: outcome.summary.cost,
        iterations_per_level,
        converged: outcome.converged,
        inlier_fraction: outcome.summary.inlier_fraction(),
        residual_count: outcome.summary.total,
    })
}

/// Constant-velocity prediction of the next exposure from the previous one.
///
/// The motion across the previous exposure is assumed to continue at the
/// same rate through the gap of `gap` seconds between exposures and through
/// the next exposure. With no gap the start of the prediction is the
/// previous end pose. Poses are camera-to-world.
pub fn constant_velocity_guess(prev: &ExposureTrajectory, gap: f64, exposure: f64) -> ExposureTrajectory {
    let delta = prev.start.inverse().compose(&prev.end);
    let scaled = |frac: f64| -> PoseSE3 {
        let step = ExposureTrajectory::stationary(PoseSE3::identity(), 1.0);
        let step = ExposureTrajectory { end: delta, ..step };
        if frac <= 1.0 {
            interpolate_pose(&step, frac.max(0.0)).unwrap_or(delta)
        } else {
            // Repeat whole deltas, then the fractional remainder.
            let mut acc = PoseSE3::identity();
            let mut left = frac;
            while left > 1.0 {
                acc = acc.compose(&delta);
                left -= 1.0;
            }
            acc.compose(&interpolate_pose(&step, left).unwrap_or(delta))
        }
    };
    let ratio = |s: f64| if prev.exposure > 0.0 { s / prev.exposure } else { 0.0 };
    let start = prev.end.compose(&scaled(ratio(gap.max(0.0))));
    let end = start.compose(&scaled(ratio(exposure)));
    ExposureTrajectory {
        start,
        end,
        exposure,
    }
}
