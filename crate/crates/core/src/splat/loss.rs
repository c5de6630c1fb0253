//! Photometric, geometric, structural, and shape losses of a blur-aware
//! render against a captured keyframe.

use nalgebra::Vector3;

use super::gaussian::{GaussianGrad, GaussianMap, PARAMS_PER_GAUSSIAN};
use super::mapper::{Keyframe, MapperConfig};
use super::raster::{
    rasterize, rasterize_cached, rasterize_gradients, rasterize_gradients_cached, ImageGradients,
    RenderCache,
};
use crate::blur::{synthesize_blur, virtual_timestamps};
use crate::error::Result;
use crate::eval::ssim_with_gradient;
use crate::image::ImageBuffer;
use crate::lie::{interp_jacobians, interpolate_pose};

/// Rendered depth must be backed by at least this much opacity to be
/// compared with the captured depth.
pub const DEPTH_ALPHA_MIN: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub color: f64,
    pub depth: f64,
    pub ssim: f64,
    pub reg: f64,
}

/// Mean of the color renders at the keyframe's virtual poses.
pub fn render_blurry(map: &GaussianMap, keyframe: &Keyframe, n_virtual: usize) -> Result<ImageBuffer> {
    let cam = keyframe.frame.intrinsics;
    synthesize_blur(
        |pose| Ok(rasterize(map, pose, &cam).color),
        &keyframe.trajectory,
        n_virtual,
    )
}

/// `mean over Gaussians of max(max(S)/min(S), r) − r` and its gradient
/// with respect to the log-scales.
pub fn scale_regularizer(map: &GaussianMap, ratio: f64) -> (f64, Vec<[f64; 3]>) {
    let n = map.len().max(1) as f64;
    let mut total = 0.0;
    let grads = map
        .gaussians()
        .iter()
        .map(|g| {
            let ls = g.log_scale;
            let (imax, imin) = (ls.imax(), ls.imin());
            let q = (ls[imax] - ls[imin]).exp();
            let mut out = [0.0; 3];
            if q > ratio {
                total += q - ratio;
                if imax != imin {
                    out[imax] += q / n;
                    out[imin] -= q / n;
                }
            }
            out
        })
        .collect();
    (total / n, grads)
}

/// Forward passes are kept for the reverse pass while the number of
/// rendered pixels per loss evaluation stays below this.
const CACHE_PIXEL_BUDGET: usize = 1 << 19;

/// Rendered images needed by the loss.
struct Renders {
    blurry: ImageBuffer,
    mid_depth: ImageBuffer,
    mid_alpha: ImageBuffer,
    /// Forward state per virtual pose, then for the mid pose.
    caches: Vec<RenderCache>,
}

fn render_all(map: &GaussianMap, kf: &Keyframe, n: usize, keep: bool) -> Result<Renders> {
    let cam = kf.frame.intrinsics;
    let mut caches = Vec::new();
    let blurry = synthesize_blur(
        |pose| {
            if keep {
                let (out, cache) = rasterize_cached(map, pose, &cam);
                caches.push(cache);
                Ok(out.color)
            } else {
                Ok(rasterize(map, pose, &cam).color)
            }
        },
        &kf.trajectory,
        n,
    )?;
    let mid_pose = kf.trajectory.mid();
    let mid = if keep {
        let (out, cache) = rasterize_cached(map, &mid_pose, &cam);
        caches.push(cache);
        out
    } else {
        rasterize(map, &mid_pose, &cam)
    };
    Ok(Renders {
        blurry,
        mid_depth: mid.depth,
        mid_alpha: mid.alpha,
        caches,
    })
}

fn depth_mask(kf: &Keyframe, alpha: &ImageBuffer) -> Vec<bool> {
    kf.frame
        .depth
        .data()
        .iter()
        .zip(alpha.data())
        .map(|(&d, &a)| d > 0.0 && d.is_finite() && a > DEPTH_ALPHA_MIN)
        .collect()
}

fn evaluate(
    map: &GaussianMap,
    kf: &Keyframe,
    cfg: &MapperConfig,
    r: &Renders,
    want_gradient: bool,
) -> Result<(LossBreakdown, Option<ImageBuffer>, Option<ImageBuffer>)> {
    let captured = &kf.frame.color;
    let n_color = captured.data().len() as f64;
    let color = r.blurry.mean_abs_diff(captured);
    let (ssim, ssim_grad) = ssim_with_gradient(&r.blurry, captured, want_gradient)?;
    let mask = depth_mask(kf, &r.mid_alpha);
    let n_depth = mask.iter().filter(|&&m| m).count();
    let depth = if n_depth == 0 {
        0.0
    } else {
        mask.iter()
            .zip(r.mid_depth.data().iter().zip(kf.frame.depth.data()))
            .filter(|(m, _)| **m)
            .map(|(_, (a, b))| (a - b).abs())
            .sum::<f64>()
            / n_depth as f64
    };
    let (reg, _) = scale_regularizer(map, cfg.reg_ratio);
    let l_ssim = 1.0 - ssim;
    let total = cfg.lambda_color * color
        + cfg.lambda_ssim * l_ssim
        + cfg.lambda_depth * depth
        + cfg.lambda_reg * reg;
    let breakdown = LossBreakdown {
        total,
        color,
        depth,
        ssim: l_ssim,
        reg,
    };
    if !want_gradient {
        return Ok((breakdown, None, None));
    }
    let ssim_grad = ssim_grad.expect("requested");
    let mut g_color = ImageBuffer::new(captured.width(), captured.height(), captured.channels());
    for ((g, (a, b)), s) in g_color
        .data_mut()
        .iter_mut()
        .zip(r.blurry.data().iter().zip(captured.data()))
        .zip(ssim_grad.data())
    {
        *g = cfg.lambda_color * sign(a - b) / n_color - cfg.lambda_ssim * s;
    }
    let mut g_depth = ImageBuffer::new(captured.width(), captured.height(), 1);
    if n_depth > 0 {
        for (i, g) in g_depth.data_mut().iter_mut().enumerate() {
            if mask[i] {
                let diff = r.mid_depth.data()[i] - kf.frame.depth.data()[i];
                *g = cfg.lambda_depth * sign(diff) / n_depth as f64;
            }
        }
    }
    Ok((breakdown, Some(g_color), Some(g_depth)))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss components of `map` against one keyframe.
pub fn compute_losses(map: &GaussianMap, kf: &Keyframe, cfg: &MapperConfig) -> Result<LossBreakdown> {
    let r = render_all(map, kf, cfg.n_virtual, false)?;
    Ok(evaluate(map, kf, cfg, &r, false)?.0)
}

/// Gradients of the total loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub gaussians: Vec<GaussianGrad>,
    /// `[Δr_start, Δt_start, Δr_end, Δt_end]` of the keyframe trajectory.
    pub trajectory: [f64; 12],
    /// Screen-space mean-gradient norm per Gaussian, summed over renders.
    pub mean2d_norm: Vec<f64>,
}

/// Loss and exact gradients with respect to every Gaussian parameter and
/// the keyframe's trajectory.
pub fn loss_and_gradients(
    map: &GaussianMap,
    kf: &Keyframe,
    cfg: &MapperConfig,
) -> Result<(LossBreakdown, LossGradients)> {
    let cam = kf.frame.intrinsics;
    let n = cfg.n_virtual;
    let keep = cam.width * cam.height * (n + 1) <= CACHE_PIXEL_BUDGET;
    let r = render_all(map, kf, n, keep)?;
    let (loss, g_color, g_depth) = evaluate(map, kf, cfg, &r, true)?;
    let g_color = g_color.expect("requested").scale(1.0 / n as f64);
    let g_depth = g_depth.expect("requested");

    let mut out = LossGradients {
        gaussians: vec![[0.0; PARAMS_PER_GAUSSIAN]; map.len()],
        trajectory: [0.0; 12],
        mean2d_norm: vec![0.0; map.len()],
    };
    let traj = &kf.trajectory;
    let mut accumulate = |t: f64, cache: Option<&RenderCache>, upstream: ImageGradients| -> Result<()> {
        let pose = interpolate_pose(traj, t)?;
        let g = match cache {
            Some(c) => rasterize_gradients_cached(map, &pose, &cam, c, &upstream),
            None => rasterize_gradients(map, &pose, &cam, &upstream),
        };
        for (acc, gi) in out.gaussians.iter_mut().zip(&g.gaussians) {
            for (a, b) in acc.iter_mut().zip(gi) {
                *a += b;
            }
        }
        for (acc, m) in out.mean2d_norm.iter_mut().zip(&g.mean2d_norm) {
            *acc += m;
        }
        let j = interp_jacobians(traj, t)?;
        let rs: Vector3<f64> = j.dq_dr_start.transpose() * g.pose.quaternion;
        let re: Vector3<f64> = j.dq_dr_end.transpose() * g.pose.quaternion;
        let ts: Vector3<f64> = j.dt_dtstart.transpose() * g.pose.translation;
        let te: Vector3<f64> = j.dt_dtend.transpose() * g.pose.translation;
        for k in 0..3 {
            out.trajectory[k] += rs[k];
            out.trajectory[3 + k] += ts[k];
            out.trajectory[6 + k] += re[k];
            out.trajectory[9 + k] += te[k];
        }
        Ok(())
    };
    for (i, &t) in virtual_timestamps(n, traj.exposure)?.times.iter().enumerate() {
        accumulate(
            t,
            r.caches.get(i),
            ImageGradients {
                color: Some(g_color.clone()),
                ..Default::default()
            },
        )?;
    }
    if g_depth.data().iter().any(|&v| v != 0.0) {
        accumulate(
            traj.exposure / 2.0,
            r.caches.get(n),
            ImageGradients {
                depth: Some(g_depth),
                ..Default::default()
            },
        )?;
    }
    let (_, reg_grad) = scale_regularizer(map, cfg.reg_ratio);
    for (acc, g) in out.gaussians.iter_mut().zip(&reg_grad) {
        for k in 0..3 {
            acc[3 + k] += cfg.lambda_reg * g[k];
        }
    }
    Ok((loss, out))
}
