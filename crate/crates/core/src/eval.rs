//! Trajectory and image-quality metrics.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::lie::{PoseSE3, UnitQuaternion};

#[derive(Debug, Clone, PartialEq)]
pub struct AteReport {
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    /// Maps estimated positions onto ground truth: `p ↦ scale · R p + t`.
    pub alignment: PoseSE3,
    pub scale: f64,
    pub pairs: usize,
}

impl AteReport {
    /// `key=value` lines for machine consumption.
    pub fn to_key_values(&self) -> String {
        format!(
            "ate.rmse={}\nate.mean={}\nate.median={}\nate.max={}\nate.scale={}\nate.pairs={}\n",
            self.rmse, self.mean, self.median, self.max, self.scale, self.pairs
        )
    }
}

/// Pairs each estimated pose with the nearest ground-truth timestamp
/// within `tolerance`.
pub fn associate_poses(
    estimated: &[(f64, PoseSE3)],
    groundtruth: &[(f64, PoseSE3)],
    tolerance: f64,
) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let mut gt: Vec<&(f64, PoseSE3)> = groundtruth.iter().collect();
    gt.sort_by(|a, b| a.0.total_cmp(&b.0));
    estimated
        .iter()
        .filter_map(|(t, p)| {
            let i = gt.partition_point(|g| g.0 < *t);
            let best = [i.checked_sub(1), Some(i)]
                .into_iter()
                .flatten()
                .filter(|&j| j < gt.len())
                .min_by(|&a, &b| (gt[a].0 - t).abs().total_cmp(&(gt[b].0 - t).abs()))?;
            ((gt[best].0 - t).abs() <= tolerance).then(|| (p.translation, gt[best].1.translation))
        })
        .collect()
}

/// Closed-form least-squares similarity (or rigid) transform mapping
/// `src` onto `dst`: returns `(R, t, s)`.
pub fn umeyama(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    with_scale: bool,
) -> (Matrix3<f64>, Vector3<f64>, f64) {
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
        var_s += (s - mu_s).norm_squared();
    }
    cov /= n;
    var_s /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sign = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let r = u * sign * v_t;
    let scale = if with_scale && var_s > 0.0 {
        (Matrix3::from_diagonal(&svd.singular_values) * sign).trace() / var_s
    } else {
        1.0
    };
    let t = mu_d - r * mu_s * scale;
    (r, t, scale)
}

/// Absolute trajectory error after optimal alignment of estimated to
/// ground-truth positions.
pub fn ate_rmse(
    estimated: &[(f64, PoseSE3)],
    groundtruth: &[(f64, PoseSE3)],
    tolerance: f64,
    with_scale: bool,
) -> Result<AteReport> {
    let pairs = associate_poses(estimated, groundtruth, tolerance);
    if pairs.len() < 2 {
        return Err(Error::InsufficientPairs { found: pairs.len() });
    }
    let (src, dst): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let (r, t, scale) = umeyama(&src, &dst, with_scale);
    let mut errors: Vec<f64> = src
        .iter()
        .zip(&dst)
        .map(|(s, d)| (r * s * scale + t - d).norm())
        .collect();
    let n = errors.len();
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n as f64).sqrt();
    let mean = errors.iter().sum::<f64>() / n as f64;
    errors.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        errors[n / 2]
    } else {
        0.5 * (errors[n / 2 - 1] + errors[n / 2])
    };
    Ok(AteReport {
        rmse,
        mean,
        median,
        max: errors[n - 1],
        alignment: PoseSE3::new(UnitQuaternion::from_rotation_matrix(&r), t),
        scale,
        pairs: n,
    })
}

/// Peak signal-to-noise ratio for images in `[0, 1]`, in dB.
///
/// Identical images yield `f64::INFINITY`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.check_same_shape(b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable "same"-size filtering with zero padding. The kernel is
/// symmetric, so this operator is its own adjoint.
fn filter(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    s += kv * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    s += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn channel(img: &ImageBuffer, c: usize) -> Vec<f64> {
    img.data()
        .iter()
        .skip(c)
        .step_by(img.channels())
        .copied()
        .collect()
}

/// Mean structural similarity over pixels and channels, with its gradient
/// with respect to `a` when requested.
pub fn ssim_with_gradient(
    a: &ImageBuffer,
    b: &ImageBuffer,
    want_gradient: bool,
) -> Result<(f64, Option<ImageBuffer>)> {
    a.check_same_shape(b)?;
    let (w, h, nc) = (a.width(), a.height(), a.channels());
    let k = ssim_kernel();
    let count = (w * h * nc) as f64;
    let mut total = 0.0;
    let mut grad = want_gradient.then(|| ImageBuffer::new(w, h, nc));
    for c in 0..nc {
        let x = channel(a, c);
        let y = channel(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mu_x = filter(&x, w, h, &k);
        let mu_y = filter(&y, w, h, &k);
        let m_xx = filter(&xx, w, h, &k);
        let m_yy = filter(&yy, w, h, &k);
        let m_xy = filter(&xy, w, h, &k);
        let n = w * h;
        let (mut d_mu, mut d_xx, mut d_xy) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let sxx = m_xx[i] - mx * mx;
            let syy = m_yy[i] - my * my;
            let sxy = m_xy[i] - mx * my;
            let a1 = 2.0 * mx * my + SSIM_C1;
            let a2 = 2.0 * sxy + SSIM_C2;
            let b1 = mx * mx + my * my + SSIM_C1;
            let b2 = sxx + syy + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_gradient {
                d_mu[i] = 2.0 * s * ((my / a1 - mx / b1) - (my / a2 - mx / b2)) / count;
                d_xx[i] = -s / b2 / count;
                d_xy[i] = 2.0 * s / a2 / count;
            }
        }
        if let Some(g) = grad.as_mut() {
            let f_mu = filter(&d_mu, w, h, &k);
            let f_xx = filter(&d_xx, w, h, &k);
            let f_xy = filter(&d_xy, w, h, &k);
            for i in 0..n {
                g.data_mut()[i * nc + c] = f_mu[i] + 2.0 * x[i] * f_xx[i] + y[i] * f_xy[i];
            }
        }
    }
    Ok((total / count, grad))
}

/// Mean SSIM: 11×11 Gaussian window with σ = 1.5, dynamic range 1.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    ssim_with_gradient(a, b, false).map(|(v, _)| v)
}
