use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};

use super::gaussian::{Gaussian3D, GaussianGrad};
use crate::camera::Intrinsics;
use crate::lie::{rotation_matrix_vjp, PoseSE3};

/// Low-pass term added to every screen-space covariance, pixels².
pub const COV2D_BLUR: f64 = 0.3;
/// Gaussians closer to the camera than this are culled, meters.
pub const NEAR_PLANE: f64 = 0.01;
/// Smallest contribution that is composited.
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
pub const MAX_ALPHA: f64 = 0.999;

/// A Gaussian projected into one view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian2D {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    /// Camera-frame z of the mean, meters.
    pub depth: f64,
    pub color: Vector3<f64>,
    pub opacity: f64,
    /// Half-size of the screen-space bounding box, pixels.
    pub extent: Vector2<f64>,
}

/// World-to-camera rotation and camera-frame mean of a Gaussian.
struct CameraFrame {
    w: Matrix3<f64>,
    p_c: Vector3<f64>,
}

fn camera_frame(g: &Gaussian3D, cam_to_world: &PoseSE3) -> CameraFrame {
    let w = cam_to_world.rotation_matrix().transpose();
    CameraFrame {
        p_c: w * (g.mean - cam_to_world.translation),
        w,
    }
}

fn affine_jacobian(p: &Vector3<f64>, cam: &Intrinsics) -> Matrix2x3<f64> {
    cam.project_jacobian(p)
}

/// Projects `g` into the camera with camera-to-world pose `cam_to_world`.
///
/// Returns `None` when the mean is closer than the near plane, when the
/// Gaussian can never reach the compositing threshold, or when its
/// footprint misses the image.
pub fn project_gaussian(
    g: &Gaussian3D,
    cam_to_world: &PoseSE3,
    cam: &Intrinsics,
) -> Option<Gaussian2D> {
    let CameraFrame { w, p_c } = camera_frame(g, cam_to_world);
    if p_c.z <= NEAR_PLANE {
        return None;
    }
    let opacity = g.opacity();
    if opacity * 1.0 < MIN_ALPHA {
        return None;
    }
    let t = affine_jacobian(&p_c, cam) * w;
    let cov2d = t * g.covariance() * t.transpose() + Matrix2::identity() * COV2D_BLUR;
    let conic = cov2d.try_inverse()?;
    let mean2d = cam.project(&p_c);
    // Mahalanobis radius at which opacity · G falls below the threshold.
    let m2 = 2.0 * (opacity / MIN_ALPHA).ln();
    let extent = Vector2::new((m2 * cov2d[(0, 0)]).sqrt(), (m2 * cov2d[(1, 1)]).sqrt());
    let (w_px, h_px) = (cam.width as f64, cam.height as f64);
    if mean2d.x + extent.x < -0.5
        || mean2d.x - extent.x > w_px - 0.5
        || mean2d.y + extent.y < -0.5
        || mean2d.y - extent.y > h_px - 0.5
    {
        return None;
    }
    Some(Gaussian2D {
        mean2d,
        cov2d,
        conic,
        depth: p_c.z,
        color: g.color,
        opacity,
        extent,
    })
}

/// Loss gradient with respect to one projected Gaussian.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Grad2D {
    pub mean2d: Vector2<f64>,
    /// `(a, b, c)` of the conic `[[a, b], [b, c]]`; `b` is the shared
    /// off-diagonal entry.
    pub conic: Vector3<f64>,
    /// With respect to the opacity itself, not its logit.
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub depth: f64,
}

impl Grad2D {
    pub fn add(&mut self, o: &Grad2D) {
        self.mean2d += o.mean2d;
        self.conic += o.conic;
        self.opacity += o.opacity;
        self.color += o.color;
        self.depth += o.depth;
    }

    pub fn is_zero(&self) -> bool {
        self.mean2d == Vector2::zeros()
            && self.conic == Vector3::zeros()
            && self.opacity == 0.0
            && self.color == Vector3::zeros()
            && self.depth == 0.0
    }
}

/// Loss gradient with respect to a camera-to-world pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseGrad {
    /// Right-multiplicative rotation tangent.
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
    /// Raw quaternion coordinates `(x, y, z, w)`.
    pub quaternion: Vector4<f64>,
}

impl Default for PoseGrad {
    fn default() -> Self {
        Self {
            rotation: Vector3::zeros(),
            translation: Vector3::zeros(),
            quaternion: Vector4::zeros(),
        }
    }
}

impl PoseGrad {
    pub fn add(&mut self, o: &PoseGrad) {
        self.rotation += o.rotation;
        self.translation += o.translation;
        self.quaternion += o.quaternion;
    }
}

/// Reverse pass of [`project_gaussian`].
pub fn project_gaussian_vjp(
    g: &Gaussian3D,
    cam_to_world: &PoseSE3,
    cam: &Intrinsics,
    grad: &Grad2D,
) -> (GaussianGrad, PoseGrad) {
    let CameraFrame { w, p_c } = camera_frame(g, cam_to_world);
    let j = affine_jacobian(&p_c, cam);
    let t = j * w;
    let r = g.rotation_matrix();
    let s = Matrix3::from_diagonal(&g.scale());
    let m = r * s;
    let sigma = m * m.transpose();
    let cov2d = t * sigma * t.transpose() + Matrix2::identity() * COV2D_BLUR;
    let k = cov2d.try_inverse().unwrap_or_else(Matrix2::zeros);

    // Conic to screen covariance.
    let gk = Matrix2::new(
        grad.conic.x,
        0.5 * grad.conic.y,
        0.5 * grad.conic.y,
        grad.conic.z,
    );
    let g_cov2d = -(k * gk * k);
    // Screen covariance to world covariance and to T = J W.
    let g_sigma = t.transpose() * g_cov2d * t;
    let g_t = 2.0 * g_cov2d * t * sigma;
    let g_j = g_t * w.transpose();
    let mut g_w = j.transpose() * g_t;

    // J depends on the camera-frame mean.
    let (fx, fy) = (cam.fx, cam.fy);
    let (x, y, z) = (p_c.x, p_c.y, p_c.z);
    let iz2 = 1.0 / (z * z);
    let iz3 = iz2 / z;
    let mut g_pc = Vector3::new(
        -g_j[(0, 2)] * fx * iz2,
        -g_j[(1, 2)] * fy * iz2,
        -g_j[(0, 0)] * fx * iz2 + g_j[(0, 2)] * 2.0 * fx * x * iz3 - g_j[(1, 1)] * fy * iz2
            + g_j[(1, 2)] * 2.0 * fy * y * iz3,
    );
    g_pc += j.transpose() * grad.mean2d;
    g_pc.z += grad.depth;

    // Σ = M Mᵀ, M = R S.
    let g_m = 2.0 * g_sigma * m;
    let g_r = g_m * s;
    let rt_gm = r.transpose() * g_m;
    let scale = g.scale();

    let mut out = [0.0; 14];
    let g_mean = w.transpose() * g_pc;
    out[0..3].copy_from_slice(g_mean.as_slice());
    for a in 0..3 {
        out[3 + a] = rt_gm[(a, a)] * scale[a];
    }
    let g_q = rotation_matrix_vjp(&g.rotation, &g_r);
    out[6..10].copy_from_slice(g_q.as_slice());
    let o = g.opacity();
    out[10] = grad.opacity * o * (1.0 - o);
    out[11..14].copy_from_slice(grad.color.as_slice());

    // Pose: p_c = W (μ − t) and W = Rᵀ.
    g_w += g_pc * (g.mean - cam_to_world.translation).transpose();
    let a = g_w * w.transpose();
    let rotation = -Vector3::new(
        a[(2, 1)] - a[(1, 2)],
        a[(0, 2)] - a[(2, 0)],
        a[(1, 0)] - a[(0, 1)],
    );
    let translation = -(w.transpose() * g_pc);
    let quaternion = rotation_matrix_vjp(&cam_to_world.rotation.coords(), &g_w.transpose());
    (
        out,
        PoseGrad {
            rotation,
            translation,
            quaternion,
        },
    )
}
