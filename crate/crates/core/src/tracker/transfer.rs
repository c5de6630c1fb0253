//! Pixel transfer from a virtual (current) view into the sharp reference
//! view through a fronto-parallel plane at depth `d` in the reference frame.
//!
//! A pixel `x` of the virtual camera `T = (q, p)` is back-projected along
//! its unit ray, intersected with the plane `z = d` of the reference frame,
//! and the intersection is projected into the reference image. The pose maps
//! virtual-camera coordinates into reference-camera coordinates.

use nalgebra::{Matrix2x3, Matrix2x4, SMatrix, Vector2, Vector3, Vector4};

use crate::blur::virtual_poses;
use crate::camera::Intrinsics;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::lie::{ExposureTrajectory, PoseSE3};

/// `∂x′/∂[p_x, p_y, p_z, q_x, q_y, q_z, q_w]`.
pub type TransferJacobian = SMatrix<f64, 2, 7>;

/// Smallest admissible ray/plane-normal cosine and camera depth.
pub const TRANSFER_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Transfer {
    pub pixel: Vector2<f64>,
    /// Intersection in the reference camera frame.
    pub point: Vector3<f64>,
    pub lambda: f64,
}

#[inline]
fn lambda_of(q: &Vector4<f64>, ray: &Vector3<f64>) -> f64 {
    let (qx, qy, qz, qw) = (q[0], q[1], q[2], q[3]);
    let (x, y, z) = (ray.x, ray.y, ray.z);
    2.0 * x * (qx * qz - qw * qy)
        + 2.0 * y * (qx * qw + qy * qz)
        + z * (qw * qw - qx * qx - qy * qy + qz * qz)
}

#[inline]
pub(crate) fn transfer_ray(
    ray: &Vector3<f64>,
    d: f64,
    q: &Vector4<f64>,
    rot: &nalgebra::Matrix3<f64>,
    p: &Vector3<f64>,
    cam: &Intrinsics,
) -> Result<Transfer> {
    let lambda = lambda_of(q, ray);
    if lambda <= TRANSFER_EPS {
        return Err(Error::DegenerateRay { cosine: lambda });
    }
    let dist = d - p.z;
    if dist <= TRANSFER_EPS {
        return Err(Error::BehindCamera { z: dist });
    }
    let p3d = ray * (dist / lambda);
    let point = rot * p3d + p;
    if point.z <= TRANSFER_EPS {
        return Err(Error::BehindCamera { z: point.z });
    }
    Ok(Transfer {
        pixel: cam.project(&point),
        point,
        lambda,
    })
}

/// Pixel of the reference image hit by the ray through `x` of the virtual
/// camera `pose`, intersected with the plane at depth `d`.
pub fn transfer_point(
    x: &Vector2<f64>,
    d: f64,
    pose: &PoseSE3,
    cam: &Intrinsics,
) -> Result<Vector2<f64>> {
    let ray = cam.unit_ray(x.x, x.y);
    let q = pose.rotation.coords();
    transfer_ray(&ray, d, &q, &pose.rotation_matrix(), &pose.translation, cam).map(|t| t.pixel)
}

/// `∂p′/∂p_z` (3) and `∂p′/∂q` (3×4) from the closed forms.
///
/// `∂p′/∂p_x` and `∂p′/∂p_y` are the unit vectors. The derivatives are taken
/// with respect to the raw quaternion components; `p′` is invariant to the
/// quaternion's scale.
#[inline]
pub(crate) fn point_jacobian(
    ray: &Vector3<f64>,
    d: f64,
    q: &Vector4<f64>,
    pz: f64,
    lambda: f64,
) -> (Vector3<f64>, nalgebra::Matrix3x4<f64>) {
    let (qx, qy, qz, qw) = (q[0], q[1], q[2], q[3]);
    let (x, y, z) = (ray.x, ray.y, ray.z);

    let a0 = qx * x + qy * y + qz * z;
    let a1 = qy * x - qw * z - qx * y;
    let a2 = qw * y - qx * z + qz * x;
    let a3 = qw * x + qy * z - qz * y;
    let a4 = qw * z + qx * y - qy * x;

    let b0 = -2.0 * (qw * qz - qx * qy);
    let b1 = 2.0 * (qw * qy + qx * qz);
    let b2 = 2.0 * (qw * qz + qx * qy);
    let b3 = -2.0 * (qw * qx - qy * qz);
    let b4 = -2.0 * (qw * qy - qx * qz);
    let b5 = 2.0 * (qw * qx + qy * qz);

    let (ww, xx, yy, zz) = (qw * qw, qx * qx, qy * qy, qz * qz);
    let g0 = x * (ww + xx - yy - zz) + y * b0 + z * b1;
    let g1 = x * b2 + y * (ww - xx + yy - zz) + z * b3;
    let g2 = x * b4 + y * b5 + z * (ww - xx - yy + zz);

    let il = 1.0 / lambda;
    let (c0, c1, c2) = (g0 * il, g1 * il, g2 * il);
    let dpz = Vector3::new(-c0, -c1, 1.0 - c2);

    let k = 2.0 * (d - pz) * il;
    #[rustfmt::skip]
    let dq = nalgebra::Matrix3x4::new(
        a0 - a2 * c0,  a4 + a3 * c0,  -a2 - a0 * c0, a3 - a4 * c0,
        a1 - a2 * c1,  a0 + a3 * c1,  a3 - a0 * c1,  a2 - a4 * c1,
        a2 - a2 * c2,  -a3 + a3 * c2, a0 - a0 * c2,  a4 - a4 * c2,
    ) * k;
    (dpz, dq)
}

/// Transferred pixel together with its 2×7 Jacobian with respect to
/// `[p_x, p_y, p_z, q_x, q_y, q_z, q_w]` of the virtual camera pose.
pub fn transfer_point_jacobian(
    x: &Vector2<f64>,
    d: f64,
    pose: &PoseSE3,
    cam: &Intrinsics,
) -> Result<(Vector2<f64>, TransferJacobian)> {
    let ray = cam.unit_ray(x.x, x.y);
    let q = pose.rotation.coords();
    let t = transfer_ray(&ray, d, &q, &pose.rotation_matrix(), &pose.translation, cam)?;
    let (dpz, dq) = point_jacobian(&ray, d, &q, pose.translation.z, t.lambda);
    let jp = cam.project_jacobian(&t.point);
    let mut dp = Matrix2x3::zeros();
    dp.set_column(0, &jp.column(0));
    dp.set_column(1, &jp.column(1));
    dp.set_column(2, &(jp * dpz));
    let dqx: Matrix2x4<f64> = jp * dq;
    let mut j = TransferJacobian::zeros();
    j.fixed_view_mut::<2, 3>(0, 0).copy_from(&dp);
    j.fixed_view_mut::<2, 4>(0, 3).copy_from(&dqx);
    Ok((t.pixel, j))
}

/// Re-blurred intensity of pixel `x`: the mean over the virtual poses of
/// the bilinear reference intensity at the transferred location.
///
/// Returns `None` when any transferred sample falls outside `reference`.
pub fn reblur_pixel(
    x: &Vector2<f64>,
    reference: &ImageBuffer,
    d: f64,
    traj: &ExposureTrajectory,
    n: usize,
    cam: &Intrinsics,
) -> Result<Option<f64>> {
    let poses = virtual_poses(traj, n)?;
    let mut acc = 0.0;
    for pose in &poses {
        let Ok(xr) = transfer_point(x, d, pose, cam) else {
            return Ok(None);
        };
        match reference.bilinear(xr.x, xr.y, 0) {
            Some(v) => acc += v,
            None => return Ok(None),
        }
    }
    Ok(Some(acc / poses.len() as f64))
}
