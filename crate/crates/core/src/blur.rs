//! Physical blur synthesis: a blurry image is the mean of virtual sharp
//! images rendered along the exposure trajectory.

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::lie::{interpolate_pose, ExposureTrajectory, PoseSE3};

/// Sample times of the virtual sharp images within one exposure.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualSchedule {
    pub exposure: f64,
    pub times: Vec<f64>,
}

impl VirtualSchedule {
    pub fn count(&self) -> usize {
        self.times.len()
    }
}

/// Uniform schedule `t_i = i·τ/(n−1)`; a single sample sits at `τ/2`.
pub fn virtual_timestamps(n: usize, exposure: f64) -> Result<VirtualSchedule> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "number of virtual images must be positive".into(),
        ));
    }
    if !(exposure > 0.0 && exposure.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "exposure must be positive, got {exposure}"
        )));
    }
    let times = if n == 1 {
        vec![exposure / 2.0]
    } else {
        (0..n)
            .map(|i| {
                if i == n - 1 {
                    exposure
                } else {
                    i as f64 * exposure / (n - 1) as f64
                }
            })
            .collect()
    };
    Ok(VirtualSchedule { exposure, times })
}

/// Virtual camera poses along `traj` for `n` samples.
pub fn virtual_poses(traj: &ExposureTrajectory, n: usize) -> Result<Vec<PoseSE3>> {
    virtual_timestamps(n, traj.exposure)?
        .times
        .iter()
        .map(|&t| interpolate_pose(traj, t))
        .collect()
}

/// Pixelwise mean of `render` evaluated at the virtual poses of `traj`.
///
/// Renders are summed in schedule order so the result is bit-reproducible.
pub fn synthesize_blur<F>(mut render: F, traj: &ExposureTrajectory, n: usize) -> Result<ImageBuffer>
where
    F: FnMut(&PoseSE3) -> Result<ImageBuffer>,
{
    let poses = virtual_poses(traj, n)?;
    let mut acc: Option<ImageBuffer> = None;
    for pose in &poses {
        let img = render(pose)?;
        match acc.as_mut() {
            None => acc = Some(img),
            Some(sum) => {
                sum.check_same_shape(&img)?;
                for (a, b) in sum.data_mut().iter_mut().zip(img.data()) {
                    *a += b;
                }
            }
        }
    }
    let sum = acc.expect("schedule is non-empty");
    let inv = 1.0 / poses.len() as f64;
    Ok(sum.map(|v| v * inv))
}
