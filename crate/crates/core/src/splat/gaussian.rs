use nalgebra::{Matrix3, Vector3, Vector4};

use crate::lie::{rotation_matrix, UnitQuaternion};

/// Number of optimizable scalars per Gaussian:
/// mean (3), log-scale (3), raw quaternion (4), opacity logit (1), color (3).
pub const PARAMS_PER_GAUSSIAN: usize = 14;

/// An anisotropic 3D Gaussian in world coordinates.
///
/// Scale is stored as its logarithm and opacity as a logit so both stay in
/// range under unconstrained updates. The quaternion `(x, y, z, w)` is kept
/// unnormalized between optimizer steps and normalized where it is used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian3D {
    pub mean: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: Vector4<f64>,
    pub opacity_logit: f64,
    pub color: Vector3<f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Gaussian3D {
    pub fn new(
        mean: Vector3<f64>,
        scale: Vector3<f64>,
        rotation: UnitQuaternion,
        opacity: f64,
        color: Vector3<f64>,
    ) -> Self {
        Self {
            mean,
            log_scale: scale.map(f64::ln),
            rotation: rotation.coords(),
            opacity_logit: logit(opacity),
            color,
        }
    }

    pub fn isotropic(mean: Vector3<f64>, scale: f64, opacity: f64, color: Vector3<f64>) -> Self {
        Self::new(
            mean,
            Vector3::from_element(scale),
            UnitQuaternion::IDENTITY,
            opacity,
            color,
        )
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotation_matrix(&self.rotation)
    }

    /// World covariance `R S Sᵀ Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let m = self.rotation_matrix() * Matrix3::from_diagonal(&self.scale());
        m * m.transpose()
    }

    pub fn params(&self) -> [f64; PARAMS_PER_GAUSSIAN] {
        let mut p = [0.0; PARAMS_PER_GAUSSIAN];
        p[0..3].copy_from_slice(self.mean.as_slice());
        p[3..6].copy_from_slice(self.log_scale.as_slice());
        p[6..10].copy_from_slice(self.rotation.as_slice());
        p[10] = self.opacity_logit;
        p[11..14].copy_from_slice(self.color.as_slice());
        p
    }

    pub fn from_params(p: &[f64; PARAMS_PER_GAUSSIAN]) -> Self {
        Self {
            mean: Vector3::new(p[0], p[1], p[2]),
            log_scale: Vector3::new(p[3], p[4], p[5]),
            rotation: Vector4::new(p[6], p[7], p[8], p[9]),
            opacity_logit: p[10],
            color: Vector3::new(p[11], p[12], p[13]),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.params().iter().all(|v| v.is_finite()) && self.rotation.norm() > 0.0
    }
}

/// Gradient of a scalar loss with respect to one Gaussian's parameters, in
/// the layout of [`Gaussian3D::params`].
pub type GaussianGrad = [f64; PARAMS_PER_GAUSSIAN];

/// Densification statistics accumulated during optimization.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DensifyStats {
    /// Sum of screen-space mean-gradient norms, pixels⁻¹.
    pub grad_sum: f64,
    pub count: u32,
}

impl DensifyStats {
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.grad_sum / self.count as f64
        }
    }
}

/// Adam first and second moments for one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub m: [f64; PARAMS_PER_GAUSSIAN],
    pub v: [f64; PARAMS_PER_GAUSSIAN],
}

impl Default for Moments {
    fn default() -> Self {
        Self {
            m: [0.0; PARAMS_PER_GAUSSIAN],
            v: [0.0; PARAMS_PER_GAUSSIAN],
        }
    }
}

/// A growable set of Gaussians with stable identifiers, densification
/// statistics, and optimizer state kept in lockstep.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianMap {
    gaussians: Vec<Gaussian3D>,
    ids: Vec<u64>,
    stats: Vec<DensifyStats>,
    moments: Vec<Moments>,
    next_id: u64,
    /// Optimizer steps taken so far.
    pub(crate) adam_step: u64,
}

impl GaussianMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_gaussians(gaussians: impl IntoIterator<Item = Gaussian3D>) -> Self {
        let mut map = Self::new();
        for g in gaussians {
            map.push(g);
        }
        map
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn gaussians(&self) -> &[Gaussian3D] {
        &self.gaussians
    }

    pub fn gaussians_mut(&mut self) -> &mut [Gaussian3D] {
        &mut self.gaussians
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn stats(&self) -> &[DensifyStats] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [DensifyStats] {
        &mut self.stats
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [Gaussian3D], &mut [Moments]) {
        (&mut self.gaussians, &mut self.moments)
    }

    /// Adds a Gaussian with fresh statistics and optimizer state; returns its id.
    pub fn push(&mut self, g: Gaussian3D) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.gaussians.push(g);
        self.ids.push(id);
        self.stats.push(DensifyStats::default());
        self.moments.push(Moments::default());
        id
    }

    /// Keeps the Gaussians for which `keep(index, gaussian)` holds.
    pub fn retain(&mut self, mut keep: impl FnMut(usize, &Gaussian3D) -> bool) -> usize {
        let flags: Vec<bool> = self
            .gaussians
            .iter()
            .enumerate()
            .map(|(i, g)| keep(i, g))
            .collect();
        let before = self.len();
        let mut it = flags.iter();
        self.gaussians.retain(|_| *it.next().unwrap());
        let mut it = flags.iter();
        self.ids.retain(|_| *it.next().unwrap());
        let mut it = flags.iter();
        self.stats.retain(|_| *it.next().unwrap());
        let mut it = flags.iter();
        self.moments.retain(|_| *it.next().unwrap());
        before - self.len()
    }

    pub fn reset_stats(&mut self) {
        self.stats.fill(DensifyStats::default());
    }

    /// Radius of the smallest origin-centered ball holding every mean.
    pub fn extent(&self) -> f64 {
        self.gaussians
            .iter()
            .map(|g| g.mean.norm())
            .fold(0.0, f64::max)
    }
}
