use nalgebra::{Matrix2x3, Vector2, Vector3};

use crate::error::{Error, Result};

/// Pinhole intrinsics with pixel centers on integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Meters per stored depth unit.
    pub depth_scale: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            depth_scale: 1.0 / 5000.0,
        }
    }

    /// Principal point at the image center.
    pub fn centered(width: usize, height: usize, f: f64) -> Self {
        Self::new(
            f,
            f,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64
            && self.depth_scale > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid intrinsics {self:?}")))
        }
    }

    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }

    /// `∂π/∂p` for the pinhole projection.
    #[inline]
    pub fn project_jacobian(&self, p: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz * iz,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz * iz,
        )
    }

    /// Point at depth `depth` (camera z) through pixel `(u, v)`.
    #[inline]
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Unit-norm viewing ray through `(u, v)`.
    #[inline]
    pub fn unit_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        self.backproject(u, v, 1.0).normalize()
    }

    /// Intrinsics of pyramid level `level` (factor-two decimation per level).
    pub fn at_level(&self, level: usize) -> Intrinsics {
        let mut k = *self;
        for _ in 0..level {
            k = Intrinsics {
                fx: k.fx / 2.0,
                fy: k.fy / 2.0,
                cx: k.cx / 2.0,
                cy: k.cy / 2.0,
                width: k.width.div_ceil(2),
                height: k.height.div_ceil(2),
                depth_scale: k.depth_scale,
            };
        }
        k
    }
}
