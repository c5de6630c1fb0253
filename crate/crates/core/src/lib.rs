//! Motion-blur-aware RGB-D SLAM with a Gaussian-splatting map.

pub mod blur;
pub mod camera;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod image;
pub mod lie;
pub mod pipeline;
pub mod splat;
pub mod synth;
pub mod tracker;

pub use camera::Intrinsics;
pub use error::{Error, Result};
pub use image::ImageBuffer;
pub use lie::{ExposureTrajectory, PoseSE3, RotationVector, UnitQuaternion};
