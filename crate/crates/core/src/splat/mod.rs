//! Differentiable Gaussian splatting map with blur-aware optimization.

pub mod checkpoint;
pub mod gaussian;
pub mod loss;
pub mod mapper;
pub mod project;
pub mod raster;

pub use gaussian::{Gaussian3D, GaussianMap};
pub use mapper::{optimize_map, Keyframe, MapperConfig};
pub use raster::{rasterize, RenderOutput};
