use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// Fewest keypoints a frame must yield to be tracked.
pub const MIN_KEYPOINTS: usize = 16;

/// An anchor pixel of the current (blurry) frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    /// `(column, row)`.
    pub pixel: Vector2<f64>,
    /// Depth of the anchor pixel, meters.
    pub depth: f64,
    pub gradient_mag: f64,
}

/// A square patch of `size × size` pixels centered on its anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub anchor: Keypoint,
    pub size: usize,
    pub offsets: Vec<(i32, i32)>,
}

impl Patch {
    pub fn new(anchor: Keypoint, size: usize) -> Self {
        assert!(size % 2 == 1, "patch size must be odd");
        let h = (size / 2) as i32;
        let offsets = (-h..=h)
            .flat_map(|dy| (-h..=h).map(move |dx| (dx, dy)))
            .collect();
        Self {
            anchor,
            size,
            offsets,
        }
    }

    pub fn pixels(&self) -> impl Iterator<Item = Vector2<f64>> + '_ {
        self.offsets.iter().map(move |&(dx, dy)| {
            Vector2::new(self.anchor.pixel.x + dx as f64, self.anchor.pixel.y + dy as f64)
        })
    }
}

/// Parameters of grid-based keypoint selection.
#[derive(Debug, Clone, Copy)]
pub struct SelectionParams {
    pub max_keypoints: usize,
    pub gradient_threshold: f64,
    pub patch_size: usize,
}

/// Cells per image side of the selection grid.
pub fn grid_cells(max_keypoints: usize) -> usize {
    ((max_keypoints as f64).sqrt().ceil() as usize).max(1)
}

/// Picks the strongest-gradient pixel of each cell of a uniform grid.
///
/// Candidates must exceed the gradient threshold, have positive finite
/// depth, and leave room for a full patch plus one pixel of border. When
/// more cells qualify than `max_keypoints`, the strongest are kept.
pub fn select_keypoints(
    image: &ImageBuffer,
    depth: &ImageBuffer,
    params: &SelectionParams,
) -> Result<Vec<Keypoint>> {
    if image.width() != depth.width() || image.height() != depth.height() {
        return Err(Error::ShapeMismatch("depth map not aligned to image".into()));
    }
    let gray = image.luminance();
    let (w, h) = (gray.width(), gray.height());
    let cells = grid_cells(params.max_keypoints);
    let margin = params.patch_size / 2 + 1;
    let mut best: Vec<Option<Keypoint>> = vec![None; cells * cells];
    if w > 2 * margin && h > 2 * margin {
        for v in margin..h - margin {
            let cy = v * cells / h;
            for u in margin..w - margin {
                let g = gray.gradient_magnitude(u, v);
                if g < params.gradient_threshold {
                    continue;
                }
                let d = depth.get(u, v, 0);
                if !(d > 0.0 && d.is_finite()) {
                    continue;
                }
                let cell = cy * cells + u * cells / w;
                if best[cell].is_none_or(|k| g > k.gradient_mag) {
                    best[cell] = Some(Keypoint {
                        pixel: Vector2::new(u as f64, v as f64),
                        depth: d,
                        gradient_mag: g,
                    });
                }
            }
        }
    }
    let mut points: Vec<Keypoint> = best.into_iter().flatten().collect();
    if points.len() > params.max_keypoints {
        points.sort_by(|a, b| b.gradient_mag.total_cmp(&a.gradient_mag));
        points.truncate(params.max_keypoints);
        points.sort_by(|a, b| {
            (a.pixel.y, a.pixel.x)
                .partial_cmp(&(b.pixel.y, b.pixel.x))
                .unwrap()
        });
    }
    if points.len() < MIN_KEYPOINTS {
        return Err(Error::InsufficientKeypoints {
            found: points.len(),
            required: MIN_KEYPOINTS,
        });
    }
    Ok(points)
}
