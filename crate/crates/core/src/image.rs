//! Dense float images with bilinear sampling and pyramid construction.
//!
//! Pixel `(u, v)` has its center at integer coordinates; `u` is the column.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{}x{}x{} image needs {} values, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for v in 0..height {
            for u in 0..width {
                for c in 0..channels {
                    data.push(f(u, v, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &ImageBuffer) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    #[inline]
    pub fn index(&self, u: usize, v: usize, c: usize) -> usize {
        (v * self.width + u) * self.channels + c
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize, c: usize) -> f64 {
        self.data[self.index(u, v, c)]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, c: usize, value: f64) {
        let i = self.index(u, v, c);
        self.data[i] = value;
    }

    pub fn pixel(&self, u: usize, v: usize) -> &[f64] {
        let i = self.index(u, v, 0);
        &self.data[i..i + self.channels]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageBuffer {
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(&self) -> ImageBuffer {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Single-channel luminance (Rec. 601 weights); gray images are copied.
    pub fn luminance(&self) -> ImageBuffer {
        match self.channels {
            1 => self.clone(),
            3 => {
                let data = self
                    .data
                    .chunks_exact(3)
                    .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                    .collect();
                ImageBuffer {
                    width: self.width,
                    height: self.height,
                    channels: 1,
                    data,
                }
            }
            c => {
                let data = self
                    .data
                    .chunks_exact(c)
                    .map(|p| p.iter().sum::<f64>() / c as f64)
                    .collect();
                ImageBuffer {
                    width: self.width,
                    height: self.height,
                    channels: 1,
                    data,
                }
            }
        }
    }

    /// Whether a bilinear lookup at `(u, v)` keeps `margin` pixels from the border.
    #[inline]
    pub fn in_bounds(&self, u: f64, v: f64, margin: f64) -> bool {
        u >= margin
            && v >= margin
            && u <= self.width as f64 - 1.0 - margin
            && v <= self.height as f64 - 1.0 - margin
    }

    /// Bilinear sample of channel `c`, `None` outside the image.
    #[inline]
    pub fn bilinear(&self, u: f64, v: f64, c: usize) -> Option<f64> {
        self.bilinear_with_gradient(u, v, c).map(|(val, _, _)| val)
    }

    /// Bilinear sample with its exact derivatives `(∂/∂u, ∂/∂v)`.
    #[inline]
    pub fn bilinear_with_gradient(&self, u: f64, v: f64, c: usize) -> Option<(f64, f64, f64)> {
        if !self.in_bounds(u, v, 0.0) {
            return None;
        }
        let mut u0 = u.floor() as usize;
        let mut v0 = v.floor() as usize;
        if u0 + 1 >= self.width {
            u0 = self.width.saturating_sub(2);
        }
        if v0 + 1 >= self.height {
            v0 = self.height.saturating_sub(2);
        }
        let fu = u - u0 as f64;
        let fv = v - v0 as f64;
        let p00 = self.get(u0, v0, c);
        let p10 = self.get(u0 + 1, v0, c);
        let p01 = self.get(u0, v0 + 1, c);
        let p11 = self.get(u0 + 1, v0 + 1, c);
        let top = p00 + fu * (p10 - p00);
        let bottom = p01 + fu * (p11 - p01);
        let value = top + fv * (bottom - top);
        let du = (p10 - p00) + fv * ((p11 - p01) - (p10 - p00));
        let dv = bottom - top;
        Some((value, du, dv))
    }

    /// Central-difference gradient magnitude of channel 0 at an interior pixel.
    pub fn gradient_magnitude(&self, u: usize, v: usize) -> f64 {
        if u == 0 || v == 0 || u + 1 >= self.width || v + 1 >= self.height {
            return 0.0;
        }
        let gx = 0.5 * (self.get(u + 1, v, 0) - self.get(u - 1, v, 0));
        let gy = 0.5 * (self.get(u, v + 1, 0) - self.get(u, v - 1, 0));
        (gx * gx + gy * gy).sqrt()
    }

    /// Factor-two downsampling after a 5-tap binomial filter.
    ///
    /// Output pixel `(i, j)` is centered on input pixel `(2i, 2j)`.
    pub fn downsample(&self) -> ImageBuffer {
        const TAPS: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
        let w2 = self.width.div_ceil(2);
        let h2 = self.height.div_ceil(2);
        let clamp = |x: isize, n: usize| x.clamp(0, n as isize - 1) as usize;
        // Horizontal pass on the even columns.
        let mut tmp = ImageBuffer::new(w2, self.height, self.channels);
        for v in 0..self.height {
            for i in 0..w2 {
                for c in 0..self.channels {
                    let mut acc = 0.0;
                    for (k, t) in TAPS.iter().enumerate() {
                        let u = clamp(2 * i as isize + k as isize - 2, self.width);
                        acc += t * self.get(u, v, c);
                    }
                    tmp.set(i, v, c, acc);
                }
            }
        }
        let mut out = ImageBuffer::new(w2, h2, self.channels);
        for j in 0..h2 {
            for i in 0..w2 {
                for c in 0..self.channels {
                    let mut acc = 0.0;
                    for (k, t) in TAPS.iter().enumerate() {
                        let v = clamp(2 * j as isize + k as isize - 2, self.height);
                        acc += t * tmp.get(i, v, c);
                    }
                    out.set(i, j, c, acc);
                }
            }
        }
        out
    }

    /// Depth maps are decimated without filtering to keep depths metric.
    pub fn decimate(&self) -> ImageBuffer {
        let w2 = self.width.div_ceil(2);
        let h2 = self.height.div_ceil(2);
        ImageBuffer::from_fn(w2, h2, self.channels, |i, j, c| self.get(2 * i, 2 * j, c))
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.data.iter().sum::<f64>() / self.data.len() as f64
        }
    }

    pub fn max_abs_diff(&self, other: &ImageBuffer) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean_abs_diff(&self, other: &ImageBuffer) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.data.len().max(1) as f64
    }

    pub fn scale(&self, s: f64) -> ImageBuffer {
        self.map(|v| v * s)
    }
}

/// Image pyramid, finest level first.
pub fn build_pyramid(image: &ImageBuffer, levels: usize) -> Vec<ImageBuffer> {
    let mut out = vec![image.clone()];
    for _ in 1..levels.max(1) {
        let next = out.last().unwrap().downsample();
        out.push(next);
    }
    out
}
