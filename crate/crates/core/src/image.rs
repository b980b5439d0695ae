// SPDX-License-Identifier: MIT OR Apache-2.0

//! Image tensors in `[0, 1]` pixel space and the pixel-level edits used by
//! the masking and cropping baselines.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompts::{PixelBox, PromptMask};

/// Row-major HWC image with pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::dims(
                "ImageTensor::new",
                height * width * channels,
                pixels.len(),
            ));
        }
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::BadGeometry(format!(
                "empty image {height}x{width}x{channels}"
            )));
        }
        if !pixels.iter().all(|p| (0.0..=1.0).contains(p)) {
            return Err(Error::BadParam("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Sets every pixel outside `mask` to `fill`.
    pub fn fill_outside(&self, mask: &PromptMask, fill: f64) -> Result<ImageTensor> {
        if mask.height() != self.height || mask.width() != self.width {
            return Err(Error::BadGeometry(format!(
                "mask {}x{} does not match image {}x{}",
                mask.height(),
                mask.width(),
                self.height,
                self.width
            )));
        }
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                if !mask.get(y, x) {
                    let base = (y * self.width + x) * self.channels;
                    out.pixels[base..base + self.channels].fill(fill);
                }
            }
        }
        Ok(out)
    }

    /// Inclusive crop.
    pub fn crop(&self, b: &PixelBox) -> Result<ImageTensor> {
        if b.x1 >= self.width || b.y1 >= self.height || b.x0 > b.x1 || b.y0 > b.y1 {
            return Err(Error::BadGeometry(format!(
                "crop {b:?} outside {}x{} image",
                self.height, self.width
            )));
        }
        let (h, w) = (b.y1 - b.y0 + 1, b.x1 - b.x0 + 1);
        let mut pixels = Vec::with_capacity(h * w * self.channels);
        for y in b.y0..=b.y1 {
            let start = (y * self.width + b.x0) * self.channels;
            pixels.extend_from_slice(&self.pixels[start..start + w * self.channels]);
        }
        Ok(ImageTensor {
            height: h,
            width: w,
            channels: self.channels,
            pixels,
        })
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<ImageTensor> {
        if height == 0 || width == 0 {
            return Err(Error::BadGeometry("resize to empty image".into()));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let sample = |dst: usize, scale: f64, len: usize| -> (usize, usize, f64) {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let lo = libm::floor(src) as usize;
            let hi = (lo + 1).min(len - 1);
            (lo, hi, src - lo as f64)
        };
        let mut pixels = Vec::with_capacity(height * width * self.channels);
        for y in 0..height {
            let (y0, y1, fy) = sample(y, sy, self.height);
            for x in 0..width {
                let (x0, x1, fx) = sample(x, sx, self.width);
                for c in 0..self.channels {
                    let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
                    let bottom = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
                    pixels.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
                }
            }
        }
        Ok(ImageTensor {
            height,
            width,
            channels: self.channels,
            pixels,
        })
    }
}
