//! Dense RGB images and along-ray depth maps.

use crate::error::{Error, Result};

/// Row-major RGB image with intensities nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::LengthMismatch {
                what: "image pixels",
                expected: width * height,
                got: data.len(),
            });
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: [f64; 3]) -> Self {
        Image {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: [f64; 3]) {
        self.data[y * self.width + x] = value;
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&p| f(p)).collect(),
        }
    }

    /// Channel-mean grayscale plane.
    pub fn gray(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|p| (p[0] + p[1] + p[2]) / 3.0)
            .collect()
    }
}

/// Per-pixel along-ray distance with validity flags.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// An all-invalid map.
    pub fn empty(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            depth: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    /// Builds a map from raw values; entries that are not finite and positive are marked invalid.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::LengthMismatch {
                what: "depth values",
                expected: width * height,
                got: values.len(),
            });
        }
        let valid = values.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        let depth = values
            .into_iter()
            .map(|d| if d.is_finite() && d > 0.0 { d } else { 0.0 })
            .collect();
        Ok(DepthMap {
            width,
            height,
            depth,
            valid,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Depth at a pixel, `None` when invalid.
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.depth[i])
    }

    /// Stores a depth; non-finite or non-positive values invalidate the pixel.
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        let i = y * self.width + x;
        if value.is_finite() && value > 0.0 {
            self.depth[i] = value;
            self.valid[i] = true;
        } else {
            self.depth[i] = 0.0;
            self.valid[i] = false;
        }
    }

    pub fn invalidate(&mut self, x: usize, y: usize) {
        let i = y * self.width + x;
        self.depth[i] = 0.0;
        self.valid[i] = false;
    }

    /// Raw values, with invalid pixels reported as 0.
    pub fn values(&self) -> &[f64] {
        &self.depth
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    pub fn max_valid(&self) -> Option<f64> {
        self.depth
            .iter()
            .zip(&self.valid)
            .filter(|(_, v)| **v)
            .map(|(d, _)| *d)
            .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.max(d))))
    }
}
