//! Image and label rasters as they live on disk and in datasets.

use crate::error::{Error, Result};
use crate::mat::{Mat, Scalar};

/// Sentinel for unlabeled mask pixels.
pub const IGNORE: i32 = -1;

/// `C x H x W` planar raster.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ImageTensor {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "image data {} != {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(ImageTensor {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Channel-last `(H*W) x C` matrix of the top-left `height x width` crop.
    pub fn to_channel_last<T: Scalar>(&self, height: usize, width: usize) -> Mat<T> {
        let mut m = Mat::zeros(height * width, self.channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..self.channels {
                    m.data[(y * width + x) * self.channels + c] =
                        T::from_f32(self.at(c, y, x)).unwrap_or_else(T::nan);
                }
            }
        }
        m
    }

    /// Inverse of [`ImageTensor::to_channel_last`].
    pub fn from_channel_last<T: Scalar>(m: &Mat<T>, height: usize, width: usize) -> Self {
        assert_eq!(m.rows, height * width);
        let mut img = ImageTensor::zeros(m.cols, height, width);
        for y in 0..height {
            for x in 0..width {
                for c in 0..m.cols {
                    img.set(c, y, x, m.at(y * width + x, c).to_f32().unwrap_or(f32::NAN));
                }
            }
        }
        img
    }
}

/// `H x W` class map; [`IGNORE`] marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<i32>,
}

impl LabelMask {
    pub fn filled(height: usize, width: usize, v: i32) -> Self {
        LabelMask {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn new(height: usize, width: usize, data: Vec<i32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("mask data {} != {height}x{width}", data.len())));
        }
        Ok(LabelMask {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> i32 {
        self.data[y * self.width + x]
    }

    /// Top-left crop, row-major.
    pub fn crop(&self, height: usize, width: usize) -> LabelMask {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            data.extend_from_slice(&self.data[y * self.width..y * self.width + width]);
        }
        LabelMask {
            height,
            width,
            data,
        }
    }

    /// Pixel count per class id in `0..classes`.
    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &v in &self.data {
            if v >= 0 && (v as usize) < classes {
                h[v as usize] += 1;
            }
        }
        h
    }
}
