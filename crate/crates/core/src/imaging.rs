//! Frame and mask containers plus PNG persistence.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

/// RGB frame with interleaved `H×W×3` values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * 3);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Planar `[3, H*W]` copy, optionally standardized per channel.
    pub fn to_planar(&self, standardize: Option<([f64; 3], [f64; 3])>) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                let v = self.data[p * 3 + c];
                out[c * n + p] = match standardize {
                    Some((mean, std)) => (v - mean[c]) / std[c],
                    None => v,
                };
            }
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
        Ok(Self::new(h as usize, w as usize, data))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.pixel(y, x);
                img.put_pixel(x as u32, y as u32, Rgb(p.map(to_u8)));
            }
        }
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Rounds every value to the nearest 8-bit level, matching a PNG round trip.
    pub fn quantized(&self) -> Self {
        Self::new(
            self.height,
            self.width,
            self.data
                .iter()
                .map(|&v| f64::from(to_u8(v)) / 255.0)
                .collect(),
        )
    }
}

/// Single-channel `H×W` map. Ground-truth masks hold `{0, 1}`; predictions
/// hold probabilities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Per-pixel glass probability.
pub type ProbMask = Mask;

impl Mask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), height * width);
        Self {
            height,
            width,
            values,
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn same_size(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Bilinear resampling to a new size.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let plan = crate::graph::ResizePlan::new(self.height, self.width, height, width);
        Self::new(height, width, plan.apply(1, &self.values))
    }

    /// Loads an 8-bit grayscale PNG; with `binarize`, values > 127 map to 1.
    pub fn load_png(path: &Path, binarize: bool) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        let values = img
            .as_raw()
            .iter()
            .map(|&v| {
                if binarize {
                    f64::from(u8::from(v > 127))
                } else {
                    f64::from(v) / 255.0
                }
            })
            .collect();
        Ok(Self::new(h as usize, w as usize, values))
    }

    /// Saves `round(value × 255)` as 8-bit grayscale.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = GrayImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                img.put_pixel(x as u32, y as u32, Luma([to_u8(self.get(y, x))]));
            }
        }
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Raw little-endian dump: `u32 height, u32 width`, then `f32` values.
    pub fn save_raw(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(8 + 4 * self.values.len());
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
