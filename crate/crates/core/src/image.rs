//! RGB image buffers in unit-interval floats, plus PNG I/O.
//!
//! All pixel math in the crate runs on `(H, W, 3)` float arrays with values
//! in `[0, 1]`. Coordinates are corner-based: pixel `(y, x)` covers the unit
//! square `[x, x+1) x [y, y+1)` and its center sits at `(x + 0.5, y + 0.5)`.

use ndarray::{Array2, Array3};
use std::path::Path;

use crate::error::{Error, Result};

/// A binary or soft mask over an image plane, values in `[0, 1]`.
pub type Mask = Array2<f32>;

/// An RGB image stored as `(H, W, 3)` floats in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub data: Array3<f32>,
}

impl ImageBuf {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        if data.shape()[2] != 3 {
            return Err(Error::Shape(format!(
                "expected (H, W, 3) image, got {:?}",
                data.shape()
            )));
        }
        Ok(Self { data })
    }

    /// Constant-color image.
    pub fn splat(height: usize, width: usize, value: f32) -> Self {
        Self {
            data: Array3::from_elem((height, width, 3), value),
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    /// Mean over the three channels, `(H, W)`.
    pub fn to_gray(&self) -> Array2<f32> {
        let (h, w) = (self.height(), self.width());
        Array2::from_shape_fn((h, w), |(y, x)| {
            (self.data[[y, x, 0]] + self.data[[y, x, 1]] + self.data[[y, x, 2]]) / 3.0
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let mut data = Array3::zeros((h as usize, w as usize, 3));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[y as usize, x as usize, c]] = px.0[c] as f32 / 255.0;
            }
        }
        Ok(Self { data })
    }

    /// Writes 8-bit RGB PNG; values are clamped to `[0, 1]` and rounded.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [0, 1, 2].map(|c| {
                    (self.data[[y, x, c]].clamp(0.0, 1.0) * 255.0).round() as u8
                });
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(path)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))
    }
}
