//! Quadrilateral handling, smallest-enclosing-square cropping, coordinate
//! re-mapping, and paste-back compositing.
//!
//! Coordinates are corner-based: pixel `(y, x)` covers `[x, x+1) x [y, y+1)`,
//! so a point with coordinate `x` falls into pixel `floor(x)` and pixel
//! centers sit at half-integers. Under this convention an integer-aligned
//! crop at scale 1 with nearest resampling is an exact pixel copy.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuf;

/// An ordered quadrilateral locating one text instance, in pixels
/// (x rightward, y downward). Points run top-left, top-right, bottom-right,
/// bottom-left along reading direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quad {
    pub points: [[f64; 2]; 4],
}

impl Quad {
    pub fn new(points: [[f64; 2]; 4]) -> Self {
        Self { points }
    }

    /// Axis-aligned rectangle `[x0, x1) x [y0, y1)` as a quad.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            points: [[x0, y0], [x1, y0], [x1, y1], [x0, y1]],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p[0].is_finite() && p[1].is_finite())
    }

    /// Unsigned polygon area (shoelace).
    pub fn area(&self) -> f64 {
        let p = &self.points;
        let mut s = 0.0;
        for i in 0..4 {
            let j = (i + 1) % 4;
            s += p[i][0] * p[j][1] - p[j][0] * p[i][1];
        }
        (s / 2.0).abs()
    }

    /// Axis-aligned bounding box as `(min_x, min_y, max_x, max_y)`.
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        let xs = self.points.map(|p| p[0]);
        let ys = self.points.map(|p| p[1]);
        let fold = |v: [f64; 4], f: fn(f64, f64) -> f64| v.into_iter().reduce(f).unwrap();
        (
            fold(xs, f64::min),
            fold(ys, f64::min),
            fold(xs, f64::max),
            fold(ys, f64::max),
        )
    }

    /// Applies `f` to each point, preserving order.
    pub fn map_points(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Quad {
        Quad {
            points: self.points.map(f),
        }
    }
}

/// How pixels outside the source image are filled when a crop square
/// extends past the borders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PadMode {
    /// Replicate the nearest edge pixel (default).
    Replicate,
    /// Constant fill value.
    Constant(f32),
}

impl Default for PadMode {
    fn default() -> Self {
        PadMode::Replicate
    }
}

/// Resampling kernel for crop and paste operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resample {
    Nearest,
    Bilinear,
}

/// Source-frame geometry of one region crop: a square of side `side` at
/// `origin` (possibly outside the image), resampled to
/// `target_size x target_size`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionCrop {
    /// Top-left corner of the source square; may be negative.
    pub origin: [f64; 2],
    /// Source square side length in source pixels.
    pub side: f64,
    /// Output resolution S.
    pub target_size: usize,
    /// Fill policy for source pixels outside the image.
    pub pad: PadMode,
    /// True when the square extends past the image borders.
    pub pads_outside: bool,
}

impl RegionCrop {
    /// Isotropic scale factor from source pixels to output pixels.
    pub fn scale(&self) -> f64 {
        self.target_size as f64 / self.side
    }
}

/// Settings for [`min_enclosing_square`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    /// Output resolution S.
    pub target_size: usize,
    /// Lower clamp on the source square side; regions whose squares would be
    /// smaller than 2 px are rejected as degenerate.
    pub min_side: f64,
    pub pad: PadMode,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            target_size: 64,
            min_side: 8.0,
            pad: PadMode::Replicate,
        }
    }
}

/// One labelled text instance inside a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub quad: Quad,
    pub label: String,
}

/// A scene image with its labelled text instances.
#[derive(Debug, Clone)]
pub struct SceneImage {
    pub image: ImageBuf,
    pub instances: Vec<Instance>,
}

impl SceneImage {
    pub fn new(image: ImageBuf, instances: Vec<Instance>) -> Result<Self> {
        if image.height() < 8 || image.width() < 8 {
            return Err(Error::Input(format!(
                "scene must be at least 8x8, got {}x{}",
                image.height(),
                image.width()
            )));
        }
        for inst in &instances {
            if inst.label.trim().is_empty() {
                return Err(Error::Input("instance label empty after trim".into()));
            }
        }
        Ok(Self { image, instances })
    }
}

/// Smallest enclosing square around the quad's bounding box, centered on the
/// bbox center. The square may extend past the image borders; that is
/// recorded as padding rather than shifting the square.
pub fn min_enclosing_square(
    quad: &Quad,
    image_extent: (usize, usize),
    cfg: &CropConfig,
) -> Result<RegionCrop> {
    let (h, w) = image_extent;
    if h == 0 || w == 0 {
        return Err(Error::Input("empty image extent".into()));
    }
    if !quad.is_finite() || quad.area() <= 0.0 {
        return Err(Error::DegenerateRegion(format!(
            "quad area {} is not positive",
            quad.area()
        )));
    }
    let (x0, y0, x1, y1) = quad.bbox();
    let side = (x1 - x0).max(y1 - y0).max(cfg.min_side);
    if side < 2.0 {
        return Err(Error::DegenerateRegion(format!(
            "side {side} below 2 px after clamp"
        )));
    }
    let cx = (x0 + x1) / 2.0;
    let cy = (y0 + y1) / 2.0;
    let origin = [cx - side / 2.0, cy - side / 2.0];
    let pads_outside = origin[0] < 0.0
        || origin[1] < 0.0
        || origin[0] + side > w as f64
        || origin[1] + side > h as f64;
    Ok(RegionCrop {
        origin,
        side,
        target_size: cfg.target_size,
        pad: cfg.pad,
        pads_outside,
    })
}

/// Samples the image at a corner-based coordinate.
fn sample(img: &ImageBuf, y: f64, x: f64, kernel: Resample, pad: PadMode) -> [f32; 3] {
    let (h, w) = (img.height() as isize, img.width() as isize);
    let tap = |py: isize, px: isize| -> [f32; 3] {
        if py >= 0 && py < h && px >= 0 && px < w {
            [0, 1, 2].map(|c| img.data[[py as usize, px as usize, c]])
        } else {
            match pad {
                PadMode::Constant(v) => [v; 3],
                PadMode::Replicate => {
                    let cy = py.clamp(0, h - 1) as usize;
                    let cx = px.clamp(0, w - 1) as usize;
                    [0, 1, 2].map(|c| img.data[[cy, cx, c]])
                }
            }
        }
    };
    match kernel {
        Resample::Nearest => tap(y.floor() as isize, x.floor() as isize),
        Resample::Bilinear => {
            let ty = y - 0.5;
            let tx = x - 0.5;
            let iy = ty.floor();
            let ix = tx.floor();
            let fy = (ty - iy) as f32;
            let fx = (tx - ix) as f32;
            let (iy, ix) = (iy as isize, ix as isize);
            let mut out = [0.0f32; 3];
            for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                    let t = tap(iy + dy, ix + dx);
                    for c in 0..3 {
                        out[c] += wy * wx * t[c];
                    }
                }
            }
            out
        }
    }
}

/// Extracts the crop square and resamples it to `S x S x 3`. Source pixels
/// outside the image follow the crop's pad policy.
pub fn crop_region(image: &ImageBuf, crop: &RegionCrop, kernel: Resample) -> ImageBuf {
    let s = crop.target_size;
    let step = crop.side / s as f64;
    let mut out = Array3::zeros((s, s, 3));
    for i in 0..s {
        let sy = crop.origin[1] + (i as f64 + 0.5) * step;
        for j in 0..s {
            let sx = crop.origin[0] + (j as f64 + 0.5) * step;
            let px = sample(image, sy, sx, kernel, crop.pad);
            for c in 0..3 {
                out[[i, j, c]] = px[c];
            }
        }
    }
    ImageBuf { data: out }
}

/// Maps a source-frame point into crop coordinates.
pub fn map_point(p: [f64; 2], crop: &RegionCrop) -> [f64; 2] {
    let k = crop.scale();
    [(p[0] - crop.origin[0]) * k, (p[1] - crop.origin[1]) * k]
}

/// Inverse of [`map_point`].
pub fn unmap_point(p: [f64; 2], crop: &RegionCrop) -> [f64; 2] {
    let k = crop.side / crop.target_size as f64;
    [p[0] * k + crop.origin[0], p[1] * k + crop.origin[1]]
}

/// Maps the quad into crop coordinates, preserving point order.
pub fn map_quad(quad: &Quad, crop: &RegionCrop) -> Quad {
    quad.map_points(|p| map_point(p, crop))
}

/// Inverse of [`map_quad`].
pub fn unmap_quad(quad: &Quad, crop: &RegionCrop) -> Quad {
    quad.map_points(|p| unmap_point(p, crop))
}

/// Resamples the generated `S x S` square back to `side x side` and writes it
/// into the source rectangle. Parts outside the image are discarded; all
/// other pixels are left untouched.
pub fn paste_back(
    original: &ImageBuf,
    generated: &ImageBuf,
    crop: &RegionCrop,
    kernel: Resample,
) -> Result<ImageBuf> {
    let s = crop.target_size;
    if generated.height() != s || generated.width() != s {
        return Err(Error::Shape(format!(
            "generated image is {}x{}, crop target is {s}x{s}",
            generated.height(),
            generated.width()
        )));
    }
    let (h, w) = (original.height(), original.width());
    let mut out = original.clone();
    let k = crop.scale();
    // Integer pixels whose centers fall inside the square.
    let y_start = (crop.origin[1] - 0.5).ceil().max(0.0) as usize;
    let y_end = ((crop.origin[1] + crop.side - 0.5).ceil().max(0.0) as usize).min(h);
    let x_start = (crop.origin[0] - 0.5).ceil().max(0.0) as usize;
    let x_end = ((crop.origin[0] + crop.side - 0.5).ceil().max(0.0) as usize).min(w);
    for y in y_start..y_end {
        let gy = (y as f64 + 0.5 - crop.origin[1]) * k;
        for x in x_start..x_end {
            let gx = (x as f64 + 0.5 - crop.origin[0]) * k;
            let px = sample(generated, gy, gx, kernel, PadMode::Replicate);
            for c in 0..3 {
                out.data[[y, x, c]] = px[c];
            }
        }
    }
    Ok(out)
}
