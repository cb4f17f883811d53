//! Word- and character-level conditioning rasters for one text instance.
//!
//! For a crop `I_s` with transformed quad `P_t'` this builds the binary text
//! mask `I_M`, the masked crop `I_m = I_M * I_s`, the affine-aligned word
//! glyph render `I_G`, and the per-character intensity-coded stack `I_g`.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use unicode_segmentation::UnicodeSegmentation;

use crate::error::{Error, Result};
use crate::font::{rasterize_polyline, Font};
use crate::geometry::{
    crop_region, map_quad, min_enclosing_square, CropConfig, Quad, RegionCrop, Resample,
    SceneImage,
};
use crate::image::{ImageBuf, Mask};
use crate::text::normalize_label;

/// Character-stack settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharStackConfig {
    /// Maximum characters L; longer labels are truncated.
    pub max_chars: usize,
    /// Intensity budget P_M; character i is drawn at `i * (P_M / L)` (floor).
    pub intensity_budget: u32,
    /// Tile side T; each character is rendered into a T x T channel plane.
    pub tile: usize,
    pub background_value: u8,
    pub pad_value: u8,
    /// `"builtin"` or a stroke-font file path.
    pub font_ref: String,
}

impl Default for CharStackConfig {
    fn default() -> Self {
        Self {
            max_chars: 25,
            intensity_budget: 128,
            tile: 64,
            background_value: 255,
            pad_value: 0,
            font_ref: "builtin".into(),
        }
    }
}

impl CharStackConfig {
    /// Per-index intensity step, `floor(P_M / L)`.
    pub fn intensity_step(&self) -> u32 {
        self.intensity_budget / self.max_chars as u32
    }

    /// Foreground intensity of the 1-based character index `i`.
    pub fn intensity(&self, i: usize) -> f32 {
        (i as u32 * self.intensity_step()) as f32
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_chars == 0 {
            return Err(Error::Config("max_chars must be positive".into()));
        }
        let l = self.max_chars as u32;
        if l * self.intensity_step() > self.intensity_budget
            || self.intensity_budget > self.background_value as u32 - 1
        {
            return Err(Error::Config(format!(
                "intensity budget {} violates L*floor(P_M/L) <= P_M <= background-1",
                self.intensity_budget
            )));
        }
        if self.tile < 16 {
            return Err(Error::Config("tile side must be at least 16".into()));
        }
        Ok(())
    }
}

/// Settings for assembling one instance's conditioning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondConfig {
    pub crop: CropConfig,
    pub chars: CharStackConfig,
    /// When false (full-image ablation) the crop square covers the whole
    /// scene instead of the instance region.
    pub region_centric: bool,
    pub kernel: Resample,
}

impl Default for CondConfig {
    fn default() -> Self {
        Self {
            crop: CropConfig::default(),
            chars: CharStackConfig::default(),
            region_centric: true,
            kernel: Resample::Bilinear,
        }
    }
}

/// The per-instance conditioning bundle.
#[derive(Debug, Clone)]
pub struct CondPack {
    /// I_s: the S x S crop.
    pub crop_image: ImageBuf,
    /// I_M: binary mask, 0 on text, 1 elsewhere.
    pub mask: Mask,
    /// I_m = I_M * I_s.
    pub masked_image: ImageBuf,
    /// I_G: word glyph render, black on white.
    pub word_glyph: ImageBuf,
    /// I_g: L x T x T character stack in raw 0..=255 values.
    pub char_stack: Array3<f32>,
    /// P_t': the quad in crop coordinates.
    pub quad: Quad,
    /// Normalized label.
    pub label: String,
    pub source_ref: String,
    /// Geometry used to extract `crop_image`; kept for paste-back.
    pub crop: RegionCrop,
    /// True when the label exceeded L characters.
    pub truncated: bool,
    /// Clusters replaced by the substitution glyph.
    pub substituted: Vec<String>,
}

/// Binary text mask: interior of the quad (even-odd fill over pixel centers)
/// is 0, everything else 1.
pub fn build_mask(quad: &Quad, size: usize) -> Result<Mask> {
    let s = size as f64;
    for p in &quad.points {
        if p[0] < -1e-6 || p[0] > s + 1e-6 || p[1] < -1e-6 || p[1] > s + 1e-6 {
            return Err(Error::OutOfFrame(format!(
                "point ({}, {}) outside [0, {size}]^2",
                p[0], p[1]
            )));
        }
    }
    let mut mask = Array2::ones((size, size));
    let pts = &quad.points;
    for row in 0..size {
        let yc = row as f64 + 0.5;
        let mut xs: Vec<f64> = Vec::with_capacity(4);
        for i in 0..4 {
            let a = pts[i];
            let b = pts[(i + 1) % 4];
            if (a[1] > yc) != (b[1] > yc) {
                xs.push(a[0] + (yc - a[1]) / (b[1] - a[1]) * (b[0] - a[0]));
            }
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in xs.chunks_exact(2) {
            let j0 = ((pair[0] - 0.5).ceil().max(0.0)) as usize;
            let j1 = (((pair[1] - 0.5).ceil()).max(0.0) as usize).min(size);
            for j in j0..j1 {
                mask[[row, j]] = 0.0;
            }
        }
    }
    Ok(mask)
}

/// Elementwise product with the mask broadcast over the three channels.
pub fn mask_apply(image: &ImageBuf, mask: &Mask) -> Result<ImageBuf> {
    let (h, w) = (image.height(), image.width());
    if mask.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "mask {:?} does not match image {h}x{w}",
            mask.dim()
        )));
    }
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let m = mask[[y, x]];
            for c in 0..3 {
                out.data[[y, x, c]] *= m;
            }
        }
    }
    Ok(out)
}

/// An affine map `p = M (u, v) + t`.
#[derive(Debug, Clone, Copy)]
pub struct Affine {
    pub m: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Affine {
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.m[0][0] * p[0] + self.m[0][1] * p[1] + self.t[0],
            self.m[1][0] * p[0] + self.m[1][1] * p[1] + self.t[1],
        ]
    }

    /// Least-squares fit of the unit rectangle's corners onto the quad.
    /// Exact whenever the quad is a parallelogram.
    pub fn fit_unit_rect(quad: &Quad) -> Affine {
        // Unit corners (0,0),(1,0),(1,1),(0,1) in quad point order.
        let us = [0.0, 1.0, 1.0, 0.0];
        let vs = [0.0, 0.0, 1.0, 1.0];
        // Normal matrix of [[u, v, 1]] rows; constant for these corners.
        let ata = [[2.0, 1.0, 2.0], [1.0, 2.0, 2.0], [2.0, 2.0, 4.0]];
        let mut rows = [[0.0f64; 3]; 2];
        for coord in 0..2 {
            let mut atb = [0.0f64; 3];
            for k in 0..4 {
                let target = quad.points[k][coord];
                atb[0] += us[k] * target;
                atb[1] += vs[k] * target;
                atb[2] += target;
            }
            rows[coord] = solve3(ata, atb);
        }
        Affine {
            m: [[rows[0][0], rows[0][1]], [rows[1][0], rows[1][1]]],
            t: [rows[0][2], rows[1][2]],
        }
    }
}

fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> [f64; 3] {
    // Gaussian elimination with partial pivoting on a 3x3 system.
    let mut m = [[0.0f64; 4]; 3];
    for i in 0..3 {
        m[i][..3].copy_from_slice(&a[i]);
        m[i][3] = b[i];
    }
    for col in 0..3 {
        let piv = (col..3)
            .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())
            .unwrap();
        m.swap(col, piv);
        let d = m[col][col];
        for row in 0..3 {
            if row != col && d != 0.0 {
                let f = m[row][col] / d;
                for k in col..4 {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    [m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]]
}

/// Renders the word glyph prior `I_G`: the label typeset on the unit
/// rectangle in the standard font, mapped onto the quad. Black glyphs on a
/// white field, antialiased.
pub fn render_word_glyph(
    label: &str,
    quad: &Quad,
    size: usize,
    font: &Font,
) -> (ImageBuf, Vec<String>) {
    let layout = font.layout_label(label);
    let affine = Affine::fit_unit_rect(quad);
    // Stroke thickness follows the glyph-height direction of the map.
    let v_len = (affine.m[0][1].powi(2) + affine.m[1][1].powi(2)).sqrt();
    let hw = (layout.stroke_half_width * v_len).max(0.5);
    let mut ink = Array2::zeros((size, size));
    for poly in &layout.strokes {
        let mapped: Vec<[f64; 2]> = poly.iter().map(|p| affine.apply(*p)).collect();
        rasterize_polyline(&mut ink, &mapped, hw, true);
    }
    let mut out = ImageBuf::splat(size, size, 1.0);
    for y in 0..size {
        for x in 0..size {
            let v = 1.0 - ink[[y, x]];
            for c in 0..3 {
                out.data[[y, x, c]] = v;
            }
        }
    }
    (out, layout.substituted)
}

/// Metadata recorded while building a character stack.
#[derive(Debug, Clone, Default)]
pub struct CharStackMeta {
    pub truncated: bool,
    pub substituted: Vec<String>,
}

/// Builds the L x T x T character stack `I_g`: character i (1-based, first L
/// characters only) is rendered centered in channel i at intensity
/// `i * floor(P_M / L)` on the background value; channels past the label
/// length hold the pad value.
pub fn build_char_stack(
    label: &str,
    cfg: &CharStackConfig,
    font: &Font,
) -> Result<(Array3<f32>, CharStackMeta)> {
    cfg.validate()?;
    let clusters: Vec<&str> = label.graphemes(true).collect();
    if clusters.is_empty() {
        return Err(Error::EmptyInput("label has no characters".into()));
    }
    let l = clusters.len().min(cfg.max_chars);
    let mut meta = CharStackMeta {
        truncated: clusters.len() > cfg.max_chars,
        substituted: Vec::new(),
    };
    let (big_l, t) = (cfg.max_chars, cfg.tile);
    let mut stack = Array3::from_elem((big_l, t, t), cfg.pad_value as f32);
    for (idx, cluster) in clusters.iter().take(l).enumerate() {
        let (ink, known) = font.render_tile(cluster, t);
        if !known {
            meta.substituted.push((*cluster).to_string());
        }
        let fg = cfg.intensity(idx + 1);
        let bg = cfg.background_value as f32;
        for y in 0..t {
            for x in 0..t {
                stack[[idx, y, x]] = if ink[[y, x]] > 0.0 { fg } else { bg };
            }
        }
    }
    Ok((stack, meta))
}

/// Replaces every populated channel's foreground with a single flat value
/// (the char-position ablation). Background and pad values are preserved.
pub fn flatten_char_positions(stack: &Array3<f32>, cfg: &CharStackConfig, value: f32) -> Array3<f32> {
    let bg = cfg.background_value as f32;
    let pad = cfg.pad_value as f32;
    stack.mapv(|v| if v == bg || v == pad { v } else { value })
}

/// All-pad stack of the configured shape (the char-glyph ablation).
pub fn zero_char_stack(cfg: &CharStackConfig) -> Array3<f32> {
    Array3::from_elem(
        (cfg.max_chars, cfg.tile, cfg.tile),
        cfg.pad_value as f32,
    )
}

/// Builds the full conditioning bundle for one (image, quad, label) triple.
pub fn build_cond_pack(
    image: &ImageBuf,
    quad: &Quad,
    label: &str,
    source_ref: &str,
    cfg: &CondConfig,
    font: &Font,
) -> Result<CondPack> {
    let label = normalize_label(label, false);
    if label.is_empty() {
        return Err(Error::EmptyInput("label empty after trim".into()));
    }
    let extent = (image.height(), image.width());
    let crop = if cfg.region_centric {
        min_enclosing_square(quad, extent, &cfg.crop)?
    } else {
        whole_image_crop(extent, &cfg.crop)
    };
    let crop_image = crop_region(image, &crop, cfg.kernel);
    let mapped = map_quad(quad, &crop);
    let mask = build_mask(&mapped, cfg.crop.target_size)?;
    let masked_image = mask_apply(&crop_image, &mask)?;
    let (word_glyph, mut substituted) =
        render_word_glyph(&label, &mapped, cfg.crop.target_size, font);
    let (char_stack, meta) = build_char_stack(&label, &cfg.chars, font)?;
    substituted.extend(meta.substituted);
    substituted.dedup();
    Ok(CondPack {
        crop_image,
        mask,
        masked_image,
        word_glyph,
        char_stack,
        quad: mapped,
        label,
        source_ref: source_ref.to_string(),
        crop,
        truncated: meta.truncated,
        substituted,
    })
}

/// Square crop covering the whole image (the no-region-centric ablation).
pub fn whole_image_crop(extent: (usize, usize), cfg: &CropConfig) -> RegionCrop {
    let (h, w) = extent;
    let side = h.max(w) as f64;
    RegionCrop {
        origin: [(w as f64 - side) / 2.0, (h as f64 - side) / 2.0],
        side,
        target_size: cfg.target_size,
        pad: cfg.pad,
        pads_outside: h != w,
    }
}

/// Conditioning for one indexed instance of a scene.
pub fn assemble_cond_pack(
    scene: &SceneImage,
    index: usize,
    cfg: &CondConfig,
    font: &Font,
) -> Result<CondPack> {
    let inst = scene.instances.get(index).ok_or_else(|| {
        Error::Index(format!(
            "instance {index} of {}",
            scene.instances.len()
        ))
    })?;
    build_cond_pack(
        &scene.image,
        &inst.quad,
        &inst.label,
        &format!("inst{index}"),
        cfg,
        font,
    )
}

impl CondPack {
    /// Checks every structural invariant of the bundle. Used by tests and
    /// the acceptance suite.
    pub fn validate(&self, cfg: &CondConfig) -> Result<()> {
        let s = cfg.crop.target_size;
        if self.crop_image.height() != s || self.crop_image.width() != s {
            return Err(Error::Shape("crop image size".into()));
        }
        if self.mask.dim() != (s, s) {
            return Err(Error::Shape("mask size".into()));
        }
        if !self.mask.iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::Input("mask not binary".into()));
        }
        let remask = build_mask(&self.quad, s)?;
        if remask != self.mask {
            return Err(Error::Input("mask differs from quad rasterization".into()));
        }
        let remasked = mask_apply(&self.crop_image, &self.mask)?;
        if remasked.data != self.masked_image.data {
            return Err(Error::Input("masked image not bit-equal to mask*crop".into()));
        }
        let (big_l, t) = (cfg.chars.max_chars, cfg.chars.tile);
        if self.char_stack.dim() != (big_l, t, t) {
            return Err(Error::Shape("char stack shape".into()));
        }
        let l = self
            .label
            .graphemes(true)
            .count()
            .min(big_l);
        let bg = cfg.chars.background_value as f32;
        let pad = cfg.chars.pad_value as f32;
        for i in 0..big_l {
            let plane = self.char_stack.index_axis(ndarray::Axis(0), i);
            if i < l {
                let fg = cfg.chars.intensity(i + 1);
                if !plane.iter().all(|&v| v == bg || v == fg) {
                    return Err(Error::Input(format!("channel {i} values outside {{bg, fg}}")));
                }
            } else if !plane.iter().all(|&v| v == pad) {
                return Err(Error::Input(format!("pad channel {i} not constant")));
            }
        }
        Ok(())
    }
}
