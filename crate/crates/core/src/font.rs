//! Vector stroke font: glyph outlines as polylines, loaded from a JSON
//! stroke-font file. A built-in face covering printable ASCII is embedded;
//! additional faces can be loaded from a configured path.
//!
//! Glyph coordinates are in font units with y running downward from the
//! ascender line (0) past the baseline (8) to the descender (10 = em).

use ndarray::Array2;
use serde::Deserialize;
use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;
use unicode_segmentation::UnicodeSegmentation;

use crate::error::{Error, Result};

const BUILTIN_JSON: &str = include_str!("../assets/builtin_font.json");

#[derive(Debug, Deserialize)]
struct FontFile {
    name: String,
    units_per_em: f64,
    advance: f64,
    glyphs: HashMap<String, Vec<Vec<[f64; 2]>>>,
}

/// A loaded stroke font.
#[derive(Debug, Clone)]
pub struct Font {
    pub name: String,
    units_per_em: f64,
    advance: f64,
    glyphs: HashMap<String, Vec<Vec<[f64; 2]>>>,
}

/// Result of typesetting a label on the unit rectangle.
#[derive(Debug, Clone)]
pub struct Layout {
    /// Polylines in unit-rectangle coordinates, x and y in [0, 1].
    pub strokes: Vec<Vec<[f64; 2]>>,
    /// Grapheme clusters that had no glyph and were replaced by the
    /// substitution box.
    pub substituted: Vec<String>,
    /// Stroke half-width in unit-rectangle y units.
    pub stroke_half_width: f64,
}

impl Font {
    /// The embedded face. Covers printable ASCII.
    pub fn builtin() -> &'static Font {
        static FONT: OnceLock<Font> = OnceLock::new();
        FONT.get_or_init(|| {
            Font::parse(BUILTIN_JSON).expect("embedded font data is valid")
        })
    }

    pub fn from_file(path: &Path) -> Result<Font> {
        let text = std::fs::read_to_string(path)?;
        Font::parse(&text)
            .map_err(|e| Error::Config(format!("font {}: {e}", path.display())))
    }

    /// Resolves a font reference: `"builtin"` or a file path.
    pub fn resolve(font_ref: &str) -> Result<Font> {
        if font_ref == "builtin" {
            Ok(Font::builtin().clone())
        } else {
            Font::from_file(Path::new(font_ref))
        }
    }

    fn parse(text: &str) -> Result<Font> {
        let file: FontFile = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("stroke font parse: {e}")))?;
        if file.units_per_em <= 0.0 || file.advance <= 0.0 {
            return Err(Error::Config("font metrics must be positive".into()));
        }
        if file.glyphs.is_empty() {
            return Err(Error::Config("font has no glyphs".into()));
        }
        Ok(Font {
            name: file.name,
            units_per_em: file.units_per_em,
            advance: file.advance,
            glyphs: file.glyphs,
        })
    }

    pub fn has_glyph(&self, cluster: &str) -> bool {
        self.glyphs.contains_key(cluster)
    }

    /// Raw stroke polylines of one glyph, in font units.
    pub fn strokes(&self, cluster: &str) -> Option<&Vec<Vec<[f64; 2]>>> {
        self.glyphs.get(cluster)
    }

    pub fn units_per_em(&self) -> f64 {
        self.units_per_em
    }

    /// Substitution box for unrenderable clusters.
    fn tofu() -> Vec<Vec<[f64; 2]>> {
        vec![vec![[0.5, 1.0], [3.5, 1.0], [3.5, 7.0], [0.5, 7.0], [0.5, 1.0]]]
    }

    /// Typesets `label` on the unit rectangle: glyphs advance left to right,
    /// the full run is scaled to x in [0, 1], the em to y in [0, 1].
    pub fn layout_label(&self, label: &str) -> Layout {
        let clusters: Vec<&str> = label.graphemes(true).collect();
        let n = clusters.len().max(1);
        // Right side bearing of 2 units is dropped from the run width.
        let total_w = (n as f64 - 1.0) * self.advance + (self.advance - 2.0);
        let mut strokes = Vec::new();
        let mut substituted = Vec::new();
        for (k, cluster) in clusters.iter().enumerate() {
            let pen = k as f64 * self.advance;
            let glyph = match self.glyphs.get(*cluster) {
                Some(g) => g.clone(),
                None => {
                    substituted.push((*cluster).to_string());
                    Self::tofu()
                }
            };
            for poly in glyph {
                strokes.push(
                    poly.iter()
                        .map(|p| [(p[0] + pen) / total_w, p[1] / self.units_per_em])
                        .collect(),
                );
            }
        }
        Layout {
            strokes,
            substituted,
            // 1.2 font units of stroke thickness.
            stroke_half_width: 0.6 / self.units_per_em,
        }
    }

    /// Renders one cluster into a `tile x tile` ink map, glyph centered and
    /// scaled to 80% of the tile height. Binary coverage.
    pub fn render_tile(&self, cluster: &str, tile: usize) -> (Array2<f32>, bool) {
        let (glyph, known) = match self.glyphs.get(cluster) {
            Some(g) => (g.clone(), true),
            None => (Self::tofu(), false),
        };
        let scale = 0.8 * tile as f64 / self.units_per_em;
        let glyph_w = glyph
            .iter()
            .flatten()
            .map(|p| p[0])
            .fold(0.0f64, f64::max)
            .max(1.0);
        let off_x = (tile as f64 - glyph_w * scale) / 2.0;
        let off_y = 0.1 * tile as f64;
        let mut ink = Array2::zeros((tile, tile));
        let hw = 0.6 * scale;
        for poly in &glyph {
            let mapped: Vec<[f64; 2]> = poly
                .iter()
                .map(|p| [p[0] * scale + off_x, p[1] * scale + off_y])
                .collect();
            rasterize_polyline(&mut ink, &mapped, hw.max(0.5), false);
        }
        (ink, known)
    }
}

fn dist_to_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let px = a[0] + t * dx - p[0];
    let py = a[1] + t * dy - p[1];
    (px * px + py * py).sqrt()
}

/// Draws a thick polyline into an ink map (1 = full ink). Coordinates are
/// corner-based pixels. `antialias` blends a one-pixel soft edge; otherwise
/// coverage is binary, which keeps single-valued rasters single-valued.
pub fn rasterize_polyline(
    ink: &mut Array2<f32>,
    points: &[[f64; 2]],
    half_width: f64,
    antialias: bool,
) {
    let (h, w) = ink.dim();
    for seg in points.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let pad = half_width + 1.0;
        let x0 = (a[0].min(b[0]) - pad).floor().max(0.0) as usize;
        let x1 = ((a[0].max(b[0]) + pad).ceil() as usize).min(w.saturating_sub(1));
        let y0 = (a[1].min(b[1]) - pad).floor().max(0.0) as usize;
        let y1 = ((a[1].max(b[1]) + pad).ceil() as usize).min(h.saturating_sub(1));
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0..=y1 {
            for x in x0..=x1 {
                let c = [x as f64 + 0.5, y as f64 + 0.5];
                let d = dist_to_segment(c, a, b);
                let cov = if antialias {
                    (half_width + 0.5 - d).clamp(0.0, 1.0) as f32
                } else if d <= half_width {
                    1.0
                } else {
                    0.0
                };
                if cov > ink[[y, x]] {
                    ink[[y, x]] = cov;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_covers_printable_ascii() {
        let font = Font::builtin();
        for code in 0x20u8..=0x7e {
            let s = (code as char).to_string();
            assert!(font.has_glyph(&s), "missing glyph {:?}", s);
        }
    }

    #[test]
    fn unknown_cluster_substitutes_and_warns() {
        let layout = Font::builtin().layout_label("a\u{4e2d}b");
        assert_eq!(layout.substituted, vec!["\u{4e2d}".to_string()]);
        assert!(!layout.strokes.is_empty());
    }

    #[test]
    fn layout_spans_unit_rectangle() {
        let layout = Font::builtin().layout_label("HH");
        let xs: Vec<f64> = layout.strokes.iter().flatten().map(|p| p[0]).collect();
        let ys: Vec<f64> = layout.strokes.iter().flatten().map(|p| p[1]).collect();
        let max_x = xs.iter().cloned().fold(0.0, f64::max);
        let max_y = ys.iter().cloned().fold(0.0, f64::max);
        assert!(xs.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!((max_x - 1.0).abs() < 1e-9, "run should fill width, got {max_x}");
        assert!(max_y <= 1.0 + 1e-9);
    }

    #[test]
    fn tile_render_is_binary_and_centered() {
        let (ink, known) = Font::builtin().render_tile("o", 64);
        assert!(known);
        assert!(ink.iter().all(|&v| v == 0.0 || v == 1.0));
        let on: Vec<(usize, usize)> = ink
            .indexed_iter()
            .filter(|(_, &v)| v > 0.0)
            .map(|((y, x), _)| (y, x))
            .collect();
        assert!(!on.is_empty());
        let cy = on.iter().map(|p| p.0 as f64).sum::<f64>() / on.len() as f64;
        let cx = on.iter().map(|p| p.1 as f64).sum::<f64>() / on.len() as f64;
        assert!((cx - 32.0).abs() < 3.0, "cx={cx}");
        assert!((cy - 32.0).abs() < 6.0, "cy={cy}");
    }

    #[test]
    fn file_round_trip_matches_builtin() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("face.json");
        std::fs::write(&path, BUILTIN_JSON).unwrap();
        let font = Font::from_file(&path).unwrap();
        assert_eq!(font.name, Font::builtin().name);
        assert!(font.has_glyph("a"));
    }

    #[test]
    fn malformed_font_file_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{\"name\": 3}").unwrap();
        assert!(matches!(
            Font::from_file(&path),
            Err(Error::Config(_))
        ));
    }
}
