//! Procedural scene-text corpus and the exact template-matching oracle
//! recognizer. Words are stamped from a small set of glyph bitmap templates
//! onto flat, gradient, or noise backgrounds, so the oracle's templates and
//! the rendered glyphs coincide and clean corpora read back exactly.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::font::{rasterize_polyline, Font};
use crate::geometry::{Instance, Quad, SceneImage};
use crate::image::ImageBuf;
use crate::metrics::{Recognizer, RecognizerVerdict};
use crate::seeds::derive_seed;

/// Template grid: glyphs render at 16 px height on a 10 px advance.
pub const TEMPLATE_H: usize = 16;
pub const TEMPLATE_W: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BgFamily {
    Flat,
    Gradient,
    NoiseTexture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    /// Characters whose templates form the alphabet; bitmaps must be
    /// pairwise distinct.
    pub alphabet: String,
    /// Words per image, drawn uniformly from 1..=max_words.
    pub max_words: usize,
    pub word_len: (usize, usize),
    pub backgrounds: Vec<BgFamily>,
    /// Placement randomness in [0, 1]; 0 centers words, 1 is fully random.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_images: 16,
            height: 128,
            width: 128,
            alphabet: "acehknostuxz".into(),
            max_words: 4,
            word_len: (1, 8),
            backgrounds: vec![BgFamily::Flat, BgFamily::Gradient, BgFamily::NoiseTexture],
            jitter: 1.0,
            seed: 0,
        }
    }
}

/// Glyph bitmap templates shared by the corpus renderer and the oracle.
#[derive(Debug, Clone)]
pub struct ToyAlphabet {
    pub chars: Vec<char>,
    pub templates: Vec<Array2<f32>>,
}

impl ToyAlphabet {
    pub fn from_font(alphabet: &str, font: &Font) -> Result<Self> {
        let chars: Vec<char> = alphabet.chars().collect();
        if chars.is_empty() {
            return Err(Error::Config("alphabet is empty".into()));
        }
        let scale = TEMPLATE_H as f64 / font.units_per_em();
        let mut templates = Vec::with_capacity(chars.len());
        for &c in &chars {
            let strokes = font
                .strokes(&c.to_string())
                .ok_or_else(|| Error::Config(format!("alphabet char {c:?} has no glyph")))?;
            let mut ink = Array2::zeros((TEMPLATE_H, TEMPLATE_W));
            for poly in strokes {
                let mapped: Vec<[f64; 2]> = poly
                    .iter()
                    .map(|p| [p[0] * scale + 1.5, p[1] * scale])
                    .collect();
                rasterize_polyline(&mut ink, &mapped, 0.6 * scale, false);
            }
            templates.push(ink);
        }
        for i in 0..templates.len() {
            for j in (i + 1)..templates.len() {
                if templates[i] == templates[j] {
                    return Err(Error::Config(format!(
                        "alphabet templates {:?} and {:?} are identical bitmaps",
                        chars[i], chars[j]
                    )));
                }
            }
        }
        Ok(Self { chars, templates })
    }
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub scenes: Vec<SceneImage>,
    pub warnings: Vec<String>,
}

fn paint_background(img: &mut ImageBuf, family: BgFamily, rng: &mut ChaCha8Rng) {
    let (h, w) = (img.height(), img.width());
    match family {
        BgFamily::Flat => {
            let color = [0, 1, 2].map(|_| rng.gen_range(0.6..0.95f32));
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        img.data[[y, x, c]] = color[c];
                    }
                }
            }
        }
        BgFamily::Gradient => {
            let a = [0, 1, 2].map(|_| rng.gen_range(0.55..0.95f32));
            let b = [0, 1, 2].map(|_| rng.gen_range(0.55..0.95f32));
            let horizontal = rng.gen_bool(0.5);
            for y in 0..h {
                for x in 0..w {
                    let t = if horizontal {
                        x as f32 / w.max(1) as f32
                    } else {
                        y as f32 / h.max(1) as f32
                    };
                    for c in 0..3 {
                        img.data[[y, x, c]] = a[c] * (1.0 - t) + b[c] * t;
                    }
                }
            }
        }
        BgFamily::NoiseTexture => {
            // Low-frequency value noise: a coarse random lattice upsampled
            // bilinearly, on a light base color.
            let base = [0, 1, 2].map(|_| rng.gen_range(0.65..0.9f32));
            let cell = 16usize;
            let gh = h / cell + 2;
            let gw = w / cell + 2;
            let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.gen_range(-0.08..0.08)).collect();
            for y in 0..h {
                for x in 0..w {
                    let fy = y as f32 / cell as f32;
                    let fx = x as f32 / cell as f32;
                    let (iy, ix) = (fy as usize, fx as usize);
                    let (ty, tx) = (fy - iy as f32, fx - ix as f32);
                    let at = |r: usize, c: usize| lattice[r * gw + c];
                    let n = at(iy, ix) * (1.0 - ty) * (1.0 - tx)
                        + at(iy, ix + 1) * (1.0 - ty) * tx
                        + at(iy + 1, ix) * ty * (1.0 - tx)
                        + at(iy + 1, ix + 1) * ty * tx;
                    for c in 0..3 {
                        img.data[[y, x, c]] = (base[c] + n).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
}

fn stamp_word(
    img: &mut ImageBuf,
    alphabet: &ToyAlphabet,
    word: &[usize],
    x0: usize,
    y0: usize,
    fg: [f32; 3],
) {
    for (k, &ci) in word.iter().enumerate() {
        let template = &alphabet.templates[ci];
        let gx = x0 + k * TEMPLATE_W;
        for ty in 0..TEMPLATE_H {
            for tx in 0..TEMPLATE_W {
                if template[[ty, tx]] > 0.5 {
                    for c in 0..3 {
                        img.data[[y0 + ty, gx + tx, c]] = fg[c];
                    }
                }
            }
        }
    }
}

/// Generates a corpus: pure function of the spec. Words that cannot be
/// placed without overlap after 100 retries are skipped with a warning.
pub fn generate_corpus(spec: &CorpusSpec, font: &Font) -> Result<ToyCorpus> {
    if spec.word_len.0 == 0 || spec.word_len.0 > spec.word_len.1 {
        return Err(Error::Config("word_len range is invalid".into()));
    }
    if spec.max_words == 0 || spec.backgrounds.is_empty() {
        return Err(Error::Config("need at least one word and background".into()));
    }
    let alphabet = ToyAlphabet::from_font(&spec.alphabet, font)?;
    let mut scenes = Vec::with_capacity(spec.n_images);
    let mut warnings = Vec::new();
    for i in 0..spec.n_images {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("img{i}")));
        let mut img = ImageBuf::splat(spec.height, spec.width, 0.0);
        let family = spec.backgrounds[rng.gen_range(0..spec.backgrounds.len())];
        paint_background(&mut img, family, &mut rng);
        let n_words = rng.gen_range(1..=spec.max_words);
        let mut placed: Vec<(usize, usize, usize, usize)> = Vec::new();
        let mut instances = Vec::new();
        'words: for wi in 0..n_words {
            let len = rng.gen_range(spec.word_len.0..=spec.word_len.1);
            let word: Vec<usize> = (0..len)
                .map(|_| rng.gen_range(0..alphabet.chars.len()))
                .collect();
            let ww = len * TEMPLATE_W;
            let wh = TEMPLATE_H;
            if ww + 4 >= spec.width || wh + 4 >= spec.height {
                warnings.push(format!("image {i} word {wi}: too wide for the image"));
                continue;
            }
            let max_x = spec.width - ww - 2;
            let max_y = spec.height - wh - 2;
            let (cx, cy) = (max_x / 2, max_y / 2);
            let mut position = None;
            for _try in 0..100 {
                let (x0, y0) = if spec.jitter <= 0.0 {
                    (cx, cy)
                } else {
                    let jx = (rng.gen_range(-1.0..1.0) * spec.jitter * cx as f64) as isize;
                    let jy = (rng.gen_range(-1.0..1.0) * spec.jitter * cy as f64) as isize;
                    (
                        (cx as isize + jx).clamp(2, max_x as isize) as usize,
                        (cy as isize + jy).clamp(2, max_y as isize) as usize,
                    )
                };
                let rect = (x0, y0, x0 + ww, y0 + wh);
                let pad = 4usize;
                let clash = placed.iter().any(|&(a, b, c, d)| {
                    rect.0 < c + pad && a < rect.2 + pad && rect.1 < d + pad && b < rect.3 + pad
                });
                if !clash {
                    position = Some((x0, y0));
                    break;
                }
            }
            let Some((x0, y0)) = position else {
                warnings.push(format!("image {i} word {wi}: no free placement"));
                continue 'words;
            };
            let fg = [0, 1, 2].map(|_| rng.gen_range(0.0..0.25f32));
            stamp_word(&mut img, &alphabet, &word, x0, y0, fg);
            placed.push((x0, y0, x0 + ww, y0 + wh));
            let label: String = word.iter().map(|&ci| alphabet.chars[ci]).collect();
            instances.push(Instance {
                quad: Quad::rect(
                    x0 as f64,
                    y0 as f64,
                    (x0 + ww) as f64,
                    (y0 + wh) as f64,
                ),
                label,
            });
        }
        scenes.push(SceneImage::new(img, instances)?);
    }
    Ok(ToyCorpus { scenes, warnings })
}

/// One annotation file line: an image path plus its labelled quads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image: String,
    pub instances: Vec<AnnotationInstance>,
    #[serde(default = "default_split")]
    pub split: String,
}

fn default_split() -> String {
    "train".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationInstance {
    /// x1,y1,x2,y2,x3,y3,x4,y4 in reading order.
    pub quad: [f64; 8],
    pub text: String,
}

impl AnnotationInstance {
    pub fn to_quad(&self) -> Quad {
        let q = self.quad;
        Quad::new([[q[0], q[1]], [q[2], q[3]], [q[4], q[5]], [q[6], q[7]]])
    }

    pub fn from_quad(quad: &Quad, text: &str) -> Self {
        let p = quad.points;
        Self {
            quad: [
                p[0][0], p[0][1], p[1][0], p[1][1], p[2][0], p[2][1], p[3][0], p[3][1],
            ],
            text: text.to_string(),
        }
    }
}

impl ToyCorpus {
    /// Writes scene PNGs plus a line-delimited annotation file; returns the
    /// annotation path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let images = dir.join("images");
        std::fs::create_dir_all(&images)?;
        let mut lines = String::new();
        for (i, scene) in self.scenes.iter().enumerate() {
            let rel = format!("images/scene_{i:04}.png");
            scene.image.save_png(&dir.join(&rel))?;
            let record = AnnotationRecord {
                image: rel,
                instances: scene
                    .instances
                    .iter()
                    .map(|inst| AnnotationInstance::from_quad(&inst.quad, &inst.label))
                    .collect(),
                split: "train".into(),
            };
            lines.push_str(&serde_json::to_string(&record).expect("serializable"));
            lines.push('\n');
        }
        let path = dir.join("annotations.jsonl");
        std::fs::write(&path, lines)?;
        Ok(path)
    }
}

/// Parses a line-delimited annotation file. Malformed lines are rejected
/// with their line numbers; an entirely invalid file is an error.
pub fn ingest_annotations(path: &Path) -> Result<(Vec<AnnotationRecord>, Vec<String>)> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    let mut diagnostics = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: std::result::Result<AnnotationRecord, _> = serde_json::from_str(line);
        match parsed {
            Err(e) => diagnostics.push(format!("line {}: {e}", ln + 1)),
            Ok(rec) => {
                let mut ok = true;
                for (k, inst) in rec.instances.iter().enumerate() {
                    if inst.text.trim().is_empty() {
                        diagnostics.push(format!("line {}: instance {k} has empty text", ln + 1));
                        ok = false;
                    }
                    if inst.quad.iter().any(|v| !v.is_finite()) {
                        diagnostics
                            .push(format!("line {}: instance {k} has non-finite quad", ln + 1));
                        ok = false;
                    } else if inst.to_quad().area() <= 0.0 {
                        diagnostics
                            .push(format!("line {}: instance {k} quad area not positive", ln + 1));
                        ok = false;
                    }
                }
                if ok {
                    records.push(rec);
                }
            }
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no valid records in {} ({} rejected)",
            path.display(),
            diagnostics.len()
        )));
    }
    Ok((records, diagnostics))
}

/// Loads scene images referenced by annotation records, resolving relative
/// paths against the annotation file's directory.
pub fn load_scenes(records: &[AnnotationRecord], base: &Path) -> Result<Vec<SceneImage>> {
    records
        .iter()
        .map(|rec| {
            let path = base.join(&rec.image);
            let image = ImageBuf::load_png(&path)?;
            let instances = rec
                .instances
                .iter()
                .map(|inst| Instance {
                    quad: inst.to_quad(),
                    label: inst.text.clone(),
                })
                .collect();
            SceneImage::new(image, instances)
        })
        .collect()
}

/// Exact template matcher: rectifies the quad to a height-16 strip and reads
/// glyphs greedily left to right by zero-mean correlation.
pub struct OracleRecognizer {
    alphabet: ToyAlphabet,
    pub threshold: f64,
}

impl OracleRecognizer {
    pub fn new(alphabet: ToyAlphabet) -> Self {
        Self {
            alphabet,
            threshold: 0.6,
        }
    }

    pub fn from_font(alphabet: &str, font: &Font) -> Result<Self> {
        Ok(Self::new(ToyAlphabet::from_font(alphabet, font)?))
    }

    /// Zero-mean correlation of the darkness window at `x0` with a template.
    fn ncc(strip: &Array2<f32>, x0: usize, template: &Array2<f32>) -> f64 {
        let (h, tw) = template.dim();
        let n = (h * tw) as f64;
        let mut sw = 0.0;
        let mut st = 0.0;
        for y in 0..h {
            for x in 0..tw {
                sw += strip[[y, x0 + x]] as f64;
                st += template[[y, x]] as f64;
            }
        }
        let mw = sw / n;
        let mt = st / n;
        let mut num = 0.0;
        let mut dw = 0.0;
        let mut dt = 0.0;
        for y in 0..h {
            for x in 0..tw {
                let a = strip[[y, x0 + x]] as f64 - mw;
                let b = template[[y, x]] as f64 - mt;
                num += a * b;
                dw += a * a;
                dt += b * b;
            }
        }
        if dw < 1e-9 || dt < 1e-9 {
            return 0.0;
        }
        num / (dw * dt).sqrt()
    }

    fn read_strip(&self, strip: &Array2<f32>) -> RecognizerVerdict {
        let (_, w) = strip.dim();
        let mut x = 0usize;
        let mut text = String::new();
        let mut scores = Vec::new();
        let mut seeking = true;
        while x + TEMPLATE_W <= w {
            let mut best: Option<(usize, f64, usize)> = None;
            let jitter_max = if seeking { 3 } else { 2 };
            for dx in 0..=jitter_max {
                if x + dx + TEMPLATE_W > w {
                    break;
                }
                for (ci, template) in self.alphabet.templates.iter().enumerate() {
                    let s = Self::ncc(strip, x + dx, template);
                    if best.map_or(true, |(_, bs, _)| s > bs) {
                        best = Some((ci, s, dx));
                    }
                }
            }
            match best {
                Some((ci, s, dx)) if s >= self.threshold => {
                    text.push(self.alphabet.chars[ci]);
                    scores.push(s);
                    x += dx + TEMPLATE_W;
                    seeking = false;
                }
                _ if seeking && x < 4 => x += 1,
                _ => break,
            }
        }
        let confidence = if scores.is_empty() {
            0.0
        } else {
            scores.iter().sum::<f64>() / scores.len() as f64
        };
        RecognizerVerdict { text, confidence }
    }
}

/// Bilinear resize of a gray map to the given shape.
fn resize_gray(src: &Array2<f32>, oh: usize, ow: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let sy = ((y as f64 + 0.5) * h as f64 / oh as f64 - 0.5)
            .clamp(0.0, (h - 1) as f64);
        let sx = ((x as f64 + 0.5) * w as f64 / ow as f64 - 0.5)
            .clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
        src[[y0, x0]] * (1.0 - fy) * (1.0 - fx)
            + src[[y0, x1]] * (1.0 - fy) * fx
            + src[[y1, x0]] * fy * (1.0 - fx)
            + src[[y1, x1]] * fy * fx
    })
}

impl Recognizer for OracleRecognizer {
    fn recognize(&self, region: &ImageBuf, quad: Option<&Quad>) -> Result<RecognizerVerdict> {
        let gray = region.to_gray();
        let (h, w) = gray.dim();
        let (x0, y0, x1, y1) = match quad {
            Some(q) => {
                let (a, b, c, d) = q.bbox();
                (
                    a.max(0.0) as usize,
                    b.max(0.0) as usize,
                    (c.ceil() as usize).min(w),
                    (d.ceil() as usize).min(h),
                )
            }
            None => (0, 0, w, h),
        };
        if x1 <= x0 + 1 || y1 <= y0 + 1 {
            return Ok(RecognizerVerdict {
                text: String::new(),
                confidence: 0.0,
            });
        }
        // Darkness strip normalized to template height.
        let box_h = y1 - y0;
        let box_w = x1 - x0;
        let crop = Array2::from_shape_fn((box_h, box_w), |(y, x)| {
            1.0 - gray[[y0 + y, x0 + x]]
        });
        let ow = ((box_w as f64 * TEMPLATE_H as f64 / box_h as f64).round() as usize).max(1);
        let strip = resize_gray(&crop, TEMPLATE_H, ow);
        Ok(self.read_strip(&strip))
    }

    fn id(&self) -> String {
        format!("oracle:{}", self.alphabet.chars.iter().collect::<String>())
    }
}
