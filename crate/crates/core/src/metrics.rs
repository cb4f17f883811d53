//! Recognizer interface, quality filtering, and the evaluation metrics:
//! exact-match sequence accuracy, normalized edit similarity, and the
//! Fréchet distance between embedded region sets.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;
use unicode_segmentation::UnicodeSegmentation;

use crate::error::{Error, Result};
use crate::geometry::Quad;
use crate::image::ImageBuf;
use crate::text::normalize_label;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognizerVerdict {
    pub text: String,
    pub confidence: f64,
}

/// A scene-text reader. Implementations must be safe for concurrent calls;
/// adapters that are not internally concurrent serialize with a lock.
pub trait Recognizer: Send + Sync {
    fn recognize(&self, region: &ImageBuf, quad: Option<&Quad>) -> Result<RecognizerVerdict>;
    /// Stable identifier recorded in manifests.
    fn id(&self) -> String;
}

/// Match policy for filtering; NFC + trim always apply.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchPolicy {
    pub case_fold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FilterDecision {
    Keep {
        verdict: RecognizerVerdict,
    },
    Discard {
        verdict: Option<RecognizerVerdict>,
        reason: String,
    },
}

impl FilterDecision {
    pub fn kept(&self) -> bool {
        matches!(self, FilterDecision::Keep { .. })
    }
}

/// Keeps a sample only when the recognized text matches the label exactly
/// after normalization. Recognizer failures discard (never keep).
pub fn filter_sample(
    region: &ImageBuf,
    label: &str,
    quad: Option<&Quad>,
    recognizer: &dyn Recognizer,
    policy: &MatchPolicy,
) -> FilterDecision {
    match recognizer.recognize(region, quad) {
        Ok(verdict) => {
            let got = normalize_label(&verdict.text, policy.case_fold);
            let want = normalize_label(label, policy.case_fold);
            if got == want {
                FilterDecision::Keep { verdict }
            } else {
                FilterDecision::Discard {
                    reason: format!("mismatch: recognized {:?}, wanted {:?}", got, want),
                    verdict: Some(verdict),
                }
            }
        }
        Err(e) => FilterDecision::Discard {
            verdict: None,
            reason: format!("recognizer error: {e}"),
        },
    }
}

/// Exact-match fraction over (prediction, label) pairs.
pub fn seq_acc(pairs: &[(String, String)], policy: &MatchPolicy) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("seq_acc over zero pairs".into()));
    }
    let hits = pairs
        .iter()
        .filter(|(p, l)| {
            normalize_label(p, policy.case_fold) == normalize_label(l, policy.case_fold)
        })
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Levenshtein distance over grapheme clusters.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let xs: Vec<&str> = a.graphemes(true).collect();
    let ys: Vec<&str> = b.graphemes(true).collect();
    if xs.is_empty() {
        return ys.len();
    }
    let mut prev: Vec<usize> = (0..=ys.len()).collect();
    let mut cur = vec![0usize; ys.len() + 1];
    for (i, x) in xs.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in ys.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[ys.len()]
}

/// Normalized edit similarity: `1 - lev / max(len)`; both empty is 1.
pub fn ned(pred: &str, label: &str) -> f64 {
    let lp = pred.graphemes(true).count();
    let ll = label.graphemes(true).count();
    let denom = lp.max(ll);
    if denom == 0 {
        return 1.0;
    }
    1.0 - levenshtein(pred, label) as f64 / denom as f64
}

/// Aggregate report over one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub seq_acc: f64,
    pub ned: f64,
    pub frechet: f64,
    pub n: usize,
}

/// Jacobi eigendecomposition of a symmetric matrix. Returns eigenvalues and
/// the orthogonal matrix of column eigenvectors.
fn sym_eig(m: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let d = m.nrows();
    let mut a = m.clone();
    let mut v = Array2::eye(d);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off += a[[i, j]] * a[[i, j]];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + a.diag().mapv(f64::abs).sum()) {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                if a[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    (a.diag().to_owned(), v)
}

/// Symmetric positive square root with negative eigenvalues clamped to zero.
fn sym_sqrt(m: &Array2<f64>) -> Array2<f64> {
    let (vals, vecs) = sym_eig(m);
    let sqrt_vals = vals.mapv(|v| v.max(0.0).sqrt());
    let mut scaled = vecs.clone();
    for (mut col, &sv) in scaled.columns_mut().into_iter().zip(sqrt_vals.iter()) {
        col *= sv;
    }
    scaled.dot(&vecs.t())
}

fn mean_rows(x: &Array2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).unwrap()
}

/// Sample covariance (n-1 denominator; zeros for a single row).
fn covariance(x: &Array2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    if n < 2 {
        return Array2::zeros((d, d));
    }
    let mu = mean_rows(x);
    let mut centered = x.clone();
    for mut row in centered.rows_mut() {
        row -= &mu;
    }
    centered.t().dot(&centered) / (n as f64 - 1.0)
}

const COV_SHRINKAGE: f64 = 1e-6;

/// Fréchet distance between Gaussian fits of two feature sets:
/// `|mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2})`. Falls back to diagonal
/// covariances when either set has at most D samples.
pub fn frechet_distance(features_a: &Array2<f64>, features_b: &Array2<f64>) -> Result<f64> {
    let (na, da) = features_a.dim();
    let (nb, db) = features_b.dim();
    if na == 0 || nb == 0 {
        return Err(Error::EmptyInput("feature set is empty".into()));
    }
    if da != db {
        return Err(Error::Shape(format!("feature dims differ: {da} vs {db}")));
    }
    if features_a.iter().chain(features_b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite feature values".into()));
    }
    let mu_a = mean_rows(features_a);
    let mu_b = mean_rows(features_b);
    let mean_term = (&mu_a - &mu_b).mapv(|v| v * v).sum();
    let d = da;
    let diagonal_fallback = na <= d || nb <= d;
    let trace_term = if diagonal_fallback {
        let var = |x: &Array2<f64>, mu: &Array1<f64>| -> Array1<f64> {
            let n = x.nrows();
            if n < 2 {
                return Array1::zeros(x.ncols());
            }
            let mut acc = Array1::zeros(x.ncols());
            for row in x.rows() {
                let diff = &row.to_owned() - mu;
                acc += &diff.mapv(|v| v * v);
            }
            acc / (n as f64 - 1.0)
        };
        let va = var(features_a, &mu_a);
        let vb = var(features_b, &mu_b);
        (0..d)
            .map(|i| va[i] + vb[i] - 2.0 * (va[i] * vb[i]).max(0.0).sqrt())
            .sum()
    } else {
        let mut sa = covariance(features_a);
        let mut sb = covariance(features_b);
        for i in 0..d {
            sa[[i, i]] += COV_SHRINKAGE;
            sb[[i, i]] += COV_SHRINKAGE;
        }
        let a_half = sym_sqrt(&sa);
        let inner = a_half.dot(&sb).dot(&a_half);
        let (vals, _) = sym_eig(&inner);
        let tr_sqrt: f64 = vals.iter().map(|&v| v.max(0.0).sqrt()).sum();
        sa.diag().sum() + sb.diag().sum() - 2.0 * tr_sqrt
    };
    Ok((mean_term + trace_term).max(0.0))
}

/// Feature extractor behind the region Fréchet metric.
pub trait Embedder: Send + Sync {
    fn embed(&self, region: &ImageBuf) -> Array1<f64>;
    fn dim(&self) -> usize;
}

/// Default embedder: 8x8 area-averaged grayscale, flattened, with the mean
/// and standard deviation appended (D = 66).
#[derive(Debug, Clone, Copy, Default)]
pub struct GrayPatchEmbedder;

impl Embedder for GrayPatchEmbedder {
    fn embed(&self, region: &ImageBuf) -> Array1<f64> {
        let gray = region.to_gray();
        let (h, w) = gray.dim();
        let mut out = Array1::zeros(66);
        for by in 0..8 {
            let y0 = by * h / 8;
            let y1 = ((by + 1) * h / 8).max(y0 + 1).min(h.max(1));
            for bx in 0..8 {
                let x0 = bx * w / 8;
                let x1 = ((bx + 1) * w / 8).max(x0 + 1).min(w.max(1));
                let mut acc = 0.0;
                let mut count = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += gray[[y, x]] as f64;
                        count += 1.0;
                    }
                }
                out[by * 8 + bx] = if count > 0.0 { acc / count } else { 0.0 };
            }
        }
        let cells = out.slice(ndarray::s![..64]).to_owned();
        let mean = cells.mean().unwrap();
        let var = cells.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
        out[64] = mean;
        out[65] = var.sqrt();
        out
    }

    fn dim(&self) -> usize {
        66
    }
}

/// Crops the quad's bounding box, resizes it to 64x64, and embeds it. The
/// crop-then-resize convention fixes the otherwise unspecified region
/// protocol for the Fréchet metric.
pub fn embed_region(region: &ImageBuf, quad: Option<&Quad>, embedder: &dyn Embedder) -> Array1<f64> {
    use crate::geometry::{crop_region, PadMode, RegionCrop, Resample};
    match quad {
        None => embedder.embed(region),
        Some(q) => {
            let (x0, y0, x1, y1) = q.bbox();
            let crop = RegionCrop {
                origin: [x0, y0],
                side: (x1 - x0).max(y1 - y0).max(1.0),
                target_size: 64,
                pad: PadMode::Replicate,
                pads_outside: false,
            };
            let patch = crop_region(region, &crop, Resample::Bilinear);
            embedder.embed(&patch)
        }
    }
}

#[derive(Debug, Serialize)]
struct ExternalRequest<'a> {
    image: String,
    quad: Option<[f64; 8]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label_hint: Option<&'a str>,
}

#[derive(Debug, Deserialize)]
struct ExternalResponse {
    text: String,
    confidence: f64,
}

/// Adapter speaking line-delimited JSON to a child process: one request
/// object per line on stdin, one `{text, confidence}` object per line on
/// stdout. Calls are serialized through a lock.
pub struct ExternalRecognizer {
    child: Mutex<(Child, BufReader<std::process::ChildStdout>)>,
    command: String,
}

impl ExternalRecognizer {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Recognizer(format!("spawn {program}: {e}")))?;
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| Error::Recognizer("no stdout".into()))?;
        Ok(Self {
            child: Mutex::new((child, BufReader::new(stdout))),
            command: program.to_string(),
        })
    }
}

impl Recognizer for ExternalRecognizer {
    fn recognize(&self, region: &ImageBuf, quad: Option<&Quad>) -> Result<RecognizerVerdict> {
        use base64::Engine;
        let dir = std::env::temp_dir().join(format!("tf-ext-{}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        let tmp = dir.join("region.png");
        region.save_png(&tmp)?;
        let bytes = std::fs::read(&tmp)?;
        let request = ExternalRequest {
            image: base64::engine::general_purpose::STANDARD.encode(bytes),
            quad: quad.map(|q| {
                let p = q.points;
                [
                    p[0][0], p[0][1], p[1][0], p[1][1], p[2][0], p[2][1], p[3][0], p[3][1],
                ]
            }),
            label_hint: None,
        };
        let line = serde_json::to_string(&request)
            .map_err(|e| Error::Recognizer(format!("encode: {e}")))?;
        let mut guard = self
            .child
            .lock()
            .map_err(|_| Error::Recognizer("adapter poisoned".into()))?;
        let (child, reader) = &mut *guard;
        let stdin = child
            .stdin
            .as_mut()
            .ok_or_else(|| Error::Recognizer("stdin closed".into()))?;
        writeln!(stdin, "{line}").map_err(|e| Error::Recognizer(format!("write: {e}")))?;
        stdin
            .flush()
            .map_err(|e| Error::Recognizer(format!("flush: {e}")))?;
        let mut response = String::new();
        reader
            .read_line(&mut response)
            .map_err(|e| Error::Recognizer(format!("read: {e}")))?;
        if response.trim().is_empty() {
            return Err(Error::Recognizer("empty response".into()));
        }
        let parsed: ExternalResponse = serde_json::from_str(response.trim())
            .map_err(|e| Error::Recognizer(format!("decode {response:?}: {e}")))?;
        Ok(RecognizerVerdict {
            text: parsed.text,
            confidence: parsed.confidence,
        })
    }

    fn id(&self) -> String {
        format!("external:{}", self.command)
    }
}

impl Drop for ExternalRecognizer {
    fn drop(&mut self) {
        if let Ok(mut guard) = self.child.lock() {
            let _ = guard.0.kill();
            let _ = guard.0.wait();
        }
    }
}
