//! Noise schedule, conditioning assembly, the glyph-conditioned denoiser,
//! its training loop, and the deterministic sampler.
//!
//! The denoiser concatenates the downsampled mask, the noised latent, the
//! masked-crop latent, and the word-glyph latent, merges them to C channels
//! with one convolution, adds a sinusoidal timestep embedding, runs residual
//! conv blocks, and injects the character-stack features through a single
//! cross-attention block. The glyph encoder trains jointly with the rest.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::CondPack;
use crate::error::{Error, Result};
use crate::glyph_encoder::{GlyphEncoder, GlyphEncoderCache, GlyphEncoderConfig};
use crate::image::{ImageBuf, Mask};
use crate::latent_codec::{mse, LatentCodec, LatentGrid};
use crate::nn::attention::AttentionCache;
use crate::nn::layers::{silu, silu_backward, LayerNorm, LayerNormCache};
use crate::nn::{Adam, Conv2d, GradBuf, Linear, MultiHeadAttention, ParamStore};

/// Linear-beta forward-noising schedule with cached cumulative products.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::Index(format!("timestep {t} of {}", self.len())))
    }

    /// Unvalidated constructor for synthetic schedules in tests.
    pub fn from_parts(betas: Vec<f64>, alphas_bar: Vec<f64>) -> Self {
        Self { betas, alphas_bar }
    }
}

/// Linear betas from `beta_start` to `beta_end` over `t_train` steps.
pub fn make_schedule(t_train: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_train == 0 {
        return Err(Error::Config("t_train must be positive".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let betas: Vec<f64> = (0..t_train)
        .map(|i| {
            if t_train == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_train - 1) as f64
            }
        })
        .collect();
    let mut alphas_bar = Vec::with_capacity(t_train);
    let mut prod = 1.0;
    for b in &betas {
        prod *= 1.0 - b;
        alphas_bar.push(prod);
    }
    Ok(NoiseSchedule { betas, alphas_bar })
}

/// Forward noising: `z_t = sqrt(a) z_s + sqrt(1-a) eps` at `a = alpha_bar(t)`.
pub fn add_noise(
    z_s: &LatentGrid,
    t: usize,
    eps: &LatentGrid,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    if eps.dim() != z_s.dim() {
        return Err(Error::Shape(format!(
            "eps {:?} does not match signal {:?}",
            eps.dim(),
            z_s.dim()
        )));
    }
    let a = schedule.alpha_bar(t)?;
    Ok(z_s * a.sqrt() + eps * (1.0 - a).sqrt())
}

/// Area-average pooling of the mask down to the latent grid, `(1, S/f, S/f)`.
pub fn downsample_mask(mask: &Mask, factor: usize) -> Result<Array3<f64>> {
    let (h, w) = mask.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!(
            "mask {h}x{w} not divisible by factor {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Array3::zeros((1, oh, ow));
    let norm = (factor * factor) as f64;
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    s += mask[[y * factor + dy, x * factor + dx]] as f64;
                }
            }
            out[[0, y, x]] = s / norm;
        }
    }
    Ok(out)
}

/// Latent-space inputs for one denoising step.
#[derive(Debug, Clone)]
pub struct DiffusionBundle {
    /// Z_M, `(1, ls, ls)`.
    pub mask_lat: Array3<f64>,
    /// Z_m.
    pub masked_lat: LatentGrid,
    /// Z_G.
    pub glyph_lat: LatentGrid,
    /// z_t.
    pub noised: LatentGrid,
    pub t: usize,
    /// The drawn noise.
    pub eps: LatentGrid,
    /// I_g in raw values; the denoiser computes F_g from it.
    pub char_stack: Array3<f32>,
}

impl DiffusionBundle {
    pub fn validate(&self, c: usize, side: usize) -> Result<()> {
        let want = (c, side, side);
        for (name, grid) in [
            ("masked_lat", &self.masked_lat),
            ("glyph_lat", &self.glyph_lat),
            ("noised", &self.noised),
            ("eps", &self.eps),
        ] {
            if grid.dim() != want {
                return Err(Error::Shape(format!(
                    "{name} is {:?}, expected {want:?}",
                    grid.dim()
                )));
            }
        }
        if self.mask_lat.dim() != (1, side, side) {
            return Err(Error::Shape(format!(
                "mask_lat is {:?}, expected (1, {side}, {side})",
                self.mask_lat.dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Latent channels C; the merge convolution reads 3C+1 channels.
    pub latent_channels: usize,
    /// Latent grid side S/f.
    pub latent_side: usize,
    /// Backbone width.
    pub width: usize,
    pub blocks_pre: usize,
    pub blocks_post: usize,
    /// Sinusoidal timestep embedding width.
    pub t_embed_dim: usize,
    pub attn_inner: usize,
    pub attn_heads: usize,
    pub encoder: GlyphEncoderConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_side: 16,
            width: 48,
            blocks_pre: 1,
            blocks_post: 1,
            t_embed_dim: 64,
            attn_inner: 64,
            attn_heads: 4,
            encoder: GlyphEncoderConfig::default(),
        }
    }
}

impl DenoiserConfig {
    pub fn merge_in_channels(&self) -> usize {
        3 * self.latent_channels + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.width == 0 || self.latent_side == 0 {
            return Err(Error::Config("denoiser dims must be positive".into()));
        }
        if self.attn_inner % self.attn_heads != 0 {
            return Err(Error::Config("attn_inner must divide into heads".into()));
        }
        self.encoder.validate()
    }
}

struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

struct ResCache {
    x: Array3<f64>,
    h1: Array3<f64>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), width, width, 3, 1, 1, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), width, width, 3, 1, 1, rng),
        }
    }

    fn forward(&self, store: &ParamStore, x: &Array3<f64>) -> (Array3<f64>, ResCache) {
        let a1 = silu(x);
        let h1 = self.conv1.forward(store, &a1);
        let a2 = silu(&h1);
        let h2 = self.conv2.forward(store, &a2);
        let out = x + &h2;
        (out, ResCache { x: x.clone(), h1 })
    }

    fn backward(
        &self,
        store: &ParamStore,
        cache: &ResCache,
        gout: &Array3<f64>,
        grads: &mut GradBuf,
    ) -> Array3<f64> {
        let a2 = silu(&cache.h1);
        let d_a2 = self.conv2.backward(store, &a2, gout, grads);
        let d_h1 = silu_backward(&cache.h1, &d_a2);
        let a1 = silu(&cache.x);
        let d_a1 = self.conv1.backward(store, &a1, &d_h1, grads);
        gout + &silu_backward(&cache.x, &d_a1)
    }
}

/// The glyph-conditioned noise predictor.
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub encoder: GlyphEncoder,
    merge: Conv2d,
    t_proj: Linear,
    conv_in: Conv2d,
    pre: Vec<ResBlock>,
    attn_norm: LayerNorm,
    attn: MultiHeadAttention,
    post: Vec<ResBlock>,
    conv_out: Conv2d,
}

pub struct DenoiserCache {
    concat_in: Array3<f64>,
    t_emb: Array1<f64>,
    x_in: Array3<f64>,
    conv_in_out: Array3<f64>,
    pre: Vec<ResCache>,
    tokens: Array2<f64>,
    ln: LayerNormCache,
    attn: AttentionCache,
    enc: GlyphEncoderCache,
    attn_out_map: Array3<f64>,
    post_in: Array3<f64>,
    post: Vec<ResCache>,
    conv_out_in: Array3<f64>,
}

/// Classic sinusoidal embedding of a discrete timestep.
pub fn timestep_embedding(t: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut emb = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10_000.0f64.ln()) * i as f64 / (half.max(2) - 1) as f64).exp();
        let angle = t as f64 * freq;
        emb[i] = angle.sin();
        emb[half + i] = angle.cos();
    }
    emb
}

impl Denoiser {
    pub fn new(
        cfg: DenoiserConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.latent_channels;
        let w = cfg.width;
        let encoder = GlyphEncoder::new(cfg.encoder.clone(), store, &format!("{prefix}.glyph"), rng)?;
        let merge = Conv2d::new(
            store,
            &format!("{prefix}.merge"),
            cfg.merge_in_channels(),
            c,
            3,
            1,
            1,
            rng,
        );
        let t_proj = Linear::new(store, &format!("{prefix}.t_proj"), cfg.t_embed_dim, c, rng);
        let conv_in = Conv2d::new(store, &format!("{prefix}.conv_in"), c, w, 3, 1, 1, rng);
        let pre = (0..cfg.blocks_pre)
            .map(|i| ResBlock::new(store, &format!("{prefix}.pre{i}"), w, rng))
            .collect();
        let attn_norm = LayerNorm::new(store, &format!("{prefix}.attn_norm"), w);
        let attn = MultiHeadAttention::new(
            store,
            &format!("{prefix}.glyph_inject"),
            w,
            cfg.encoder.feat_dim,
            cfg.attn_inner,
            cfg.attn_heads,
            rng,
        );
        let post = (0..cfg.blocks_post)
            .map(|i| ResBlock::new(store, &format!("{prefix}.post{i}"), w, rng))
            .collect();
        let conv_out = Conv2d::new(store, &format!("{prefix}.conv_out"), w, c, 3, 1, 1, rng);
        Ok(Self {
            cfg,
            encoder,
            merge,
            t_proj,
            conv_in,
            pre,
            attn_norm,
            attn,
            post,
            conv_out,
        })
    }

    fn concat_inputs(&self, bundle: &DiffusionBundle) -> Array3<f64> {
        let c = self.cfg.latent_channels;
        let side = self.cfg.latent_side;
        let mut x = Array3::zeros((3 * c + 1, side, side));
        x.index_axis_mut(Axis(0), 0)
            .assign(&bundle.mask_lat.index_axis(Axis(0), 0));
        for ch in 0..c {
            x.index_axis_mut(Axis(0), 1 + ch)
                .assign(&bundle.noised.index_axis(Axis(0), ch));
            x.index_axis_mut(Axis(0), 1 + c + ch)
                .assign(&bundle.masked_lat.index_axis(Axis(0), ch));
            x.index_axis_mut(Axis(0), 1 + 2 * c + ch)
                .assign(&bundle.glyph_lat.index_axis(Axis(0), ch));
        }
        x
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        bundle: &DiffusionBundle,
    ) -> Result<(LatentGrid, DenoiserCache)> {
        bundle.validate(self.cfg.latent_channels, self.cfg.latent_side)?;
        let (features, enc) = self.encoder.forward(store, &bundle.char_stack)?;
        let concat_in = self.concat_inputs(bundle);
        let merged = self.merge.forward(store, &concat_in);
        let t_emb = timestep_embedding(bundle.t, self.cfg.t_embed_dim);
        let t_vec = self
            .t_proj
            .forward(store, &t_emb.clone().insert_axis(Axis(0)).to_owned());
        let mut x_in = merged;
        for ch in 0..self.cfg.latent_channels {
            let bias = t_vec[[0, ch]];
            x_in.index_axis_mut(Axis(0), ch).mapv_inplace(|v| v + bias);
        }
        let conv_in_out = self.conv_in.forward(store, &x_in);
        let mut h = conv_in_out.clone();
        let mut pre_caches = Vec::new();
        for block in &self.pre {
            let (out, cache) = block.forward(store, &h);
            pre_caches.push(cache);
            h = out;
        }
        // Glyph injection: spatial positions attend over feature rows.
        let w = self.cfg.width;
        let side = self.cfg.latent_side;
        let n_tok = side * side;
        let mut tokens = Array2::zeros((n_tok, w));
        for ch in 0..w {
            for y in 0..side {
                for x in 0..side {
                    tokens[[y * side + x, ch]] = h[[ch, y, x]];
                }
            }
        }
        let (normed, ln) = self.attn_norm.forward(store, &tokens);
        let (attn_out, attn_cache) = self.attn.forward(store, &normed, &features);
        let mut attn_out_map = Array3::zeros((w, side, side));
        for ch in 0..w {
            for y in 0..side {
                for x in 0..side {
                    attn_out_map[[ch, y, x]] = attn_out[[y * side + x, ch]];
                }
            }
        }
        let post_in = &h + &attn_out_map;
        let mut g = post_in.clone();
        let mut post_caches = Vec::new();
        for block in &self.post {
            let (out, cache) = block.forward(store, &g);
            post_caches.push(cache);
            g = out;
        }
        let conv_out_in = g;
        let eps_hat = self.conv_out.forward(store, &conv_out_in);
        Ok((
            eps_hat,
            DenoiserCache {
                concat_in,
                t_emb,
                x_in,
                conv_in_out,
                pre: pre_caches,
                tokens,
                ln,
                attn: attn_cache,
                enc,
                attn_out_map,
                post_in,
                post: post_caches,
                conv_out_in,
            },
        ))
    }

    /// Backward through the whole predictor, including the glyph encoder.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &DenoiserCache,
        d_eps_hat: &LatentGrid,
        grads: &mut GradBuf,
    ) {
        let mut d = self
            .conv_out
            .backward(store, &cache.conv_out_in, d_eps_hat, grads);
        for (block, bc) in self.post.iter().zip(cache.post.iter()).rev() {
            d = block.backward(store, bc, &d, grads);
        }
        // post_in = h + attn_out_map; both receive d.
        let w = self.cfg.width;
        let side = self.cfg.latent_side;
        let n_tok = side * side;
        let mut d_attn_out = Array2::zeros((n_tok, w));
        for ch in 0..w {
            for y in 0..side {
                for x in 0..side {
                    d_attn_out[[y * side + x, ch]] = d[[ch, y, x]];
                }
            }
        }
        let (d_normed, d_features) = self.attn.backward(store, &cache.attn, &d_attn_out, grads);
        self.encoder.backward(store, &cache.enc, &d_features, grads);
        let d_tokens = self.attn_norm.backward(store, &cache.ln, &d_normed, grads);
        let mut d_h = d.clone();
        for ch in 0..w {
            for y in 0..side {
                for x in 0..side {
                    d_h[[ch, y, x]] += d_tokens[[y * side + x, ch]];
                }
            }
        }
        let _ = &cache.tokens;
        let _ = &cache.attn_out_map;
        let _ = &cache.post_in;
        for (block, bc) in self.pre.iter().zip(cache.pre.iter()).rev() {
            d_h = block.backward(store, bc, &d_h, grads);
        }
        let _ = &cache.conv_in_out;
        let d_x_in = self.conv_in.backward(store, &cache.x_in, &d_h, grads);
        // Timestep bias add: gradient per channel sums over space.
        let c = self.cfg.latent_channels;
        let mut d_t_vec = Array2::zeros((1, c));
        for ch in 0..c {
            d_t_vec[[0, ch]] = d_x_in.index_axis(Axis(0), ch).sum();
        }
        self.t_proj.backward(
            store,
            &cache.t_emb.clone().insert_axis(Axis(0)).to_owned(),
            &d_t_vec,
            grads,
        );
        self.merge
            .backward(store, &cache.concat_in, &d_x_in, grads);
    }
}

/// Predicted noise for one bundle.
pub fn denoise_step(
    denoiser: &Denoiser,
    store: &ParamStore,
    bundle: &DiffusionBundle,
) -> Result<LatentGrid> {
    Ok(denoiser.forward(store, bundle)?.0)
}

/// Mean squared error between the drawn and the predicted noise.
pub fn cdm_loss(denoiser: &Denoiser, store: &ParamStore, bundle: &DiffusionBundle) -> Result<f64> {
    let (eps_hat, _) = denoiser.forward(store, bundle)?;
    Ok(mse(&eps_hat, &bundle.eps))
}

/// Loss plus parameter gradients for one bundle.
pub fn cdm_loss_and_grads(
    denoiser: &Denoiser,
    store: &ParamStore,
    bundle: &DiffusionBundle,
    grads: &mut GradBuf,
) -> Result<f64> {
    let (eps_hat, cache) = denoiser.forward(store, bundle)?;
    let n = eps_hat.len() as f64;
    let d = (&eps_hat - &bundle.eps) * (2.0 / n);
    denoiser.backward(store, &cache, &d, grads);
    Ok(mse(&eps_hat, &bundle.eps))
}

/// Precomputed frozen-codec latents for one conditioning pack.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub signal_lat: LatentGrid,
    pub mask_lat: Array3<f64>,
    pub masked_lat: LatentGrid,
    pub glyph_lat: LatentGrid,
    pub char_stack: Array3<f32>,
}

/// Encodes a pack's rasters through the frozen codec.
pub fn prepare_train_item(
    codec: &LatentCodec,
    codec_store: &ParamStore,
    pack: &CondPack,
) -> Result<TrainItem> {
    Ok(TrainItem {
        signal_lat: codec.encode(codec_store, &pack.crop_image)?,
        mask_lat: downsample_mask(&pack.mask, codec.cfg.down_factor)?,
        masked_lat: codec.encode(codec_store, &pack.masked_image)?,
        glyph_lat: codec.encode(codec_store, &pack.word_glyph)?,
        char_stack: pack.char_stack.clone(),
    })
}

fn gaussian_grid(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> LatentGrid {
    Array3::from_shape_simple_fn(shape, || {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdmTrainSettings {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for CdmTrainSettings {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 1e-3,
            batch: 8,
            seed: 0,
        }
    }
}

/// Trains the denoiser (and its glyph encoder) on precomputed items with the
/// codec frozen. Returns the per-step loss trace. Deterministic under seed.
pub fn train_cdm(
    denoiser: &Denoiser,
    store: &mut ParamStore,
    items: &[TrainItem],
    schedule: &NoiseSchedule,
    settings: &CdmTrainSettings,
) -> Result<Vec<f64>> {
    if items.is_empty() {
        return Err(Error::EmptyInput("no training items".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut adam = Adam::new(store, settings.lr);
    let mut trace = Vec::with_capacity(settings.steps);
    let shape = (
        denoiser.cfg.latent_channels,
        denoiser.cfg.latent_side,
        denoiser.cfg.latent_side,
    );
    for step in 0..settings.steps {
        // Draw the whole batch sequentially so worker count cannot change it.
        let batch: Vec<DiffusionBundle> = (0..settings.batch)
            .map(|_| {
                let item = &items[rng.gen_range(0..items.len())];
                let t = rng.gen_range(0..schedule.len());
                let eps = gaussian_grid(shape, &mut rng);
                let noised = add_noise(&item.signal_lat, t, &eps, schedule)
                    .expect("shapes fixed by config");
                DiffusionBundle {
                    mask_lat: item.mask_lat.clone(),
                    masked_lat: item.masked_lat.clone(),
                    glyph_lat: item.glyph_lat.clone(),
                    noised,
                    t,
                    eps,
                    char_stack: item.char_stack.clone(),
                }
            })
            .collect();
        let parts: Vec<Result<(f64, GradBuf)>> = batch
            .par_iter()
            .map(|bundle| {
                let mut g = GradBuf::zeros_like(store);
                let loss = cdm_loss_and_grads(denoiser, store, bundle, &mut g)?;
                Ok((loss, g))
            })
            .collect();
        let mut grads = GradBuf::zeros_like(store);
        let mut loss_sum = 0.0;
        for part in parts {
            let (loss, g) = part?;
            loss_sum += loss;
            grads.merge(&g);
        }
        let loss = loss_sum / settings.batch as f64;
        grads.scale(1.0 / settings.batch as f64);
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: loss });
        }
        adam.step(store, &grads);
        trace.push(loss);
    }
    Ok(trace)
}

/// One deterministic (eta = 0) update from `t` to `t_prev`:
/// `x0 = (z_t - sqrt(1-a_t) e) / sqrt(a_t)`, then re-noise toward `a_prev`.
/// Returns `(z_prev, x0_hat)`.
pub fn ddim_step(
    z_t: &LatentGrid,
    eps_hat: &LatentGrid,
    alpha_bar_t: f64,
    alpha_bar_prev: f64,
) -> (LatentGrid, LatentGrid) {
    let x0 = (z_t - &(eps_hat * (1.0 - alpha_bar_t).sqrt())) / alpha_bar_t.sqrt();
    let z_prev = &x0 * alpha_bar_prev.sqrt() + eps_hat * (1.0 - alpha_bar_prev).sqrt();
    (z_prev, x0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSettings {
    /// Sampler steps, evenly subsampled from the training schedule.
    pub steps: usize,
    pub seed: u64,
}

impl Default for SampleSettings {
    fn default() -> Self {
        Self { steps: 20, seed: 0 }
    }
}

/// Generates one crop: starts from pure noise, runs the deterministic
/// sampler over evenly spaced timesteps, decodes, and composites the
/// original pixels back outside the text region.
pub fn sample(
    pack: &CondPack,
    codec: &LatentCodec,
    codec_store: &ParamStore,
    denoiser: &Denoiser,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    settings: &SampleSettings,
) -> Result<ImageBuf> {
    if settings.steps == 0 || settings.steps > schedule.len() {
        return Err(Error::Config(format!(
            "steps {} outside 1..={}",
            settings.steps,
            schedule.len()
        )));
    }
    let item = prepare_train_item(codec, codec_store, pack)?;
    let shape = (
        denoiser.cfg.latent_channels,
        denoiser.cfg.latent_side,
        denoiser.cfg.latent_side,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut z = gaussian_grid(shape, &mut rng);
    let ratio = schedule.len() / settings.steps;
    let timesteps: Vec<usize> = (0..settings.steps)
        .map(|i| (i + 1) * ratio - 1)
        .rev()
        .collect();
    let mut final_x0 = z.clone();
    for (k, &t) in timesteps.iter().enumerate() {
        let bundle = DiffusionBundle {
            mask_lat: item.mask_lat.clone(),
            masked_lat: item.masked_lat.clone(),
            glyph_lat: item.glyph_lat.clone(),
            noised: z.clone(),
            t,
            eps: Array3::zeros(shape),
            char_stack: item.char_stack.clone(),
        };
        let (eps_hat, _) = denoiser.forward(store, &bundle)?;
        let a_t = schedule.alpha_bar(t)?;
        let a_prev = if k + 1 < timesteps.len() {
            schedule.alpha_bar(timesteps[k + 1])?
        } else {
            1.0
        };
        let (z_prev, x0) = ddim_step(&z, &eps_hat, a_t, a_prev);
        z = z_prev;
        final_x0 = x0;
    }
    let decoded = codec.decode(codec_store, &final_x0)?;
    // Mask compositing: non-text pixels come from the original crop.
    let mut out = decoded;
    for y in 0..pack.crop_image.height() {
        for x in 0..pack.crop_image.width() {
            if pack.mask[[y, x]] == 1.0 {
                for c in 0..3 {
                    out.data[[y, x, c]] = pack.crop_image.data[[y, x, c]];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_param_grads;

    #[test]
    fn schedule_example_and_monotonicity() {
        let s = make_schedule(2, 0.1, 0.1).unwrap();
        assert!((s.alphas_bar[0] - 0.9).abs() < 1e-12);
        assert!((s.alphas_bar[1] - 0.81).abs() < 1e-12);
        for (ts, b0, b1) in [(10, 1e-4, 0.02), (100, 1e-4, 0.5), (1000, 1e-4, 0.02)] {
            let s = make_schedule(ts, b0, b1).unwrap();
            assert!((1.0 - s.alphas_bar[0]).abs() < 1e-3);
            for w in s.alphas_bar.windows(2) {
                assert!(w[1] < w[0]);
            }
        }
        assert!(matches!(make_schedule(10, 0.0, 0.5), Err(Error::Config(_))));
        assert!(matches!(make_schedule(10, 0.5, 0.2), Err(Error::Config(_))));
    }

    #[test]
    fn default_schedule_fully_noises() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        // Direct product computed independently.
        let mut prod = 1.0;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert!((s.alphas_bar[999] - prod).abs() < 1e-12);
        assert!(s.alphas_bar[999] < 0.01);
    }

    #[test]
    fn add_noise_endpoints() {
        let z = Array3::from_shape_fn((2, 3, 3), |(c, y, x)| (c + y + x) as f64);
        let eps = Array3::from_elem((2, 3, 3), 7.0);
        let s = NoiseSchedule::from_parts(vec![0.0, 0.0], vec![1.0, 0.0]);
        assert_eq!(add_noise(&z, 0, &eps, &s).unwrap(), z);
        assert_eq!(add_noise(&z, 1, &eps, &s).unwrap(), eps);
        assert!(matches!(
            add_noise(&z, 5, &eps, &s),
            Err(Error::Index(_))
        ));
        let bad = Array3::zeros((2, 3, 4));
        assert!(matches!(
            add_noise(&z, 0, &bad, &s),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn add_noise_variance_monte_carlo() {
        let s = NoiseSchedule::from_parts(vec![0.0], vec![0.6]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 10_000;
        let sigma2: f64 = 2.0;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let zs = gaussian_grid((1, 1, 1), &mut rng) * sigma2.sqrt();
            let eps = gaussian_grid((1, 1, 1), &mut rng);
            values.push(add_noise(&zs, 0, &eps, &s).unwrap()[[0, 0, 0]]);
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let expected = 0.6 * sigma2 + 0.4;
        assert!(
            (var - expected).abs() / expected < 0.05,
            "var {var}, expected {expected}"
        );
    }

    #[test]
    fn mask_downsampling() {
        let ones = ndarray::Array2::ones((8, 8));
        let z = downsample_mask(&ones, 4).unwrap();
        assert!(z.iter().all(|&v| v == 1.0));
        let checker =
            ndarray::Array2::from_shape_fn((8, 8), |(y, x)| ((y + x) % 2) as f32);
        let z = downsample_mask(&checker, 2).unwrap();
        assert!(z.iter().all(|&v| v == 0.5));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let random = ndarray::Array2::from_shape_simple_fn((16, 16), || {
            if rng.gen_bool(0.3) {
                0.0f32
            } else {
                1.0
            }
        });
        let z = downsample_mask(&random, 4).unwrap();
        let mean_in = random.iter().map(|&v| v as f64).sum::<f64>() / 256.0;
        let mean_out = z.iter().sum::<f64>() / 16.0;
        assert!((mean_in - mean_out).abs() < 1e-12);
    }

    fn tiny_denoiser(seed: u64) -> (Denoiser, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = DenoiserConfig {
            latent_channels: 2,
            latent_side: 4,
            width: 6,
            blocks_pre: 1,
            blocks_post: 1,
            t_embed_dim: 8,
            attn_inner: 8,
            attn_heads: 2,
            encoder: GlyphEncoderConfig {
                patch: 8,
                feat_dim: 8,
                depth: 1,
                heads: 2,
                channels: 3,
                tile: 16,
            },
        };
        let den = Denoiser::new(cfg, &mut store, "cdm", &mut rng).unwrap();
        (den, store)
    }

    fn tiny_bundle(seed: u64) -> DiffusionBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stack = Array3::from_elem((3, 16, 16), 255.0f32);
        for c in 0..2 {
            for y in 4..12 {
                for x in 4..12 {
                    if rng.gen_bool(0.5) {
                        stack[[c, y, x]] = (5 * (c + 1)) as f32;
                    }
                }
            }
        }
        DiffusionBundle {
            mask_lat: gaussian_grid((1, 4, 4), &mut rng).mapv(|v| v.abs().min(1.0)),
            masked_lat: gaussian_grid((2, 4, 4), &mut rng),
            glyph_lat: gaussian_grid((2, 4, 4), &mut rng),
            noised: gaussian_grid((2, 4, 4), &mut rng),
            t: 3,
            eps: gaussian_grid((2, 4, 4), &mut rng),
            char_stack: stack,
        }
    }

    #[test]
    fn merge_channel_arithmetic() {
        let cfg = DenoiserConfig::default();
        assert_eq!(cfg.merge_in_channels(), 13);
        let (den, _) = tiny_denoiser(1);
        assert_eq!(den.cfg.merge_in_channels(), 7);
    }

    #[test]
    fn denoise_output_shape_matches_input() {
        let (den, store) = tiny_denoiser(2);
        let bundle = tiny_bundle(20);
        let eps_hat = denoise_step(&den, &store, &bundle).unwrap();
        assert_eq!(eps_hat.dim(), bundle.noised.dim());
    }

    #[test]
    fn char_stack_ablations_change_prediction() {
        let (den, store) = tiny_denoiser(3);
        let bundle = tiny_bundle(21);
        let base = denoise_step(&den, &store, &bundle).unwrap();
        let mut zeroed = bundle.clone();
        zeroed.char_stack.fill(0.0);
        let z = denoise_step(&den, &store, &zeroed).unwrap();
        assert!((&base - &z).mapv(f64::abs).sum() > 1e-9);
        let mut flat = bundle.clone();
        flat.char_stack.mapv_inplace(|v| {
            if v != 255.0 && v != 0.0 {
                127.0
            } else {
                v
            }
        });
        let f = denoise_step(&den, &store, &flat).unwrap();
        assert!((&base - &f).mapv(f64::abs).sum() > 1e-9);
    }

    #[test]
    fn cdm_gradcheck_through_all_components() {
        let (den, mut store) = tiny_denoiser(4);
        assert!(store.n_scalars() <= 10_000, "{}", store.n_scalars());
        let bundle = tiny_bundle(22);
        let mut grads = GradBuf::zeros_like(&store);
        cdm_loss_and_grads(&den, &store, &bundle, &mut grads).unwrap();
        let loss = |s: &ParamStore| cdm_loss(&den, s, &bundle).unwrap();
        let err = check_param_grads(&mut store, &grads, loss, 20, 1e-4, 31);
        assert!(err <= 1e-3, "max rel err {err}");
    }

    #[test]
    fn train_cdm_is_seed_deterministic_and_learns() {
        let schedule = make_schedule(50, 1e-3, 0.1).unwrap();
        let items: Vec<TrainItem> = (0..3)
            .map(|i| {
                let b = tiny_bundle(30 + i);
                TrainItem {
                    signal_lat: b.noised.clone(),
                    mask_lat: b.mask_lat.clone(),
                    masked_lat: b.masked_lat.clone(),
                    glyph_lat: b.glyph_lat.clone(),
                    char_stack: b.char_stack.clone(),
                }
            })
            .collect();
        let settings = CdmTrainSettings {
            steps: 60,
            lr: 2e-3,
            batch: 4,
            seed: 5,
        };
        let run = || {
            let (den, mut store) = tiny_denoiser(6);
            train_cdm(&den, &mut store, &items, &schedule, &settings).unwrap()
        };
        let t1 = run();
        let t2 = run();
        assert_eq!(t1, t2);
        let head: f64 = t1[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = t1[t1.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "no learning: head {head} tail {tail}");
    }

    #[test]
    fn ddim_update_rule_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let z = gaussian_grid((2, 4, 4), &mut rng);
        let zero = Array3::zeros((2, 4, 4));
        let (_, x0) = ddim_step(&z, &zero, 0.25, 0.1);
        let expect = &z * 2.0;
        assert!((&x0 - &expect).mapv(f64::abs).sum() < 1e-12);
        // Full noise preservation: eps_hat = 0 and a_prev = 1 returns x0.
        let (z_prev, x0b) = ddim_step(&z, &zero, 0.25, 1.0);
        assert_eq!(z_prev, x0b);
    }
}
