//! Convolutional autoencoder compressing crops into latent grids.
//!
//! Deterministic bottleneck: the encoder output is used directly as the
//! latent (no reparameterization), and the decoder ends in a sigmoid so
//! outputs land in [0, 1]. Training minimizes plain reconstruction MSE.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuf;
use crate::nn::layers::{sigmoid, sigmoid_backward_from_y, silu, silu_backward, upsample2x, upsample2x_backward};
use crate::nn::{Adam, Conv2d, GradBuf, ParamStore, Sgd};

/// A `C x (S/f) x (S/f)` latent grid.
pub type LatentGrid = Array3<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Input side S.
    pub size: usize,
    /// Spatial downsampling factor f (a power of two).
    pub down_factor: usize,
    /// Latent channels C.
    pub latent_channels: usize,
    /// Base convolution width.
    pub width: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            size: 64,
            down_factor: 4,
            latent_channels: 4,
            width: 32,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 {
            return Err(Error::Config("latent_channels must be >= 1".into()));
        }
        if !self.down_factor.is_power_of_two() || self.down_factor < 2 {
            return Err(Error::Config(format!(
                "down_factor {} must be a power of two >= 2",
                self.down_factor
            )));
        }
        if self.size % self.down_factor != 0 {
            return Err(Error::Config(format!(
                "size {} not divisible by factor {}",
                self.size, self.down_factor
            )));
        }
        Ok(())
    }

    pub fn latent_side(&self) -> usize {
        self.size / self.down_factor
    }

    fn levels(&self) -> usize {
        self.down_factor.trailing_zeros() as usize
    }
}

pub struct LatentCodec {
    pub cfg: CodecConfig,
    enc_in: Conv2d,
    enc_down: Vec<Conv2d>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_up: Vec<Conv2d>,
    dec_out: Conv2d,
}

pub struct CodecCache {
    input: Array3<f64>,
    enc_in_pre: Array3<f64>,
    enc_in_act: Array3<f64>,
    downs: Vec<(Array3<f64>, Array3<f64>)>,
    latent: Array3<f64>,
    dec_in_pre: Array3<f64>,
    dec_in_act: Array3<f64>,
    ups: Vec<(Array3<f64>, Array3<f64>, Array3<f64>)>,
    pub recon: Array3<f64>,
}

/// `(H, W, 3)` unit-interval image to `(3, H, W)` float tensor.
pub fn image_to_chw(img: &ImageBuf) -> Array3<f64> {
    let (h, w) = (img.height(), img.width());
    Array3::from_shape_fn((3, h, w), |(c, y, x)| img.data[[y, x, c]] as f64)
}

pub fn chw_to_image(t: &Array3<f64>) -> ImageBuf {
    let (_, h, w) = t.dim();
    let mut img = ImageBuf::splat(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                img.data[[y, x, c]] = t[[c, y, x]].clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

/// Mean squared error over all elements.
pub fn mse(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    (a - b).mapv(|v| v * v).mean().unwrap()
}

impl LatentCodec {
    pub fn new(
        cfg: CodecConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let c = cfg.latent_channels;
        let enc_in = Conv2d::new(store, &format!("{prefix}.enc_in"), 3, w, 3, 1, 1, rng);
        let enc_down = (0..cfg.levels())
            .map(|i| Conv2d::new(store, &format!("{prefix}.enc_down{i}"), w, w, 3, 2, 1, rng))
            .collect();
        let enc_out = Conv2d::new(store, &format!("{prefix}.enc_out"), w, c, 3, 1, 1, rng);
        let dec_in = Conv2d::new(store, &format!("{prefix}.dec_in"), c, w, 3, 1, 1, rng);
        let dec_up = (0..cfg.levels())
            .map(|i| Conv2d::new(store, &format!("{prefix}.dec_up{i}"), w, w, 3, 1, 1, rng))
            .collect();
        let dec_out = Conv2d::new(store, &format!("{prefix}.dec_out"), w, 3, 3, 1, 1, rng);
        Ok(Self {
            cfg,
            enc_in,
            enc_down,
            enc_out,
            dec_in,
            dec_up,
            dec_out,
        })
    }

    fn check_image(&self, img: &ImageBuf) -> Result<()> {
        let s = self.cfg.size;
        if img.height() != s || img.width() != s {
            return Err(Error::Shape(format!(
                "image {}x{}, codec expects {s}x{s}",
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }

    /// Deterministic latent for an `S x S` crop.
    pub fn encode(&self, store: &ParamStore, img: &ImageBuf) -> Result<LatentGrid> {
        self.check_image(img)?;
        let x = image_to_chw(img);
        Ok(self.encode_chw(store, &x))
    }

    fn encode_chw(&self, store: &ParamStore, x: &Array3<f64>) -> LatentGrid {
        let mut h = silu(&self.enc_in.forward(store, x));
        for conv in &self.enc_down {
            h = silu(&conv.forward(store, &h));
        }
        self.enc_out.forward(store, &h)
    }

    /// Decodes a latent grid to an image in [0, 1].
    pub fn decode(&self, store: &ParamStore, latent: &LatentGrid) -> Result<ImageBuf> {
        let ls = self.cfg.latent_side();
        if latent.dim() != (self.cfg.latent_channels, ls, ls) {
            return Err(Error::Shape(format!(
                "latent {:?}, codec expects ({}, {ls}, {ls})",
                latent.dim(),
                self.cfg.latent_channels
            )));
        }
        let mut h = silu(&self.dec_in.forward(store, latent));
        for conv in &self.dec_up {
            h = silu(&conv.forward(store, &upsample2x(&h)));
        }
        let out = sigmoid(&self.dec_out.forward(store, &h));
        Ok(chw_to_image(&out))
    }

    /// Full encode-decode pass with every activation cached for backward.
    pub fn forward_full(&self, store: &ParamStore, x: &Array3<f64>) -> CodecCache {
        let enc_in_pre = self.enc_in.forward(store, x);
        let enc_in_act = silu(&enc_in_pre);
        let mut h = enc_in_act.clone();
        let mut downs = Vec::new();
        for conv in &self.enc_down {
            let pre = conv.forward(store, &h);
            let act = silu(&pre);
            downs.push((h, pre));
            h = act;
        }
        let latent = self.enc_out.forward(store, &h);
        let dec_in_pre = self.dec_in.forward(store, &latent);
        let dec_in_act = silu(&dec_in_pre);
        let mut g = dec_in_act.clone();
        let mut ups = Vec::new();
        for conv in &self.dec_up {
            let upsampled = upsample2x(&g);
            let pre = conv.forward(store, &upsampled);
            let act = silu(&pre);
            ups.push((g, upsampled, pre));
            g = act;
        }
        let recon = sigmoid(&self.dec_out.forward(store, &g));
        CodecCache {
            input: x.clone(),
            enc_in_pre,
            enc_in_act,
            downs,
            latent,
            dec_in_pre,
            dec_in_act,
            ups,
            recon,
        }
    }

    /// Backward through decode and encode given the adjoint on the
    /// reconstruction. Accumulates parameter gradients.
    pub fn backward_full(
        &self,
        store: &ParamStore,
        cache: &CodecCache,
        d_recon: &Array3<f64>,
        grads: &mut GradBuf,
    ) {
        let mut d = sigmoid_backward_from_y(&cache.recon, d_recon);
        // Input to dec_out is the last up activation, recomputed from its
        // cached pre-activation rather than stored twice.
        let dec_out_input = match cache.ups.last() {
            Some((_, _, pre)) => silu(pre),
            None => cache.dec_in_act.clone(),
        };
        d = self.dec_out.backward(store, &dec_out_input, &d, grads);
        for (conv, (_, upsampled, pre)) in self.dec_up.iter().zip(cache.ups.iter()).rev() {
            let d_pre = silu_backward(pre, &d);
            let d_up = conv.backward(store, upsampled, &d_pre, grads);
            d = upsample2x_backward(&d_up);
        }
        let d_dec_in_pre = silu_backward(&cache.dec_in_pre, &d);
        let d_latent = self
            .dec_in
            .backward(store, &cache.latent, &d_dec_in_pre, grads);
        // Encoder.
        let enc_out_input = match cache.downs.last() {
            Some((_, pre)) => silu(pre),
            None => cache.enc_in_act.clone(),
        };
        let mut d_enc = self
            .enc_out
            .backward(store, &enc_out_input, &d_latent, grads);
        for (conv, (h_in, pre)) in self.enc_down.iter().zip(cache.downs.iter()).rev() {
            let d_pre = silu_backward(pre, &d_enc);
            d_enc = conv.backward(store, h_in, &d_pre, grads);
        }
        let d_enc_in_pre = silu_backward(&cache.enc_in_pre, &d_enc);
        self.enc_in
            .backward(store, &cache.input, &d_enc_in_pre, grads);
    }

    /// Reconstruction MSE of one image.
    pub fn vae_loss(&self, store: &ParamStore, img: &ImageBuf) -> Result<f64> {
        self.check_image(img)?;
        let x = image_to_chw(img);
        let cache = self.forward_full(store, &x);
        Ok(mse(&cache.recon, &x))
    }

    /// Loss plus parameter gradients for one image.
    pub fn loss_and_grads(
        &self,
        store: &ParamStore,
        img: &ImageBuf,
        grads: &mut GradBuf,
    ) -> Result<f64> {
        self.check_image(img)?;
        let x = image_to_chw(img);
        let cache = self.forward_full(store, &x);
        let n = x.len() as f64;
        let d_recon = (&cache.recon - &x) * (2.0 / n);
        self.backward_full(store, &cache, &d_recon, grads);
        Ok(mse(&cache.recon, &x))
    }
}

/// Which optimizer drives a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub optimizer: OptimKind,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 2e-3,
            batch: 8,
            seed: 0,
            optimizer: OptimKind::Adam,
        }
    }
}

/// Trains the codec on a corpus of crops. Returns the per-step loss trace.
/// Aborts on a non-finite loss. Deterministic for a fixed seed.
pub fn train_codec(
    codec: &LatentCodec,
    store: &mut ParamStore,
    corpus: &[ImageBuf],
    settings: &TrainSettings,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("training corpus is empty".into()));
    }
    for img in corpus {
        codec.check_image(img)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut adam = Adam::new(store, settings.lr);
    let sgd = Sgd { lr: settings.lr };
    let mut trace = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let batch: Vec<usize> = (0..settings.batch)
            .map(|_| rng.gen_range(0..corpus.len()))
            .collect();
        // Per-sample gradients in parallel, merged in batch order.
        let parts: Vec<(f64, GradBuf)> = batch
            .par_iter()
            .map(|&i| {
                let mut g = GradBuf::zeros_like(store);
                let loss = codec
                    .loss_and_grads(store, &corpus[i], &mut g)
                    .expect("shapes pre-checked");
                (loss, g)
            })
            .collect();
        let mut grads = GradBuf::zeros_like(store);
        let mut loss_sum = 0.0;
        for (loss, g) in &parts {
            loss_sum += loss;
            grads.merge(g);
        }
        let loss = loss_sum / settings.batch as f64;
        grads.scale(1.0 / settings.batch as f64);
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: loss });
        }
        match settings.optimizer {
            OptimKind::Adam => adam.step(store, &grads),
            OptimKind::Sgd => sgd.step(store, &grads),
        }
        trace.push(loss);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_param_grads;

    fn tiny_codec() -> (LatentCodec, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut store = ParamStore::new();
        let codec = LatentCodec::new(
            CodecConfig {
                size: 8,
                down_factor: 2,
                latent_channels: 2,
                width: 4,
            },
            &mut store,
            "vae",
            &mut rng,
        )
        .unwrap();
        (codec, store)
    }

    fn noise_image(s: usize, seed: u64) -> ImageBuf {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = ImageBuf::splat(s, s, 0.0);
        img.data.mapv_inplace(|_| rng.gen::<f32>());
        img
    }

    #[test]
    fn shape_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut store = ParamStore::new();
        let codec = LatentCodec::new(CodecConfig::default(), &mut store, "vae", &mut rng).unwrap();
        let img = noise_image(64, 1);
        let z = codec.encode(&store, &img).unwrap();
        assert_eq!(z.dim(), (4, 16, 16));
        let back = codec.decode(&store, &z).unwrap();
        assert_eq!((back.height(), back.width()), (64, 64));
        assert!(back.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let bad = noise_image(32, 2);
        assert!(matches!(codec.encode(&store, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn encode_is_deterministic() {
        let (codec, store) = tiny_codec();
        let img = noise_image(8, 3);
        assert_eq!(
            codec.encode(&store, &img).unwrap(),
            codec.encode(&store, &img).unwrap()
        );
    }

    #[test]
    fn mse_identities() {
        let a = Array3::from_elem((3, 4, 4), 0.5);
        assert_eq!(mse(&a, &a), 0.0);
        let b = a.mapv(|v| v + 0.1);
        assert!((mse(&a, &b) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn codec_gradcheck_against_finite_differences() {
        let (codec, mut store) = tiny_codec();
        assert!(store.n_scalars() <= 10_000, "{}", store.n_scalars());
        let img = noise_image(8, 4);
        let mut grads = GradBuf::zeros_like(&store);
        codec.loss_and_grads(&store, &img, &mut grads).unwrap();
        let loss = |s: &ParamStore| codec.vae_loss(s, &img).unwrap();
        let err = check_param_grads(&mut store, &grads, loss, 20, 1e-4, 55);
        assert!(err <= 1e-3, "max rel err {err}");
    }

    #[test]
    fn zero_learning_rate_freezes_loss() {
        let (codec, mut store) = tiny_codec();
        let corpus = vec![noise_image(8, 5)];
        let settings = TrainSettings {
            steps: 5,
            lr: 0.0,
            batch: 2,
            seed: 9,
            optimizer: OptimKind::Sgd,
        };
        let trace = train_codec(&codec, &mut store, &corpus, &settings).unwrap();
        for w in trace.windows(2) {
            assert_eq!(w[0], w[1]);
        }
    }

    #[test]
    fn same_seed_gives_identical_traces() {
        let corpus = vec![noise_image(8, 7), noise_image(8, 8), noise_image(8, 9)];
        let settings = TrainSettings {
            steps: 12,
            lr: 1e-3,
            batch: 2,
            seed: 42,
            optimizer: OptimKind::Adam,
        };
        let run = || {
            let (codec, mut store) = tiny_codec();
            train_codec(&codec, &mut store, &corpus, &settings).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn constant_images_map_to_distinct_latents_after_training() {
        let (codec, mut store) = tiny_codec();
        let black = ImageBuf::splat(8, 8, 0.0);
        let white = ImageBuf::splat(8, 8, 1.0);
        let corpus = vec![black.clone(), white.clone()];
        let settings = TrainSettings {
            steps: 120,
            lr: 5e-3,
            batch: 2,
            seed: 1,
            optimizer: OptimKind::Adam,
        };
        train_codec(&codec, &mut store, &corpus, &settings).unwrap();
        let zb = codec.encode(&store, &black).unwrap();
        let zw = codec.encode(&store, &white).unwrap();
        let diff = (&zb - &zw).mapv(f64::abs).sum();
        assert!(diff > 1e-3, "latents collapsed: diff {diff}");
    }

    #[test]
    fn short_overfit_reduces_loss() {
        let (codec, mut store) = tiny_codec();
        let mut grad = ImageBuf::splat(8, 8, 0.0);
        for y in 0..8 {
            for x in 0..8 {
                grad.data[[y, x, 0]] = x as f32 / 8.0;
                grad.data[[y, x, 1]] = y as f32 / 8.0;
            }
        }
        let corpus = vec![grad, ImageBuf::splat(8, 8, 0.9)];
        let settings = TrainSettings {
            steps: 400,
            lr: 3e-3,
            batch: 2,
            seed: 2,
            optimizer: OptimKind::Adam,
        };
        let trace = train_codec(&codec, &mut store, &corpus, &settings).unwrap();
        let head: f64 = trace[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = trace[trace.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head * 0.5, "head {head}, tail {tail}");
    }
}
