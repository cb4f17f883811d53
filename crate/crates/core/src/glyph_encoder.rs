//! Patch-embedding transformer encoder mapping the character stack to
//! conditioning feature rows consumed by the denoiser.
//!
//! The stack's L channels are flattened into each patch, so channel order
//! (and with it character order) is part of the embedding input.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::attention::AttentionCache;
use crate::nn::layers::{silu, silu_backward, LayerNorm, LayerNormCache, Linear};
use crate::nn::{GradBuf, MultiHeadAttention, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlyphEncoderConfig {
    /// Patch side; the tile side must divide by it.
    pub patch: usize,
    /// Feature width D.
    pub feat_dim: usize,
    /// Encoder blocks.
    pub depth: usize,
    /// Attention heads per block.
    pub heads: usize,
    /// Input channels (the stack's L).
    pub channels: usize,
    /// Tile side (the stack's T).
    pub tile: usize,
}

impl Default for GlyphEncoderConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            feat_dim: 128,
            depth: 2,
            heads: 4,
            channels: 25,
            tile: 64,
        }
    }
}

impl GlyphEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile % self.patch != 0 {
            return Err(Error::Config(format!(
                "tile {} not divisible by patch {}",
                self.tile, self.patch
            )));
        }
        if self.feat_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "feat_dim {} not divisible by heads {}",
                self.feat_dim, self.heads
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        Ok(())
    }

    /// Patch count N.
    pub fn n_patches(&self) -> usize {
        let side = self.tile / self.patch;
        side * side
    }

    /// Token rows N + 1 (class token first).
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }
}

/// Encoder output: `(N+1) x D`, class token in row 0.
#[derive(Debug, Clone)]
pub struct GlyphFeatures {
    pub matrix: Array2<f64>,
}

struct Block {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

pub struct GlyphEncoder {
    pub cfg: GlyphEncoderConfig,
    patch_embed: Linear,
    pos_embed: ParamId,
    cls_token: ParamId,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
}

struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    ln2_out: Array2<f64>,
    h_pre: Array2<f64>,
    h_act: Array2<f64>,
}

pub struct GlyphEncoderCache {
    patches: Array2<f64>,
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
}

impl GlyphEncoder {
    pub fn new(
        cfg: GlyphEncoderConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let patch_dim = cfg.channels * cfg.patch * cfg.patch;
        let d = cfg.feat_dim;
        let patch_embed = Linear::new(store, &format!("{prefix}.patch_embed"), patch_dim, d, rng);
        let pos_embed = store.add(
            &format!("{prefix}.pos_embed"),
            crate::nn::store::trunc_normal(&[cfg.n_tokens(), d], 0.02, rng),
        );
        let cls_token = store.add(
            &format!("{prefix}.cls_token"),
            crate::nn::store::trunc_normal(&[d], 0.02, rng),
        );
        let hidden = 2 * d;
        let blocks = (0..cfg.depth)
            .map(|i| Block {
                norm1: LayerNorm::new(store, &format!("{prefix}.b{i}.norm1"), d),
                attn: MultiHeadAttention::new(
                    store,
                    &format!("{prefix}.b{i}.attn"),
                    d,
                    d,
                    d,
                    cfg.heads,
                    rng,
                ),
                norm2: LayerNorm::new(store, &format!("{prefix}.b{i}.norm2"), d),
                fc1: Linear::new(store, &format!("{prefix}.b{i}.fc1"), d, hidden, rng),
                fc2: Linear::new(store, &format!("{prefix}.b{i}.fc2"), hidden, d, rng),
            })
            .collect();
        let final_norm = LayerNorm::new(store, &format!("{prefix}.final_norm"), d);
        Ok(Self {
            cfg,
            patch_embed,
            pos_embed,
            cls_token,
            blocks,
            final_norm,
        })
    }

    /// Flattens the stack into `(N, L*patch*patch)` rows, values scaled from
    /// raw 0..=255 to unit range.
    fn patchify(&self, stack: &Array3<f32>) -> Result<Array2<f64>> {
        let (l, t, t2) = stack.dim();
        if l != self.cfg.channels || t != self.cfg.tile || t2 != self.cfg.tile {
            return Err(Error::Shape(format!(
                "stack {:?}, config wants ({}, {}, {})",
                stack.dim(),
                self.cfg.channels,
                self.cfg.tile,
                self.cfg.tile
            )));
        }
        let p = self.cfg.patch;
        let side = t / p;
        let mut out = Array2::zeros((side * side, l * p * p));
        for py in 0..side {
            for px in 0..side {
                let row = py * side + px;
                let mut col = 0;
                for c in 0..l {
                    for dy in 0..p {
                        for dx in 0..p {
                            out[[row, col]] =
                                stack[[c, py * p + dy, px * p + dx]] as f64 / 255.0;
                            col += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        stack: &Array3<f32>,
    ) -> Result<(Array2<f64>, GlyphEncoderCache)> {
        let patches = self.patchify(stack)?;
        let embedded = self.patch_embed.forward(store, &patches);
        let n_tok = self.cfg.n_tokens();
        let d = self.cfg.feat_dim;
        let mut x = Array2::zeros((n_tok, d));
        x.row_mut(0).assign(&store.get1(self.cls_token));
        x.slice_mut(ndarray::s![1.., ..]).assign(&embedded);
        x += &store.get2(self.pos_embed);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (ln1_out, ln1) = block.norm1.forward(store, &x);
            let (attn_out, attn) = block.attn.forward(store, &ln1_out, &ln1_out);
            let x_mid = &x + &attn_out;
            let (ln2_out, ln2) = block.norm2.forward(store, &x_mid);
            let h_pre = block.fc1.forward(store, &ln2_out);
            let h_act = silu(&h_pre);
            let mlp_out = block.fc2.forward(store, &h_act);
            x = &x_mid + &mlp_out;
            caches.push(BlockCache {
                ln1,
                attn,
                ln2,
                ln2_out,
                h_pre,
                h_act,
            });
        }
        let (out, final_ln) = self.final_norm.forward(store, &x);
        Ok((
            out,
            GlyphEncoderCache {
                patches,
                blocks: caches,
                final_ln,
            },
        ))
    }

    /// Accumulates parameter gradients for a downstream scalar loss whose
    /// adjoint on the feature rows is `adjoint`.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &GlyphEncoderCache,
        adjoint: &Array2<f64>,
        grads: &mut GradBuf,
    ) {
        let mut dx = self
            .final_norm
            .backward(store, &cache.final_ln, adjoint, grads);
        for (block, bc) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            // x = x_mid + fc2(silu(fc1(ln2(x_mid))))
            let d_mlp_out = dx.clone();
            let d_h_act = block.fc2.backward(store, &bc.h_act, &d_mlp_out, grads);
            let d_h_pre = silu_backward(&bc.h_pre, &d_h_act);
            let d_ln2_out = block.fc1.backward(store, &bc.ln2_out, &d_h_pre, grads);
            let d_x_mid_norm = block.norm2.backward(store, &bc.ln2, &d_ln2_out, grads);
            let d_x_mid = &dx + &d_x_mid_norm;
            // x_mid = x_in + attn(ln1(x_in))
            let (d_q, d_kv) = block.attn.backward(store, &bc.attn, &d_x_mid, grads);
            let d_ln1_out = &d_q + &d_kv;
            let d_x_norm = block.norm1.backward(store, &bc.ln1, &d_ln1_out, grads);
            dx = &d_x_mid + &d_x_norm;
        }
        grads.accum(self.pos_embed, &dx);
        grads.accum(self.cls_token, &dx.row(0).to_owned());
        let d_embedded = dx.slice(ndarray::s![1.., ..]).to_owned();
        self.patch_embed
            .backward(store, &cache.patches, &d_embedded, grads);
    }
}

/// Runs the encoder on one stack.
pub fn encode_glyphs(
    encoder: &GlyphEncoder,
    store: &ParamStore,
    stack: &Array3<f32>,
) -> Result<GlyphFeatures> {
    let (matrix, _) = encoder.forward(store, stack)?;
    debug_assert!(matrix.iter().all(|v| v.is_finite()));
    Ok(GlyphFeatures { matrix })
}

/// Parameter gradients of a downstream scalar loss, given its adjoint on the
/// feature matrix.
pub fn encoder_grad(
    encoder: &GlyphEncoder,
    store: &ParamStore,
    stack: &Array3<f32>,
    adjoint: &Array2<f64>,
    grads: &mut GradBuf,
) -> Result<()> {
    let (_, cache) = encoder.forward(store, stack)?;
    encoder.backward(store, &cache, adjoint, grads);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_param_grads;
    use ndarray::Axis;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> GlyphEncoderConfig {
        GlyphEncoderConfig {
            patch: 8,
            feat_dim: 8,
            depth: 2,
            heads: 2,
            channels: 3,
            tile: 16,
        }
    }

    fn random_stack(cfg: &GlyphEncoderConfig, seed: u64) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((cfg.channels, cfg.tile, cfg.tile), || {
            if rng.gen_bool(0.2) {
                rng.gen_range(0..255) as f32
            } else {
                255.0
            }
        })
    }

    #[test]
    fn paper_config_shape_is_65_by_1024() {
        let cfg = GlyphEncoderConfig {
            patch: 8,
            feat_dim: 1024,
            depth: 1,
            heads: 8,
            channels: 25,
            tile: 64,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = GlyphEncoder::new(cfg.clone(), &mut store, "ge", &mut rng).unwrap();
        let stack = Array3::from_elem((25, 64, 64), 255.0f32);
        let feats = encode_glyphs(&enc, &store, &stack).unwrap();
        assert_eq!(feats.matrix.dim(), (65, 1024));
    }

    #[test]
    fn desk_config_shape() {
        let cfg = GlyphEncoderConfig {
            patch: 8,
            feat_dim: 32,
            depth: 1,
            heads: 4,
            channels: 25,
            tile: 32,
        };
        assert_eq!(cfg.n_patches(), 16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = GlyphEncoder::new(cfg, &mut store, "ge", &mut rng).unwrap();
        let stack = Array3::from_elem((25, 32, 32), 0.0f32);
        let feats = encode_glyphs(&enc, &store, &stack).unwrap();
        assert_eq!(feats.matrix.dim(), (17, 32));
    }

    #[test]
    fn channel_swap_changes_output() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = GlyphEncoder::new(cfg.clone(), &mut store, "ge", &mut rng).unwrap();
        let stack = random_stack(&cfg, 10);
        let mut swapped = stack.clone();
        let c0 = stack.index_axis(Axis(0), 0).to_owned();
        let c1 = stack.index_axis(Axis(0), 1).to_owned();
        swapped.index_axis_mut(Axis(0), 0).assign(&c1);
        swapped.index_axis_mut(Axis(0), 1).assign(&c0);
        let a = encode_glyphs(&enc, &store, &stack).unwrap();
        let b = encode_glyphs(&enc, &store, &swapped).unwrap();
        let max_diff = (&a.matrix - &b.matrix)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_diff > 1e-6, "encoder ignored channel order");
    }

    #[test]
    fn determinism_is_bit_exact() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let enc = GlyphEncoder::new(cfg.clone(), &mut store, "ge", &mut rng).unwrap();
        let stack = random_stack(&cfg, 11);
        let a = encode_glyphs(&enc, &store, &stack).unwrap();
        let b = encode_glyphs(&enc, &store, &stack).unwrap();
        assert_eq!(a.matrix, b.matrix);
    }

    #[test]
    fn zero_adjoint_gives_zero_grads() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = GlyphEncoder::new(cfg.clone(), &mut store, "ge", &mut rng).unwrap();
        let stack = random_stack(&cfg, 12);
        let mut grads = GradBuf::zeros_like(&store);
        let adjoint = Array2::zeros((cfg.n_tokens(), cfg.feat_dim));
        encoder_grad(&enc, &store, &stack, &adjoint, &mut grads).unwrap();
        for id in store.ids() {
            assert!(grads.get(id).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn duplicated_batch_doubles_grads() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let enc = GlyphEncoder::new(cfg.clone(), &mut store, "ge", &mut rng).unwrap();
        let stack = random_stack(&cfg, 13);
        let mut rng2 = ChaCha8Rng::seed_from_u64(14);
        let adjoint = Array2::from_shape_simple_fn((cfg.n_tokens(), cfg.feat_dim), || {
            rng2.gen_range(-1.0..1.0)
        });
        let mut single = GradBuf::zeros_like(&store);
        encoder_grad(&enc, &store, &stack, &adjoint, &mut single).unwrap();
        let mut double = GradBuf::zeros_like(&store);
        encoder_grad(&enc, &store, &stack, &adjoint, &mut double).unwrap();
        encoder_grad(&enc, &store, &stack, &adjoint, &mut double).unwrap();
        for id in store.ids() {
            let s = single.get(id);
            let d = double.get(id);
            for (a, b) in s.iter().zip(d.iter()) {
                assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn encoder_gradcheck_against_finite_differences() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let enc = GlyphEncoder::new(cfg.clone(), &mut store, "ge", &mut rng).unwrap();
        assert!(store.n_scalars() <= 10_000, "{}", store.n_scalars());
        let stack = random_stack(&cfg, 15);
        let mut rng2 = ChaCha8Rng::seed_from_u64(16);
        let r = Array2::from_shape_simple_fn((cfg.n_tokens(), cfg.feat_dim), || {
            rng2.gen_range(-1.0..1.0)
        });
        let mut grads = GradBuf::zeros_like(&store);
        encoder_grad(&enc, &store, &stack, &r, &mut grads).unwrap();
        let loss = |s: &ParamStore| {
            let (y, _) = enc.forward(s, &stack).unwrap();
            (&y * &r).sum()
        };
        let err = check_param_grads(&mut store, &grads, loss, 20, 1e-4, 77);
        assert!(err <= 1e-3, "max rel err {err}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let enc = GlyphEncoder::new(cfg, &mut store, "ge", &mut rng).unwrap();
        let bad = Array3::zeros((3, 8, 16));
        assert!(matches!(
            encode_glyphs(&enc, &store, &bad),
            Err(Error::Shape(_))
        ));
    }
}
