//! Region-centric scene-text instance synthesis.
//!
//! The crate implements the full pipeline: quadrilateral crop geometry,
//! word- and character-level glyph conditioning, a trainable latent
//! autoencoder and glyph-conditioned diffusion model, anagram-based label
//! expansion, recognizer-based quality filtering, and a procedural toy
//! corpus with an exact template-matching recognizer for end-to-end runs
//! on a single desktop core.

pub mod anagram;
pub mod conditioning;
pub mod diffusion;
pub mod error;
pub mod font;
pub mod geometry;
pub mod glyph_encoder;
pub mod image;
pub mod latent_codec;
pub mod metrics;
pub mod nn;
pub mod seeds;
pub mod text;
pub mod toy_corpus;

pub use error::{Error, Result};
