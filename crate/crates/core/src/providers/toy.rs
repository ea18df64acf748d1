//! Deterministic stand-ins for the frozen image and text encoders.
//!
//! Image encoders cut a 64x64 image into an 8x8 grid of 8x8 patches and map each
//! flattened patch (channel-major: `c * 64 + y * 8 + x`) through a fixed
//! Gaussian matrix of shape 64x192, entries scaled by `1/sqrt(192)`.
//! The text encoder is a bag of hashed token vectors.

use crate::error::{LdagError, Result};
use crate::image::Image;
use crate::providers::{ClipEncoding, SamEncoding, TextEmbedding, TextRole};
use crate::rng::{derive_seed, fnv1a64, SplitMix64};
use crate::tensor::{FeatureGrid, Source, Tensor};

pub const IMAGE_SIZE: usize = 64;
pub const PATCH: usize = 8;
pub const GRID: usize = IMAGE_SIZE / PATCH;
pub const PATCH_LEN: usize = 3 * PATCH * PATCH;
pub const EMBED_DIM: usize = 64;

const CLIP_STREAM: u64 = 0xC11F;
const SAM_STREAM: u64 = 0x5A3;

/// A frozen patch-embedding encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyImageEncoder {
    weights: Tensor,
}

impl ToyImageEncoder {
    fn from_stream(seed: u64, stream: u64) -> Self {
        let mut rng = SplitMix64::new(derive_seed(seed, stream));
        let scale = 1.0 / (PATCH_LEN as f64).sqrt();
        let weights = Tensor::new(
            vec![EMBED_DIM, PATCH_LEN],
            rng.gaussian_vec(EMBED_DIM * PATCH_LEN, scale),
        )
        .expect("fixed extents");
        Self { weights }
    }

    pub fn clip(seed: u64) -> Self {
        Self::from_stream(seed, CLIP_STREAM)
    }

    pub fn sam(seed: u64) -> Self {
        Self::from_stream(seed, SAM_STREAM)
    }

    /// The `64 x 192` projection matrix.
    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn encode(&self, image: &Image) -> Result<FeatureGrid> {
        if image.width() != IMAGE_SIZE || image.height() != IMAGE_SIZE {
            return Err(LdagError::Dimension(format!(
                "toy encoders take {IMAGE_SIZE}x{IMAGE_SIZE} images, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        let w = self.weights.data();
        let plane = GRID * GRID;
        let mut out = vec![0f32; EMBED_DIM * plane];
        let mut patch = [0f64; PATCH_LEN];
        for gy in 0..GRID {
            for gx in 0..GRID {
                for c in 0..3 {
                    for py in 0..PATCH {
                        for px in 0..PATCH {
                            patch[c * PATCH * PATCH + py * PATCH + px] =
                                f64::from(image.unit(c, gx * PATCH + px, gy * PATCH + py));
                        }
                    }
                }
                for d in 0..EMBED_DIM {
                    let row = &w[d * PATCH_LEN..(d + 1) * PATCH_LEN];
                    let v: f64 = row.iter().zip(&patch).map(|(&a, &b)| f64::from(a) * b).sum();
                    out[d * plane + gy * GRID + gx] = v as f32;
                }
            }
        }
        let tensor = Tensor::new(vec![EMBED_DIM, GRID, GRID], out)?;
        FeatureGrid::new(tensor, Source::Toy)
    }
}

pub fn toy_encode_image_clip(image: &Image, seed: u64) -> Result<ClipEncoding> {
    ClipEncoding::from_tokens(ToyImageEncoder::clip(seed).encode(image)?)
}

pub fn toy_encode_image_sam(image: &Image, seed: u64) -> Result<SamEncoding> {
    SamEncoding::new(ToyImageEncoder::sam(seed).encode(image)?)
}

fn tokens(prompt: &str) -> Vec<String> {
    prompt
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

fn token_vector(token: &str, seed: u64) -> Vec<f64> {
    let mut rng = SplitMix64::new(fnv1a64(token.as_bytes()) ^ seed);
    let v: Vec<f64> = (0..EMBED_DIM).map(|_| rng.next_gaussian()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Bag-of-words text embedding: unit token vectors summed and renormalized.
pub fn toy_encode_text(prompt: &str, seed: u64) -> Result<TextEmbedding> {
    let toks = tokens(prompt);
    if toks.is_empty() {
        return Err(LdagError::Degenerate(format!(
            "prompt {prompt:?} has no alphanumeric tokens"
        )));
    }
    let mut sum = vec![0f64; EMBED_DIM];
    for t in &toks {
        sum.iter_mut()
            .zip(token_vector(t, seed))
            .for_each(|(s, v)| *s += v);
    }
    let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(LdagError::Degenerate(format!("prompt {prompt:?} embeds to zero")));
    }
    let vector = Tensor::vector(sum.into_iter().map(|x| (x / norm) as f32).collect());
    Ok(TextEmbedding {
        vector,
        prompt: prompt.to_owned(),
        role: TextRole::ForegroundAttribute,
        source: Source::Toy,
    })
}

/// The three frozen toy encoders, built once from their seeds.
#[derive(Clone, Debug)]
pub struct ToyEncoders {
    pub clip: ToyImageEncoder,
    pub sam: ToyImageEncoder,
    pub text_seed: u64,
}

impl ToyEncoders {
    pub fn new(image_seed: u64, text_seed: u64) -> Self {
        Self {
            clip: ToyImageEncoder::clip(image_seed),
            sam: ToyImageEncoder::sam(image_seed),
            text_seed,
        }
    }

    pub fn encode_clip(&self, image: &Image) -> Result<ClipEncoding> {
        ClipEncoding::from_tokens(self.clip.encode(image)?)
    }

    pub fn encode_sam(&self, image: &Image) -> Result<SamEncoding> {
        SamEncoding::new(self.sam.encode(image)?)
    }

    pub fn encode_text(&self, prompt: &str) -> Result<TextEmbedding> {
        toy_encode_text(prompt, self.text_seed)
    }

    /// SHA-256 over both image projection matrices.
    pub fn checksum(&self) -> String {
        crate::checksum::digest([self.clip.weights(), self.sam.weights()])
    }
}
