//! Frozen encoder outputs: seeded toy encoders and the LDAGTNSR interchange files.

mod format;
mod toy;

use serde::{Deserialize, Serialize};

pub use format::{
    decode_tensor, encode_tensor, load_feature_file, save_feature_file, FeatureFile, Metadata,
    FORMAT_VERSION, MAGIC,
};
pub use toy::{
    toy_encode_image_clip, toy_encode_image_sam, toy_encode_text, ToyEncoders, ToyImageEncoder,
    EMBED_DIM, GRID, IMAGE_SIZE, PATCH, PATCH_LEN,
};

use crate::error::{LdagError, Result};
use crate::tensor::{FeatureGrid, Source, Tensor};

/// Image-text encoder output for one image: patch tokens (no class token) and
/// their spatial mean.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipEncoding {
    pub tokens: FeatureGrid,
    pub pooled: Tensor,
}

impl ClipEncoding {
    /// Build from tokens, pooling them spatially.
    pub fn from_tokens(tokens: FeatureGrid) -> Result<Self> {
        if tokens.channels() < 2 || tokens.height() == 0 || tokens.width() == 0 {
            return Err(LdagError::Dimension(format!(
                "clip tokens must be D>=2 x H>=1 x W>=1, got {:?}",
                tokens.tensor().shape()
            )));
        }
        let pooled = tokens.spatial_mean();
        Ok(Self { tokens, pooled })
    }

    pub fn source(&self) -> Source {
        self.tokens.source
    }
}

/// Segmentation encoder features for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SamEncoding {
    pub features: FeatureGrid,
}

impl SamEncoding {
    pub fn new(features: FeatureGrid) -> Result<Self> {
        if features.channels() < 2 || features.height() == 0 || features.width() == 0 {
            return Err(LdagError::Dimension(format!(
                "sam features must be Ds>=2 x H>=1 x W>=1, got {:?}",
                features.tensor().shape()
            )));
        }
        Ok(Self { features })
    }

    pub fn source(&self) -> Source {
        self.features.source
    }

    /// Same extents, all zeros; stands in for a removed support image.
    pub fn zeroed(&self) -> Self {
        let t = Tensor::zeros(self.features.tensor().shape().to_vec());
        Self {
            features: FeatureGrid::new(t, self.features.source).expect("rank 3"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextRole {
    ForegroundAttribute,
    ForegroundTemplate,
    Background,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub vector: Tensor,
    pub prompt: String,
    pub role: TextRole,
    pub source: Source,
}

impl TextEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.numel()
    }

    pub fn with_role(mut self, role: TextRole) -> Self {
        self.role = role;
        self
    }
}
