use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::error::{Error, Result};

/// Dimensions of the miniature dual encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualEncoderConfig {
    /// Token / patch embedding width.
    pub d: usize,
    /// Width of the emitted features.
    pub d_out: usize,
    pub heads: usize,
    pub text_layers: usize,
    pub vision_layers: usize,
    /// Text positional capacity, including `[SOS]` and `[EOS]`.
    pub max_len: usize,
    /// Images are square, `image_size × image_size`.
    pub image_size: usize,
    pub patch_size: usize,
    pub vocab_size: usize,
    pub mlp_ratio: usize,
    /// Largest prompt count accepted by the prompted forward passes.
    pub max_prompts: usize,
}

impl Default for DualEncoderConfig {
    fn default() -> Self {
        Self {
            d: 32,
            d_out: 32,
            heads: 4,
            text_layers: 2,
            vision_layers: 2,
            max_len: 32,
            image_size: 32,
            patch_size: 8,
            vocab_size: Vocabulary::synthetic().len(),
            mlp_ratio: 4,
            max_prompts: 32,
        }
    }
}

impl DualEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d == 0 || self.d_out == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return fail("encoder widths and head count must be positive".into());
        }
        if self.d % self.heads != 0 {
            return fail(format!("d = {} is not divisible by heads = {}", self.d, self.heads));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.max_len < 3 {
            return fail(format!("max_len = {} < 3", self.max_len));
        }
        if self.vocab_size < 5 {
            return fail(format!("vocab_size = {} cannot hold the reserved tokens", self.vocab_size));
        }
        Ok(())
    }

    /// Patches per image (M).
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Values in one flattened patch.
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn hidden(&self) -> usize {
        self.d * self.mlp_ratio
    }
}
