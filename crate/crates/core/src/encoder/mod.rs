//! Miniature CLIP-style dual encoder: word-level tokenizer, text and vision
//! transformers, and the checkpoint format shared by every trained artifact.

mod checkpoint;
mod config;
mod image;
mod model;
mod train;
mod vocab;

use std::path::Path;

pub use checkpoint::{
    checkpoint_exists, checkpoint_paths, expect_entries, load_checkpoint, save_checkpoint,
    CheckpointManifest, LoadedCheckpoint, ManifestEntry, FORMAT_VERSION,
};
pub use config::DualEncoderConfig;
pub use image::ImageTensor;
pub use model::{
    truncated_normal, BlockLayout, DualEncoder, EncoderVars, TextInput, TextLayout, VisionLayout,
};
pub use train::{
    caption_image_recall, encoder_step, train_encoder, CaptionedImage, EncoderTrainConfig, EncoderTrainOutcome,
};
pub use vocab::{tokenize, TokenSequence, Vocabulary, EOS, PAD, PSEUDO, SOS, UNK};

use crate::error::{Error, Result};
use crate::numerics::Real;

pub const ENCODER_KIND: &str = "dual_encoder";

impl<T: Real> DualEncoder<T> {
    pub fn save(&self, stem: &Path, seed: Option<u64>) -> Result<CheckpointManifest> {
        save_checkpoint(
            stem,
            ENCODER_KIND,
            self.params(),
            serde_json::to_value(self.config())?,
            seed,
        )
    }
}

impl DualEncoder<f32> {
    /// Loads an encoder checkpoint; when `expected` is given, the stored
    /// configuration must equal it.
    pub fn load(stem: &Path, expected: Option<&DualEncoderConfig>) -> Result<(Self, LoadedCheckpoint)> {
        let loaded = load_checkpoint(stem, ENCODER_KIND)?;
        let config: DualEncoderConfig = serde_json::from_value(loaded.manifest.config.clone())
            .map_err(|e| Error::Checkpoint(format!("encoder config snapshot: {e}")))?;
        if let Some(exp) = expected {
            if *exp != config {
                return Err(Error::Checkpoint(format!(
                    "checkpoint config {config:?} does not match the requested {exp:?}"
                )));
            }
        }
        let enc = Self::from_params(config, loaded.params.clone())?;
        Ok((enc, loaded))
    }
}
