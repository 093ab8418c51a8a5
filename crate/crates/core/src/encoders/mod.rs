//! Image and text Transformer encoders and the contrastive objective.

mod contrastive;
mod image;
mod text;
mod tokenizer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use contrastive::{clamp_log_tau, contrastive_loss, Temperature, LOG_TAU, LOG_TAU_RANGE};
pub use image::{
    encode_images, final_norm, image_tokens, init_image_encoder, init_map_pool,
    interpolate_pos_embed, map_pool, patchify, unpatchify, ImageTokens, POS_EMBED,
};
pub use text::{encode_texts, init_text_encoder, text_embeddings, TextEmbedding};
pub use tokenizer::{Vocabulary, EOS, PAD, UNK};

/// Fixed maximum text length, EOS included.
pub const TEXT_MAX_LEN: usize = 16;

/// Whether stochastic layers are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub width: usize,
    pub n_heads: usize,
    pub mlp_dim: usize,
    pub text_depth: usize,
    /// Text width; also the shared embedding width.
    pub text_width: usize,
    pub text_heads: usize,
    pub text_mlp_dim: usize,
    pub text_vocab: usize,
    pub text_max_len: usize,
    pub droplayer_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            depth: 2,
            width: 64,
            n_heads: 4,
            mlp_dim: 128,
            text_depth: 2,
            text_width: 64,
            text_heads: 4,
            text_mlp_dim: 128,
            text_vocab: 0,
            text_max_len: TEXT_MAX_LEN,
            droplayer_rate: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn shared_dim(&self) -> usize {
        self.text_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.channels == 0 {
            return Err(Error::config("image needs at least one channel"));
        }
        for (w, h, what) in [
            (self.width, self.n_heads, "image"),
            (self.text_width, self.text_heads, "text"),
        ] {
            if w == 0 || h == 0 || w % h != 0 {
                return Err(Error::config(format!(
                    "{what} width {w} not divisible by {h} heads"
                )));
            }
        }
        if self.mlp_dim == 0 || self.text_mlp_dim == 0 {
            return Err(Error::config("MLP width must be positive"));
        }
        if self.text_max_len != TEXT_MAX_LEN {
            return Err(Error::config(format!(
                "text_max_len must be {TEXT_MAX_LEN}, got {}",
                self.text_max_len
            )));
        }
        if self.text_vocab < 4 {
            return Err(Error::config(
                "vocabulary must hold the special tokens and a word",
            ));
        }
        if !(0.0..=1.0).contains(&self.droplayer_rate) {
            return Err(Error::config("droplayer_rate must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Every instance needs its own token to be matched to.
    pub fn check_capacity(&self, max_instances: usize) -> Result<()> {
        if max_instances > self.n_tokens() {
            return Err(Error::config(format!(
                "{max_instances} instances exceed {} image tokens",
                self.n_tokens()
            )));
        }
        Ok(())
    }
}
