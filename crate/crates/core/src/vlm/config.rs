use serde::{Deserialize, Serialize};

use super::tokenizer::VOCAB;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VlmConfig {
    pub img_px: usize,
    pub patch_px: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_mult: usize,
    pub vocab: usize,
    pub max_seq: usize,
    /// Pixel-shuffle factor applied before the projector; 1 disables it.
    pub pixel_shuffle_r: usize,
    /// Tile side for high-resolution inputs; 0 disables tiling.
    pub tile_px: usize,
}

impl Default for VlmConfig {
    fn default() -> Self {
        Self {
            img_px: 64,
            patch_px: 8,
            d_model: 64,
            n_heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn_mult: 4,
            vocab: VOCAB,
            max_seq: 256,
            pixel_shuffle_r: 1,
            tile_px: 0,
        }
    }
}

impl VlmConfig {
    /// Side of the encoder's token grid.
    pub fn grid(&self) -> usize {
        self.img_px / self.patch_px
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Visual tokens per encoded view after pixel shuffle.
    pub fn tokens_per_view(&self) -> usize {
        let s = self.grid() / self.pixel_shuffle_r;
        s * s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("img_px", self.img_px),
            ("patch_px", self.patch_px),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ffn_mult", self.ffn_mult),
            ("max_seq", self.max_seq),
            ("pixel_shuffle_r", self.pixel_shuffle_r),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        let divides = [
            ("img_px", self.img_px, self.patch_px),
            ("d_model", self.d_model, self.n_heads),
            ("grid", self.grid(), self.pixel_shuffle_r),
        ];
        for (dim, value, by) in divides {
            if value % by != 0 {
                return Err(Error::NotDivisible { dim, value, by });
            }
        }
        if self.vocab != VOCAB {
            return Err(Error::config(format!("vocab must be {VOCAB} for the byte tokenizer")));
        }
        Ok(())
    }
}
