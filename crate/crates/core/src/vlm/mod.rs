//! Miniature vision-language model: patch encoder, projector, byte decoder.

mod config;
mod model;
mod ops;
mod tokenizer;

pub use config::VlmConfig;
pub use model::{argmax, is_norm_or_bias, patchify, Bound, Encoded, Partition, VisualInput, Vlm};
pub use ops::{
    assemble_tiles, pixel_shuffle, pixel_shuffle_index, pixel_unshuffle, resize_pad, tile_assembly_index,
    tile_image, Affine, Padded, Tiling,
};
pub use tokenizer::{assemble_prompt, detokenize, tokenize, TokenSequence, BOS, EOS, IMG, PAD, VOCAB};
