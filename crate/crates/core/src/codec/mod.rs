//! RGBA layer data model, compositing, the patchify codec and the unified
//! token sequence.

mod image;
mod layout;
mod patch;
mod pngio;
mod rope;

pub use image::{
    composite_layers, gray_background_convert, opacity, BoundingBox, LayeredScene, RgbaImage,
    COMPOSITE_TOL,
};
pub use layout::{build_sequence, Role, Segment, SequenceTokens, TokenLayout};
pub use patch::{
    box_patch_indices, grid_dims, patchify, select_tokens, token_dim, unpatchify,
};
pub use pngio::{decode_png, encode_png, encode_png_rgb, from_byte, quantize, read_png, to_byte, write_png};
pub use rope::{apply_rope, rope_angles, rope_table, RopeSplit};
