//! Baseline JPEG block-transform arithmetic: DCT, quantization, quality-factor
//! tables, zig-zag order and pixel-domain compression cycles.

mod codec;
pub mod dct;
mod image;
mod tables;

use thiserror::Error;

pub use codec::{double_compress, jpeg_cycle};
pub use dct::{dct2d_8x8, dequantize, idct2d_8x8, quantize, Block, Levels};
pub use image::{GridShift, PixelImage};
pub use tables::{
    inverse_zigzag, qf_to_table, zigzag, Channel, QTarget, QuantMatrix, QuantTables, ZigZagVector,
    BASE_CHROMA, BASE_LUMA, DEFAULT_NC, ZIGZAG,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum JpegError {
    #[error("quality factor {0} outside [1, 100]")]
    QualityOutOfRange(i64),
    #[error("quantization step {value} at index {index} outside [1, 255]")]
    StepOutOfRange { index: usize, value: u16 },
    #[error("nc = {0} outside [1, 64]")]
    InvalidNc(usize),
    #[error("unsupported channel count {0}, expected 1 or 3")]
    Channels(usize),
    #[error("image {width}x{height} is too small")]
    TooSmall { width: usize, height: usize },
    #[error("expected {expected} samples, got {actual}")]
    SampleCount { expected: usize, actual: usize },
    #[error("image {width}x{height} is not a multiple of 8 in both dimensions")]
    NotBlockAligned { width: usize, height: usize },
    #[error("grid shift ({dx}, {dy}) outside [0, 7]")]
    ShiftOutOfRange { dx: u8, dy: u8 },
    #[error("crop {width}x{height}+{x}+{y} exceeds {image_width}x{image_height}")]
    CropOutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
        image_width: usize,
        image_height: usize,
    },
}
