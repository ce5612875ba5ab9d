//! Pixel-domain JPEG compression cycles (no entropy coding).
//!
//! Color images go through full-range JFIF YCbCr at 4:4:4. Every plane is
//! level-shifted, transformed, quantized, dequantized, inverse transformed,
//! clamped to `[0, 255]` and rounded.

use super::dct::{dct2d_8x8, dequantize, idct2d_8x8, quantize, Block};
use super::{GridShift, JpegError, PixelImage, QuantMatrix, QuantTables};

fn clamp_round(v: f64) -> f64 {
    v.clamp(0.0, 255.0).round()
}

/// RGB samples to three planar Y, Cb, Cr planes rounded to 8-bit levels.
fn rgb_to_ycbcr(img: &PixelImage) -> [Vec<f64>; 3] {
    let n = img.width() * img.height();
    let mut planes = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for (i, px) in img.samples().chunks_exact(3).enumerate() {
        let (r, g, b) = (f64::from(px[0]), f64::from(px[1]), f64::from(px[2]));
        planes[0][i] = clamp_round(0.299 * r + 0.587 * g + 0.114 * b);
        planes[1][i] = clamp_round(-0.168_736 * r - 0.331_264 * g + 0.5 * b + 128.0);
        planes[2][i] = clamp_round(0.5 * r - 0.418_688 * g - 0.081_312 * b + 128.0);
    }
    planes
}

fn ycbcr_to_rgb(planes: &[Vec<f64>; 3], out: &mut [u8]) {
    for (i, px) in out.chunks_exact_mut(3).enumerate() {
        let y = planes[0][i];
        let cb = planes[1][i] - 128.0;
        let cr = planes[2][i] - 128.0;
        px[0] = clamp_round(y + 1.402 * cr) as u8;
        px[1] = clamp_round(y - 0.344_136 * cb - 0.714_136 * cr) as u8;
        px[2] = clamp_round(y + 1.772 * cb) as u8;
    }
}

/// Compresses and decodes one plane in place. Dimensions are multiples of 8.
fn cycle_plane(plane: &mut [f64], width: usize, height: usize, q: &QuantMatrix) {
    let mut block: Block = [0.0; 64];
    for by in (0..height).step_by(8) {
        for bx in (0..width).step_by(8) {
            for r in 0..8 {
                for c in 0..8 {
                    block[r * 8 + c] = plane[(by + r) * width + bx + c] - 128.0;
                }
            }
            let levels = quantize(&dct2d_8x8(&block), q);
            let rec = idct2d_8x8(&dequantize(&levels, q));
            for r in 0..8 {
                for c in 0..8 {
                    plane[(by + r) * width + bx + c] = clamp_round(rec[r * 8 + c] + 128.0);
                }
            }
        }
    }
}

/// One compression/decompression cycle with the given tables.
pub fn jpeg_cycle(img: &PixelImage, q: &QuantTables) -> Result<PixelImage, JpegError> {
    let (w, h) = (img.width(), img.height());
    if w % 8 != 0 || h % 8 != 0 {
        return Err(JpegError::NotBlockAligned {
            width: w,
            height: h,
        });
    }
    match img.channels() {
        1 => {
            let mut plane: Vec<f64> = img.samples().iter().map(|&v| f64::from(v)).collect();
            cycle_plane(&mut plane, w, h, &q.luma);
            PixelImage::new(w, h, 1, plane.into_iter().map(|v| v as u8).collect())
        }
        _ => {
            let mut planes = rgb_to_ycbcr(img);
            cycle_plane(&mut planes[0], w, h, &q.luma);
            cycle_plane(&mut planes[1], w, h, &q.chroma);
            cycle_plane(&mut planes[2], w, h, &q.chroma);
            let mut out = vec![0u8; w * h * 3];
            ycbcr_to_rgb(&planes, &mut out);
            PixelImage::new(w, h, 3, out)
        }
    }
}

/// Compress with `q1`, drop `shift` columns/rows from the top-left, trim the
/// right and bottom edges back to the 8-pixel grid, then compress with `q2`.
pub fn double_compress(
    img: &PixelImage,
    q1: &QuantTables,
    q2: &QuantTables,
    shift: GridShift,
) -> Result<PixelImage, JpegError> {
    let first = jpeg_cycle(img, q1)?;
    let (dx, dy) = (usize::from(shift.dx()), usize::from(shift.dy()));
    let w = first.width().saturating_sub(dx) / 8 * 8;
    let h = first.height().saturating_sub(dy) / 8 * 8;
    if w < 8 || h < 8 {
        return Err(JpegError::TooSmall {
            width: first.width().saturating_sub(dx),
            height: first.height().saturating_sub(dy),
        });
    }
    let shifted = first.crop(dx, dy, w, h)?;
    jpeg_cycle(&shifted, q2)
}
