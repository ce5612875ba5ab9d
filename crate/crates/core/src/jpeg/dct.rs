//! Orthonormal 8×8 type-II DCT and scalar quantization.
//!
//! Blocks are row-major `[f64; 64]`, index `row * 8 + col`.

use std::sync::OnceLock;

use super::QuantMatrix;

pub type Block = [f64; 64];
pub type Levels = [i32; 64];

/// `basis[u * 8 + x] = a(u) cos((2x + 1) u pi / 16)`.
fn basis() -> &'static [f64; 64] {
    static BASIS: OnceLock<[f64; 64]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut c = [0.0; 64];
        for u in 0..8 {
            let alpha = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
            for x in 0..8 {
                c[u * 8 + x] =
                    alpha * (((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI) / 16.0).cos();
            }
        }
        c
    })
}

/// Forward DCT of a level-shifted block: `C * B * C^T`.
pub fn dct2d_8x8(block: &Block) -> Block {
    let c = basis();
    let mut tmp = [0.0; 64];
    // rows: tmp[x][v] = sum_y B[x][y] C[v][y]
    for x in 0..8 {
        for v in 0..8 {
            let mut acc = 0.0;
            for y in 0..8 {
                acc += block[x * 8 + y] * c[v * 8 + y];
            }
            tmp[x * 8 + v] = acc;
        }
    }
    let mut out = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            let mut acc = 0.0;
            for x in 0..8 {
                acc += c[u * 8 + x] * tmp[x * 8 + v];
            }
            out[u * 8 + v] = acc;
        }
    }
    out
}

/// Inverse DCT: `C^T * F * C`.
pub fn idct2d_8x8(coeffs: &Block) -> Block {
    let c = basis();
    let mut tmp = [0.0; 64];
    // tmp[u][y] = sum_v F[u][v] C[v][y]
    for u in 0..8 {
        for y in 0..8 {
            let mut acc = 0.0;
            for v in 0..8 {
                acc += coeffs[u * 8 + v] * c[v * 8 + y];
            }
            tmp[u * 8 + y] = acc;
        }
    }
    let mut out = [0.0; 64];
    for x in 0..8 {
        for y in 0..8 {
            let mut acc = 0.0;
            for u in 0..8 {
                acc += c[u * 8 + x] * tmp[u * 8 + y];
            }
            out[x * 8 + y] = acc;
        }
    }
    out
}

/// `round(coeff / step)`, halves rounded away from zero.
pub fn quantize(coeffs: &Block, q: &QuantMatrix) -> Levels {
    let mut out = [0i32; 64];
    for ((dst, &c), &s) in out.iter_mut().zip(coeffs.iter()).zip(q.steps().iter()) {
        // f64::round rounds half away from zero
        *dst = (c / f64::from(s)).round() as i32;
    }
    out
}

pub fn dequantize(levels: &Levels, q: &QuantMatrix) -> Block {
    let mut out = [0.0; 64];
    for ((dst, &l), &s) in out.iter_mut().zip(levels.iter()).zip(q.steps().iter()) {
        *dst = f64::from(l) * f64::from(s);
    }
    out
}
