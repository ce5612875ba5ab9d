//! Quantization matrices, quality-factor scaling and zig-zag ordering.

use super::JpegError;

/// Reference luminance table (JPEG Annex K), natural row-major order.
pub const BASE_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Reference chrominance table (JPEG Annex K), natural row-major order.
pub const BASE_CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// `ZIGZAG[i]` is the row-major position of the i-th coefficient in scan order.
pub const ZIGZAG: [usize; 64] = [
    0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5, 12, 19, 26, 33, 40, 48, 41, 34, 27,
    20, 13, 6, 7, 14, 21, 28, 35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51, 58,
    59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63,
];

/// Default number of leading zig-zag steps that are estimated.
pub const DEFAULT_NC: usize = 15;

/// Which reference table a quality factor scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    Luma,
    Chroma,
}

/// An 8×8 matrix of quantization steps in natural (row-major) order.
///
/// Every step lies in `[1, 255]`; index 0 is the DC step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantMatrix {
    steps: [u16; 64],
}

impl QuantMatrix {
    pub fn new(steps: [u16; 64]) -> Result<Self, JpegError> {
        if let Some((index, &value)) = steps
            .iter()
            .enumerate()
            .find(|(_, &s)| !(1..=255).contains(&s))
        {
            return Err(JpegError::StepOutOfRange { index, value });
        }
        Ok(Self { steps })
    }

    /// All steps equal to one: quantization reduces to rounding.
    pub fn ones() -> Self {
        Self { steps: [1; 64] }
    }

    pub fn steps(&self) -> &[u16; 64] {
        &self.steps
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.steps[row * 8 + col]
    }

    pub fn dc_step(&self) -> u16 {
        self.steps[0]
    }
}

/// The 64 quantization steps taken in zig-zag scan order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ZigZagVector {
    q: [u16; 64],
}

impl ZigZagVector {
    pub fn as_array(&self) -> &[u16; 64] {
        &self.q
    }

    /// First `nc` entries, the regression label.
    pub fn truncate(&self, nc: usize) -> Result<QTarget, JpegError> {
        QTarget::new(self.q[..nc.min(64)].to_vec(), nc)
    }
}

/// First `nc` zig-zag quantization steps of a matrix.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QTarget {
    values: Vec<u16>,
}

impl QTarget {
    pub fn new(values: Vec<u16>, nc: usize) -> Result<Self, JpegError> {
        if !(1..=64).contains(&nc) {
            return Err(JpegError::InvalidNc(nc));
        }
        if values.len() != nc {
            return Err(JpegError::InvalidNc(values.len()));
        }
        Ok(Self { values })
    }

    /// Label for a quality factor: leading luma steps in zig-zag order.
    pub fn for_quality(qf: u8, nc: usize) -> Result<Self, JpegError> {
        zigzag(&qf_to_table(qf, Channel::Luma)?).truncate(nc)
    }

    pub fn nc(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[u16] {
        &self.values
    }
}

/// Scales a reference table by an IJG quality factor.
///
/// `S = 5000 / qf` (integer division) below 50 and `200 - 2 qf` otherwise; each
/// entry is `floor((base * S + 50) / 100)` clamped to `[1, 255]`.
pub fn qf_to_table(qf: u8, channel: Channel) -> Result<QuantMatrix, JpegError> {
    if !(1..=100).contains(&qf) {
        return Err(JpegError::QualityOutOfRange(qf as i64));
    }
    let qf = u32::from(qf);
    let scale = if qf < 50 { 5000 / qf } else { 200 - 2 * qf };
    let base = match channel {
        Channel::Luma => &BASE_LUMA,
        Channel::Chroma => &BASE_CHROMA,
    };
    let mut steps = [0u16; 64];
    for (dst, &b) in steps.iter_mut().zip(base.iter()) {
        *dst = ((u32::from(b) * scale + 50) / 100).clamp(1, 255) as u16;
    }
    Ok(QuantMatrix { steps })
}

pub fn zigzag(q: &QuantMatrix) -> ZigZagVector {
    let mut out = [0u16; 64];
    for (i, &pos) in ZIGZAG.iter().enumerate() {
        out[i] = q.steps[pos];
    }
    ZigZagVector { q: out }
}

pub fn inverse_zigzag(v: &ZigZagVector) -> QuantMatrix {
    let mut steps = [0u16; 64];
    for (i, &pos) in ZIGZAG.iter().enumerate() {
        steps[pos] = v.q[i];
    }
    QuantMatrix { steps }
}

impl From<QuantMatrix> for ZigZagVector {
    fn from(q: QuantMatrix) -> Self {
        zigzag(&q)
    }
}

/// Luma and chroma tables used together for one compression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantTables {
    pub luma: QuantMatrix,
    pub chroma: QuantMatrix,
}

impl QuantTables {
    pub fn from_quality(qf: u8) -> Result<Self, JpegError> {
        Ok(Self {
            luma: qf_to_table(qf, Channel::Luma)?,
            chroma: qf_to_table(qf, Channel::Chroma)?,
        })
    }

    /// Same matrix for every channel.
    pub fn uniform(q: QuantMatrix) -> Self {
        Self { luma: q, chroma: q }
    }
}
