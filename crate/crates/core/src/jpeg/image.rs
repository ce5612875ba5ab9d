use super::JpegError;

/// 8-bit raster, interleaved channels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelImage {
    width: usize,
    height: usize,
    channels: usize,
    samples: Vec<u8>,
}

impl PixelImage {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        samples: Vec<u8>,
    ) -> Result<Self, JpegError> {
        if channels != 1 && channels != 3 {
            return Err(JpegError::Channels(channels));
        }
        if width < 8 || height < 8 {
            return Err(JpegError::TooSmall { width, height });
        }
        if samples.len() != width * height * channels {
            return Err(JpegError::SampleCount {
                expected: width * height * channels,
                actual: samples.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            samples,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self, JpegError> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> &[u8] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<u8> {
        self.samples
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.samples[(y * self.width + x) * self.channels + c]
    }

    /// Copies the `width × height` window whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<Self, JpegError> {
        if x + width > self.width || y + height > self.height {
            return Err(JpegError::CropOutOfBounds {
                x,
                y,
                width,
                height,
                image_width: self.width,
                image_height: self.height,
            });
        }
        let ch = self.channels;
        let mut samples = Vec::with_capacity(width * height * ch);
        for row in y..y + height {
            let start = (row * self.width + x) * ch;
            samples.extend_from_slice(&self.samples[start..start + width * ch]);
        }
        Self::new(width, height, ch, samples)
    }

    /// Largest top-left window whose sides are multiples of 8.
    pub fn crop_to_block_grid(&self) -> Result<Self, JpegError> {
        let w = self.width / 8 * 8;
        let h = self.height / 8 * 8;
        if w == self.width && h == self.height {
            return Ok(self.clone());
        }
        self.crop(0, 0, w, h)
    }

    /// Replicates a single-channel image into three identical channels.
    pub fn to_rgb(&self) -> Self {
        if self.channels == 3 {
            return self.clone();
        }
        let samples = self.samples.iter().flat_map(|&v| [v, v, v]).collect();
        Self {
            width: self.width,
            height: self.height,
            channels: 3,
            samples,
        }
    }
}

/// Offset of the second compression grid relative to the first, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct GridShift {
    dx: u8,
    dy: u8,
}

impl GridShift {
    pub const ALIGNED: GridShift = GridShift { dx: 0, dy: 0 };

    pub fn new(dx: u8, dy: u8) -> Result<Self, JpegError> {
        if dx > 7 || dy > 7 {
            return Err(JpegError::ShiftOutOfRange { dx, dy });
        }
        Ok(Self { dx, dy })
    }

    pub fn dx(&self) -> u8 {
        self.dx
    }

    pub fn dy(&self) -> u8 {
        self.dy
    }

    pub fn is_aligned(&self) -> bool {
        self.dx == 0 && self.dy == 0
    }
}
