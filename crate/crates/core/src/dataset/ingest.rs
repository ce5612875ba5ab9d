//! Loading lossless source images.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageFormat, ImageReader, RgbImage};

use super::{DatasetError, PATCH_SIZE};
use crate::jpeg::PixelImage;

/// Smallest accepted source side in pixels.
pub const MIN_SOURCE_SIDE: usize = 72;

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Decodes a PNG or TIFF into 8-bit RGB.
///
/// Grayscale sources are replicated to three channels and 16-bit sources are
/// scaled to 8 bits. Any other container, including JPEG, is rejected because
/// the source must not carry its own compression history.
pub fn ingest_image(path: &Path) -> Result<PixelImage, DatasetError> {
    let shown = || path.display().to_string();
    let reader = ImageReader::open(path)
        .map_err(|e| io_err(path, e))?
        .with_guessed_format()
        .map_err(|e| io_err(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png | ImageFormat::Tiff) => {}
        Some(other) => {
            return Err(DatasetError::Unsupported {
                path: shown(),
                format: format!("{other:?}"),
            })
        }
        None => {
            return Err(DatasetError::Unsupported {
                path: shown(),
                format: "unknown".into(),
            })
        }
    }
    let decoded = reader.decode().map_err(|e| DatasetError::Decode {
        path: shown(),
        message: e.to_string(),
    })?;
    let rgb: RgbImage = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w < MIN_SOURCE_SIDE || h < MIN_SOURCE_SIDE {
        return Err(DatasetError::TooSmall {
            path: shown(),
            width: w,
            height: h,
            min: MIN_SOURCE_SIDE,
        });
    }
    Ok(PixelImage::new(w, h, 3, rgb.into_raw())?)
}

/// Loads a pre-cropped 64×64 patch from a PNG as interleaved RGB samples.
pub fn read_patch_png(path: &Path) -> Result<Vec<u8>, DatasetError> {
    let shown = || path.display().to_string();
    let decoded = ImageReader::open(path)
        .map_err(|e| io_err(path, e))?
        .with_guessed_format()
        .map_err(|e| io_err(path, e))?
        .decode()
        .map_err(|e| DatasetError::Decode {
            path: shown(),
            message: e.to_string(),
        })?;
    let rgb = decoded.to_rgb8();
    if (rgb.width() as usize, rgb.height() as usize) != (PATCH_SIZE, PATCH_SIZE) {
        return Err(DatasetError::Decode {
            path: shown(),
            message: format!(
                "patch is {}×{}, expected {PATCH_SIZE}×{PATCH_SIZE}",
                rgb.width(),
                rgb.height()
            ),
        });
    }
    Ok(rgb.into_raw())
}

/// Image files directly inside `dir` (by extension), sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file()
            && matches!(
                ext.as_deref(),
                Some("png" | "tif" | "tiff" | "jpg" | "jpeg" | "webp")
            )
        {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Writes an RGB or grayscale image as PNG.
pub fn save_png(img: &PixelImage, path: &Path) -> Result<(), DatasetError> {
    let color = if img.channels() == 3 {
        image::ExtendedColorType::Rgb8
    } else {
        image::ExtendedColorType::L8
    };
    image::save_buffer_with_format(
        path,
        img.samples(),
        img.width() as u32,
        img.height() as u32,
        color,
        ImageFormat::Png,
    )
    .map_err(|e| DatasetError::Decode {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}
