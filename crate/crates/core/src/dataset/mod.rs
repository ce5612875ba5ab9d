//! Labelled double-compressed patches.
//!
//! Each source image is compressed once per first-pass quality factor, shifted
//! by a random grid offset, recompressed at the fixed second quality, and cut
//! into 64×64×3 patches at random positions. Labels are the leading zig-zag
//! luma steps of the first-pass table.

mod ingest;
mod shard;
pub mod synthetic;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::jpeg::{double_compress, GridShift, JpegError, PixelImage, QTarget, QuantTables};

pub use ingest::{ingest_image, list_images, read_patch_png, save_png, MIN_SOURCE_SIDE};
pub use shard::{read_shard, read_shards, write_shard, ShardHeader, SHARD_MAGIC, SHARD_VERSION};

pub const PATCH_SIZE: usize = 64;
pub const PATCH_CHANNELS: usize = 3;
pub const PATCH_LEN: usize = PATCH_SIZE * PATCH_SIZE * PATCH_CHANNELS;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Jpeg(#[from] JpegError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {message}")]
    Decode { path: String, message: String },
    #[error("{path}: {format} is not a lossless source format")]
    Unsupported { path: String, format: String },
    #[error("{path}: image {width}x{height} too small (need at least {min}x{min})")]
    TooSmall {
        path: String,
        width: usize,
        height: usize,
        min: usize,
    },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("refusing to write an empty shard")]
    EmptyShard,
    #[error("corrupt shard: {0}")]
    Corrupt(String),
    #[error("shard version {found} unsupported (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("invalid record: {0}")]
    Record(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DatasetError::Manifest(format!("unknown split {other:?}"))),
        }
    }
}

/// Generation parameters for one dataset split.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub qf2: u8,
    pub qf1_grid: Vec<u8>,
    /// Patches per (image, qf1) in the train and validation splits.
    pub patches_per_image_cap: usize,
    /// Patches per (image, qf1) in the test split.
    pub patches_per_image_test: usize,
    pub seed: u64,
    pub nc: usize,
}

impl DatasetManifest {
    pub fn new(split: Split, qf2: u8, qf1_grid: Vec<u8>, seed: u64) -> Self {
        Self {
            split,
            qf2,
            qf1_grid,
            patches_per_image_cap: 100,
            patches_per_image_test: 5,
            seed,
            nc: crate::jpeg::DEFAULT_NC,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::Manifest(m));
        if self.qf1_grid.is_empty() {
            return bad("qf1 grid is empty".into());
        }
        for &q in self.qf1_grid.iter().chain(std::iter::once(&self.qf2)) {
            if !(1..=100).contains(&q) {
                return bad(format!("quality factor {q} outside [1, 100]"));
            }
        }
        if self.patches_per_image_cap == 0 || self.patches_per_image_test == 0 {
            return bad("patch caps must be at least 1".into());
        }
        if !(1..=64).contains(&self.nc) {
            return bad(format!("nc = {} outside [1, 64]", self.nc));
        }
        Ok(())
    }

    /// Patches drawn per (image, qf1) for this split.
    pub fn patches_per_image(&self) -> usize {
        match self.split {
            Split::Test => self.patches_per_image_test,
            Split::Train | Split::Val => self.patches_per_image_cap,
        }
    }
}

/// One 64×64×3 patch (interleaved RGB, row-major) with its label and history.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchRecord {
    pub pixels: Vec<u8>,
    pub label: QTarget,
    pub qf1: u8,
    pub qf2: u8,
    pub shift: GridShift,
    pub source_id: String,
}

impl PatchRecord {
    pub fn is_aligned(&self) -> bool {
        self.shift.is_aligned()
    }

    pub fn nc(&self) -> usize {
        self.label.nc()
    }

    /// Checks that the label equals the leading luma steps of `qf1`.
    pub fn audit_label(&self) -> Result<(), DatasetError> {
        let expected = QTarget::for_quality(self.qf1, self.label.nc())?;
        if expected != self.label {
            return Err(DatasetError::Record(format!(
                "label {:?} does not match qf1 {}",
                self.label.values(),
                self.qf1
            )));
        }
        Ok(())
    }
}

/// Patches from one source image, following `manifest`.
///
/// For every first-pass quality a grid shift is drawn uniformly from
/// `[0, 7]^2`, the whole image is double compressed, and up to
/// [`DatasetManifest::patches_per_image`] distinct patch origins are drawn
/// uniformly over all pixel positions.
pub fn generate_patches(
    img: &PixelImage,
    source_id: &str,
    manifest: &DatasetManifest,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PatchRecord>, DatasetError> {
    manifest.validate()?;
    let img = img.to_rgb().crop_to_block_grid()?;
    let q2 = QuantTables::from_quality(manifest.qf2)?;
    let per_image = manifest.patches_per_image();
    let mut records = Vec::new();
    for &qf1 in &manifest.qf1_grid {
        let shift = GridShift::new(rng.random_range(0..8), rng.random_range(0..8))?;
        let q1 = QuantTables::from_quality(qf1)?;
        let label = QTarget::for_quality(qf1, manifest.nc)?;
        let doubled = double_compress(&img, &q1, &q2, shift)?;
        if doubled.width() < PATCH_SIZE || doubled.height() < PATCH_SIZE {
            return Err(DatasetError::TooSmall {
                path: source_id.to_string(),
                width: doubled.width(),
                height: doubled.height(),
                min: PATCH_SIZE,
            });
        }
        let span_x = doubled.width() - PATCH_SIZE + 1;
        let span_y = doubled.height() - PATCH_SIZE + 1;
        let positions = span_x * span_y;
        for idx in sample(rng, positions, per_image.min(positions)) {
            let (x, y) = (idx % span_x, idx / span_x);
            let patch = doubled.crop(x, y, PATCH_SIZE, PATCH_SIZE)?;
            records.push(PatchRecord {
                pixels: patch.into_samples(),
                label: label.clone(),
                qf1,
                qf2: manifest.qf2,
                shift,
                source_id: source_id.to_string(),
            });
        }
    }
    Ok(records)
}

/// Patches from many images. Image `i` uses ChaCha stream `i` of the manifest
/// seed, so output does not depend on thread scheduling.
pub fn generate_dataset(
    images: &[(String, PixelImage)],
    manifest: &DatasetManifest,
) -> Result<Vec<PatchRecord>, DatasetError> {
    generate_dataset_at(images, manifest, 0)
}

/// As [`generate_dataset`] for a slice that starts at image `first_index` of
/// a longer sequence, so large inputs can be processed in chunks with the
/// same result.
pub fn generate_dataset_at(
    images: &[(String, PixelImage)],
    manifest: &DatasetManifest,
    first_index: u64,
) -> Result<Vec<PatchRecord>, DatasetError> {
    manifest.validate()?;
    let per_image: Vec<Vec<PatchRecord>> = images
        .par_iter()
        .enumerate()
        .map(|(i, (id, img))| {
            let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
            rng.set_stream(first_index + i as u64);
            generate_patches(img, id, manifest, &mut rng)
        })
        .collect::<Result<_, _>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// Fails when any source image contributes to both record sets.
pub fn check_disjoint_sources(a: &[PatchRecord], b: &[PatchRecord]) -> Result<(), DatasetError> {
    let ids: std::collections::HashSet<&str> = a.iter().map(|r| r.source_id.as_str()).collect();
    match b.iter().find(|r| ids.contains(r.source_id.as_str())) {
        Some(r) => Err(DatasetError::Manifest(format!(
            "source {:?} appears in both sets",
            r.source_id
        ))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic::synthetic_image;

    #[test]
    fn manifest_validation() {
        let m = DatasetManifest::new(Split::Train, 90, vec![60, 75], 1);
        assert!(m.validate().is_ok());
        let mut bad = m.clone();
        bad.qf1_grid.clear();
        assert!(bad.validate().is_err());
        let mut bad = m.clone();
        bad.qf1_grid.push(0);
        assert!(bad.validate().is_err());
        let mut bad = m.clone();
        bad.patches_per_image_cap = 0;
        assert!(bad.validate().is_err());
        assert_eq!("test".parse::<Split>().unwrap(), Split::Test);
        assert!("holdout".parse::<Split>().is_err());
    }

    #[test]
    fn cap_records_per_quality() {
        let img = synthetic_image(160, 144, 7);
        let m = DatasetManifest::new(Split::Train, 90, vec![60, 95], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let recs = generate_patches(&img, "img0", &m, &mut rng).unwrap();
        assert_eq!(recs.len(), 200);
        for r in &recs {
            assert_eq!(r.pixels.len(), PATCH_LEN);
            r.audit_label().unwrap();
        }
        assert_eq!(recs.iter().filter(|r| r.qf1 == 60).count(), 100);
    }

    #[test]
    fn test_split_draws_five() {
        let img = synthetic_image(128, 128, 8);
        let m = DatasetManifest::new(Split::Test, 90, vec![75], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(generate_patches(&img, "t", &m, &mut rng).unwrap().len(), 5);
    }

    #[test]
    fn small_images_yield_fewer_patches() {
        let img = synthetic_image(72, 72, 9);
        let m = DatasetManifest::new(Split::Train, 90, vec![75], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let recs = generate_patches(&img, "s", &m, &mut rng).unwrap();
        assert!(!recs.is_empty() && recs.len() <= 81);
    }

    #[test]
    fn generation_is_deterministic() {
        let images: Vec<(String, PixelImage)> = (0..3)
            .map(|i| (format!("img{i}"), synthetic_image(96, 96, i)))
            .collect();
        let m = DatasetManifest {
            patches_per_image_cap: 4,
            ..DatasetManifest::new(Split::Train, 80, vec![70, 90], 42)
        };
        let a = generate_dataset(&images, &m).unwrap();
        let b = generate_dataset(&images, &m).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3 * 2 * 4);
        let mut chunked = generate_dataset_at(&images[..1], &m, 0).unwrap();
        chunked.extend(generate_dataset_at(&images[1..], &m, 1).unwrap());
        assert_eq!(a, chunked);
    }

    #[test]
    fn disjointness_check() {
        let m = DatasetManifest {
            patches_per_image_cap: 2,
            ..DatasetManifest::new(Split::Train, 90, vec![70], 1)
        };
        let a = generate_dataset(&[("a".into(), synthetic_image(96, 96, 1))], &m).unwrap();
        let b = generate_dataset(&[("b".into(), synthetic_image(96, 96, 2))], &m).unwrap();
        assert!(check_disjoint_sources(&a, &b).is_ok());
        assert!(check_disjoint_sources(&a, &a).is_err());
    }
}
