//! Estimation of the primary quantization matrix of double-compressed JPEG
//! images with a densely connected convolutional regressor.
//!
//! The crate is organised bottom-up:
//!
//! * [`jpeg`]: DCT, quantization tables and pixel-domain compression cycles.
//! * [`dataset`]: labelled double-compressed patches and the binary shard format.
//! * [`nn`]: a small reverse-mode autodiff engine, the dense network, losses and Adam.
//! * [`estimator`]: rounding of network outputs and per-patch metrics.
//! * [`harness`]: grouped evaluation tables and CSV/plot output.

pub mod dataset;
pub mod estimator;
pub mod harness;
pub mod jpeg;
pub mod nn;

/// Raises glibc's mmap and trim thresholds so large activation buffers are
/// recycled from the heap instead of being mapped and unmapped on every
/// training step. Does nothing on other platforms.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tunables and is safe to call at any time.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TOP_PAD, 256 << 20);
    }
}
