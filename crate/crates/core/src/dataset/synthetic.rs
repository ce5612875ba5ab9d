//! Procedural stand-ins for natural source images.
//!
//! The images mix a colour gradient, random hard-edged shapes, multi-scale
//! value noise and fine sensor-like noise, which populates both the low and
//! high DCT frequencies that the estimator relies on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::jpeg::PixelImage;

/// Value noise on a coarse lattice, bilinearly interpolated.
struct Lattice {
    cell: f64,
    cols: usize,
    values: Vec<f64>,
}

impl Lattice {
    fn new(width: usize, height: usize, cell: f64, rng: &mut ChaCha8Rng) -> Self {
        let cols = (width as f64 / cell).ceil() as usize + 2;
        let rows = (height as f64 / cell).ceil() as usize + 2;
        let values = (0..cols * rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self { cell, cols, values }
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        let fx = x as f64 / self.cell;
        let fy = y as f64 / self.cell;
        let (ix, iy) = (fx as usize, fy as usize);
        let (tx, ty) = (fx - ix as f64, fy - iy as f64);
        let v = |cx: usize, cy: usize| self.values[cy * self.cols + cx];
        let top = v(ix, iy) * (1.0 - tx) + v(ix + 1, iy) * tx;
        let bottom = v(ix, iy + 1) * (1.0 - tx) + v(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (u, v) = ((x - cx) / rx, (y - cy) / ry);
                u * u + v * v <= 1.0
            }
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
        }
    }
}

/// Deterministic RGB test image of the given size.
pub fn synthetic_image(width: usize, height: usize, seed: u64) -> PixelImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a6e);
    let (w, h) = (width as f64, height as f64);
    let base: [[f64; 3]; 2] = [
        [0, 1, 2].map(|_| rng.random_range(30.0..220.0)),
        [0, 1, 2].map(|_| rng.random_range(30.0..220.0)),
    ];
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());

    let n_shapes = rng.random_range(4..12);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let shape = if rng.random_bool(0.5) {
            Shape::Ellipse {
                cx: rng.random_range(0.0..w),
                cy: rng.random_range(0.0..h),
                rx: rng.random_range(4.0..w / 2.0),
                ry: rng.random_range(4.0..h / 2.0),
            }
        } else {
            let (x0, y0) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
            Shape::Rect {
                x0,
                y0,
                x1: x0 + rng.random_range(4.0..w / 2.0),
                y1: y0 + rng.random_range(4.0..h / 2.0),
            }
        };
        let colour = [0, 1, 2].map(|_| rng.random_range(0.0..255.0));
        let opacity = rng.random_range(0.4..1.0);
        shapes.push((shape, colour, opacity));
    }

    let octaves: Vec<(Lattice, f64)> = [(32.0, 28.0), (12.0, 16.0), (5.0, 10.0), (2.0, 6.0)]
        .into_iter()
        .map(|(cell, amp)| (Lattice::new(width, height, cell, &mut rng), amp))
        .collect();
    let chroma_noise = Lattice::new(width, height, 16.0, &mut rng);
    let grain = Normal::new(0.0, rng.random_range(1.5..5.0)).expect("positive sigma");

    let mut samples = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f64, y as f64);
            let t = (((fx / w - 0.5) * ca + (fy / h - 0.5) * sa) + 0.5).clamp(0.0, 1.0);
            let mut px = [0.0f64; 3];
            for c in 0..3 {
                px[c] = base[0][c] * (1.0 - t) + base[1][c] * t;
            }
            for (shape, colour, opacity) in &shapes {
                if shape.contains(fx, fy) {
                    for c in 0..3 {
                        px[c] = px[c] * (1.0 - opacity) + colour[c] * opacity;
                    }
                }
            }
            let luma_tex: f64 = octaves.iter().map(|(l, a)| l.at(x, y) * a).sum();
            let tint = chroma_noise.at(x, y) * 12.0;
            for (c, v) in px.iter().enumerate() {
                let tint = if c == 1 { -tint } else { tint };
                let g = grain.sample(&mut rng);
                samples.push((v + luma_tex + tint + g).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    PixelImage::new(width, height, 3, samples).expect("dimensions are consistent")
}
