//! Procedural ten-class grayscale image generator.
//!
//! A desk-scale stand-in for a real document corpus: each class is a
//! distinct geometric pattern (bars, diagonals, disk, ring, checkerboard,
//! cross, gradient, corner dots) drawn with per-sample jitter, amplitude
//! variation, and additive Gaussian noise of varying strength, so every
//! class contains both easy and hard samples. Fully deterministic per seed.

use unlearn_core::dataset::Geometry;
use unlearn_core::rng::{self, ChaCha8Rng};

pub const NUM_CLASSES: usize = 10;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "hbar", "vbar", "diag", "antidiag", "disk", "ring", "checker", "cross", "gradient", "dots",
];

/// Draw one sample of `class` into a fresh pixel buffer.
fn draw(class: usize, geometry: Geometry, r: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w) = (geometry.h, geometry.w);
    let mut img = vec![0.0f64; h * w];
    let amplitude = 0.55 + 0.45 * rng::uniform(r);
    let jitter = |r: &mut ChaCha8Rng, lo: usize, hi: usize| lo + rng::uniform_index(r, hi - lo + 1);

    let set = |img: &mut [f64], y: usize, x: usize, v: f64| {
        if y < h && x < w {
            img[y * w + x] = v;
        }
    };

    match class {
        0 => {
            // Horizontal bar, thickness 2.
            let row = jitter(r, 2, h - 4);
            for y in row..row + 2 {
                for x in 0..w {
                    set(&mut img, y, x, amplitude);
                }
            }
        }
        1 => {
            let col = jitter(r, 2, w - 4);
            for x in col..col + 2 {
                for y in 0..h {
                    set(&mut img, y, x, amplitude);
                }
            }
        }
        2 => {
            // Main diagonal stripe with offset jitter.
            let off = jitter(r, 0, 4) as isize - 2;
            for y in 0..h as isize {
                for d in -1..=0 {
                    let x = y + off + d;
                    if x >= 0 {
                        set(&mut img, y as usize, x as usize, amplitude);
                    }
                }
            }
        }
        3 => {
            let off = jitter(r, 0, 4) as isize - 2;
            for y in 0..h as isize {
                for d in -1..=0 {
                    let x = (w as isize - 1) - y + off + d;
                    if x >= 0 {
                        set(&mut img, y as usize, x as usize, amplitude);
                    }
                }
            }
        }
        4 => {
            // Filled disk.
            let cy = jitter(r, h / 2 - 2, h / 2 + 2) as isize;
            let cx = jitter(r, w / 2 - 2, w / 2 + 2) as isize;
            let radius = jitter(r, h / 5, h / 3) as isize;
            for y in 0..h {
                for x in 0..w {
                    let dy = y as isize - cy;
                    let dx = x as isize - cx;
                    if dy * dy + dx * dx <= radius * radius {
                        set(&mut img, y, x, amplitude);
                    }
                }
            }
        }
        5 => {
            // Hollow square ring.
            let m = jitter(r, 2, h / 4);
            for y in m..h - m {
                for x in m..w - m {
                    let on_edge = y == m || y == h - m - 1 || x == m || x == w - m - 1;
                    if on_edge {
                        set(&mut img, y, x, amplitude);
                    }
                }
            }
        }
        6 => {
            // Checkerboard with phase jitter.
            let cell = if rng::uniform(r) < 0.5 { 2 } else { 4 };
            let phase = rng::uniform_index(r, 2);
            for y in 0..h {
                for x in 0..w {
                    if (y / cell + x / cell + phase).is_multiple_of(2) {
                        set(&mut img, y, x, amplitude);
                    }
                }
            }
        }
        7 => {
            // Cross through a jittered center.
            let cy = jitter(r, h / 2 - 2, h / 2 + 2);
            let cx = jitter(r, w / 2 - 2, w / 2 + 2);
            for y in 0..h {
                set(&mut img, y, cx, amplitude);
                set(&mut img, y, cx + 1, amplitude);
            }
            for x in 0..w {
                set(&mut img, cy, x, amplitude);
                set(&mut img, cy + 1, x, amplitude);
            }
        }
        8 => {
            // Horizontal gradient, occasionally flipped.
            let flip = rng::uniform(r) < 0.5;
            for y in 0..h {
                for x in 0..w {
                    let t = x as f64 / (w - 1) as f64;
                    let t = if flip { 1.0 - t } else { t };
                    set(&mut img, y, x, amplitude * t);
                }
            }
        }
        9 => {
            // Blobs in the four corners.
            let s = h / 5 + 1;
            let corners = [(1, 1), (1, w - s - 1), (h - s - 1, 1), (h - s - 1, w - s - 1)];
            for (cy, cx) in corners {
                let dy = rng::uniform_index(r, 2);
                let dx = rng::uniform_index(r, 2);
                for y in 0..s {
                    for x in 0..s {
                        set(&mut img, cy + dy + y, cx + dx + x, amplitude);
                    }
                }
            }
        }
        _ => panic!("class {class} out of range"),
    }

    // Background lift + per-sample noise strength.
    let background = 0.08 * rng::uniform(r);
    let sigma = 0.05 + 0.30 * rng::uniform(r);
    for px in img.iter_mut() {
        *px = (*px + background + sigma * rng::normal(r)).clamp(0.0, 1.0);
    }
    img
}

/// Generate `per_class` samples of each of the ten classes, class-major
/// order (all of class 0 first). Returns (pixels, labels).
pub fn generate(geometry: Geometry, per_class: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
    assert!(geometry.c == 1, "synthetic corpus is grayscale");
    assert!(geometry.h >= 8 && geometry.w >= 8, "patterns need at least 8x8");
    let mut pixels = Vec::with_capacity(NUM_CLASSES * per_class * geometry.len());
    let mut labels = Vec::with_capacity(NUM_CLASSES * per_class);
    for class in 0..NUM_CLASSES {
        let mut r = rng::substream(seed, 0xDA7A_0000 + class as u64);
        for _ in 0..per_class {
            pixels.extend(draw(class, geometry, &mut r));
            labels.push(class);
        }
    }
    (pixels, labels)
}
