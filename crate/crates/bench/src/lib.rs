//! Seeded inputs shared by the benchmarks.

use image::{Luma, Rgb as Px};
use pipe_core::raster::{empty_mask, Mask, Rgb};
use pipe_core::seed::rng_from_seed;
use pipe_core::EmbeddingVector;
use rand::RngExt;

pub fn embeddings(n: usize, dim: usize, seed: u64) -> Vec<EmbeddingVector> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| EmbeddingVector::unit((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("non-zero"))
        .collect()
}

pub fn noise_image(width: u32, height: u32, seed: u64) -> Rgb {
    let mut rng = rng_from_seed(seed);
    Rgb::from_fn(width, height, |_, _| Px([rng.random(), rng.random(), rng.random()]))
}

/// A filled ellipse covering about a fifth of the frame.
pub fn blob_mask(width: u32, height: u32) -> Mask {
    let mut m = empty_mask(width, height);
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let (rx, ry) = (width as f64 / 4.0, height as f64 / 4.0);
    for y in 0..height {
        for x in 0..width {
            let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
            if dx * dx + dy * dy <= 1.0 {
                m.put_pixel(x, y, Luma([255]));
            }
        }
    }
    m
}
