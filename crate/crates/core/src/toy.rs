//! Procedural image sets for smoke runs and tests.
//!
//! Content images are smooth colour fields with a few soft discs; style
//! images are oriented stripe and checker patterns with a two-colour palette.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image_io::RgbImage;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

pub fn content_image(size: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let corners = [colour(rng), colour(rng), colour(rng), colour(rng)];
    let discs: Vec<([f64; 2], f64, [f64; 3])> = (0..3)
        .map(|_| {
            let centre = [rng.random::<f64>(), rng.random::<f64>()];
            (centre, rng.random_range(0.08..0.25), colour(rng))
        })
        .collect();
    let n = size as f64;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / n, (y as f64 + 0.5) / n);
            let mut px = [0.0; 3];
            for (c, p) in px.iter_mut().enumerate() {
                let top = corners[0][c] * (1.0 - u) + corners[1][c] * u;
                let bottom = corners[2][c] * (1.0 - u) + corners[3][c] * u;
                *p = top * (1.0 - v) + bottom * v;
            }
            for (centre, radius, col) in &discs {
                let d = ((u - centre[0]).powi(2) + (v - centre[1]).powi(2)).sqrt();
                let w = 1.0 / (1.0 + ((d - radius) * 40.0).exp());
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - w) + col[c] * w;
                }
            }
            data.extend(px.iter().map(|&p| to_byte(p)));
        }
    }
    RgbImage::new(size, size, data).expect("buffer matches extents")
}

pub fn style_image(size: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let (a, b) = (colour(rng), colour(rng));
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let freq = rng.random_range(3.0..12.0);
    let checker = rng.random_bool(0.5);
    let (s, c) = angle.sin_cos();
    let n = size as f64;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / n, y as f64 / n);
            let p = (u * c + v * s) * freq;
            let q = (-u * s + v * c) * freq;
            let mut t = 0.5 + 0.5 * (p * std::f64::consts::TAU).sin();
            if checker {
                t *= 0.5 + 0.5 * (q * std::f64::consts::TAU).sin();
            }
            data.extend((0..3).map(|ch| to_byte(a[ch] * t + b[ch] * (1.0 - t))));
        }
    }
    RgbImage::new(size, size, data).expect("buffer matches extents")
}

/// `count` content and `count` style images of `size × size`.
pub fn image_sets(count: usize, size: usize, seed: u64) -> (Vec<RgbImage>, Vec<RgbImage>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let content = (0..count).map(|_| content_image(size, &mut rng)).collect();
    let style = (0..count).map(|_| style_image(size, &mut rng)).collect();
    (content, style)
}
