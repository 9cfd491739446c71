//! Synthetic digit rendering for desk-scale benchmarks: a 5x7 glyph font
//! scaled up and placed with random offset, intensity and noise. The point is
//! a controllable, label-preserving image distribution that trains in minutes
//! on a CPU, not visual fidelity.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Row bitmasks (5 bits wide) for digits 0-9.
const FONT_5X7: [[u8; 7]; 10] = [
    [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
    [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
    [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
    [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
    [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
    [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
    [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
    [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
    [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
];

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;

/// Renders `n` random digits into `[n, 1, size, size]` plus their labels.
pub fn generate_digits(n: usize, size: usize, seed: u64) -> Result<(Tensor<f32>, Vec<usize>)> {
    // glyphs are scaled 2x; the image must leave room for placement jitter
    let (gw, gh) = (GLYPH_W * 2, GLYPH_H * 2);
    if size < gh + 1 {
        return Err(Error::Config(format!(
            "digit canvas {size} too small, need at least {}",
            gh + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0f32; n * size * size];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = rng.gen_range(0..10usize);
        labels.push(digit);
        let x0 = rng.gen_range(0..=size - gw);
        let y0 = rng.gen_range(0..=size - gh);
        let intensity: f32 = rng.gen_range(0.65..1.0);
        let img = &mut data[i * size * size..(i + 1) * size * size];
        for (r, &rowbits) in FONT_5X7[digit].iter().enumerate() {
            for c in 0..GLYPH_W {
                if rowbits & (1 << (GLYPH_W - 1 - c)) != 0 {
                    // 2x nearest-neighbor upscale
                    for dy in 0..2 {
                        for dx in 0..2 {
                            img[(y0 + 2 * r + dy) * size + x0 + 2 * c + dx] = intensity;
                        }
                    }
                }
            }
        }
        for v in img.iter_mut() {
            let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
            let u2: f32 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos();
            *v = (*v + 0.04 * z).clamp(0.0, 1.0);
        }
    }
    Ok((Tensor::new(vec![n, 1, size, size], data)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let (a, la) = generate_digits(20, 16, 5).unwrap();
        let (b, lb) = generate_digits(20, 16, 5).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(la, lb);
        let (c, _) = generate_digits(20, 16, 6).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn values_in_unit_range_and_all_classes_appear() {
        let (imgs, labels) = generate_digits(500, 16, 1).unwrap();
        assert!(imgs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let classes: std::collections::HashSet<_> = labels.into_iter().collect();
        assert_eq!(classes.len(), 10);
    }

    #[test]
    fn canvas_too_small_is_config_error() {
        assert!(generate_digits(1, 8, 0).is_err());
    }
}
