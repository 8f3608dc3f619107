//! Procedural images for smoke tests and toy experiments: a smooth
//! two-colour gradient with a few flat-coloured discs and rectangles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::io::Image;
use crate::tensor::Float;

fn colour(rng: &mut ChaCha8Rng) -> [Float; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Deterministic RGB image of side `size`.
pub fn synthetic_image(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c0, c1) = (colour(&mut rng), colour(&mut rng));
    let angle: Float = rng.random_range(0.0..std::f64::consts::TAU as Float);
    let (dx, dy) = (angle.cos(), angle.sin());
    let s = size as Float;
    let mut px = vec![[0.0 as Float; 3]; size * size];
    for y in 0..size {
        for x in 0..size {
            let t = ((x as Float / s - 0.5) * dx + (y as Float / s - 0.5) * dy + 0.75) / 1.5;
            for c in 0..3 {
                px[y * size + x][c] = c0[c] + (c1[c] - c0[c]) * t.clamp(0.0, 1.0);
            }
        }
    }
    let shapes = rng.random_range(2..5);
    for _ in 0..shapes {
        let col = colour(&mut rng);
        let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let r = rng.random_range(0.1..0.3) * s;
        let disc = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as Float + 0.5 - cx, y as Float + 0.5 - cy);
                let inside = if disc {
                    fx * fx + fy * fy <= r * r
                } else {
                    fx.abs() <= r && fy.abs() <= 0.6 * r
                };
                if inside {
                    px[y * size + x] = col;
                }
            }
        }
    }
    let data = px
        .iter()
        .flat_map(|p| p.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
        .collect();
    Image::new(size, size, 3, data).expect("sized buffer")
}
