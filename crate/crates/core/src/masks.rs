//! Irregular hole masks drawn as random-walk brush strokes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::BinaryMap;
use crate::tensor::Float;

pub const BRUSH_MIN: usize = 5;
pub const BRUSH_MAX: usize = 20;
/// Allowed distance between requested and produced hole fraction.
pub const COVERAGE_TOL: Float = 0.05;
const MAX_STAMPS: usize = 100_000;

fn stamp(map: &mut [u8], h: usize, w: usize, cy: Float, cx: Float, width: usize) -> usize {
    let r = width as Float / 2.0;
    let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(h - 1));
    let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(w - 1));
    let mut added = 0;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dy, dx) = (y as Float + 0.5 - cy, x as Float + 0.5 - cx);
            if dy * dy + dx * dx <= r * r && map[y * w + x] == 0 {
                map[y * w + x] = 1;
                added += 1;
            }
        }
    }
    added
}

/// Hole mask (1 = hole) of `h × w` whose hole fraction lies in
/// `[coverage, coverage + 0.05]`.
///
/// Strokes start at random points and walk with random turns, stamping a
/// disc of random width (5–20 px) at every step. A stamp that would
/// overshoot the upper bound is retried with a narrower brush. A coverage
/// of 0 gives an empty mask.
pub fn gen_irregular_mask(h: usize, w: usize, coverage: Float, seed: u64) -> Result<BinaryMap> {
    if h == 0 || w == 0 {
        return Err(Error::shape(format!("mask canvas {w}x{h} is empty")));
    }
    if !(0.0..1.0).contains(&coverage) {
        return Err(Error::Config(format!("mask coverage must be in [0, 1), got {coverage}")));
    }
    let total = (h * w) as Float;
    let target = (coverage * total).ceil() as usize;
    let limit = ((coverage + COVERAGE_TOL) * total).floor() as usize;
    let mut map = vec![0u8; h * w];
    let mut holes = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stamps = 0;
    while holes < target {
        let mut y = rng.random_range(0.0..h as Float);
        let mut x = rng.random_range(0.0..w as Float);
        let mut angle = rng.random_range(0.0..std::f64::consts::TAU as Float);
        let width = rng.random_range(BRUSH_MIN..=BRUSH_MAX);
        let steps = rng.random_range(4..16);
        for _ in 0..steps {
            stamps += 1;
            if stamps > MAX_STAMPS {
                return Err(Error::Data(format!(
                    "could not reach hole fraction {coverage} on a {w}x{h} canvas"
                )));
            }
            let mut bw = width;
            loop {
                let mut trial = map.clone();
                let added = stamp(&mut trial, h, w, y, x, bw);
                if holes + added <= limit {
                    map = trial;
                    holes += added;
                    break;
                }
                if bw == 1 {
                    break;
                }
                bw = (bw / 2).max(1);
            }
            if holes >= target {
                break;
            }
            angle += rng.random_range(-1.0..1.0 as Float);
            let step = width as Float * rng.random_range(0.3..0.8 as Float);
            y = (y + step * angle.sin()).clamp(0.0, h as Float - 1e-9);
            x = (x + step * angle.cos()).clamp(0.0, w as Float - 1e-9);
        }
    }
    BinaryMap::new(w, h, map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_coverage_is_empty() {
        let m = gen_irregular_mask(16, 16, 0.0, 1).unwrap();
        assert_eq!(m.fraction(), 0.0);
    }

    #[test]
    fn rejects_full_coverage() {
        assert!(gen_irregular_mask(16, 16, 1.0, 1).is_err());
    }
}
