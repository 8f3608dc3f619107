//! Canny edge detection on a grayscale plane.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::io::BinaryMap;
use crate::tensor::Float;

pub const DEFAULT_SIGMA: Float = 2.0;
/// Hysteresis thresholds as fractions of the largest gradient magnitude.
pub const DEFAULT_LOW: Float = 0.1;
pub const DEFAULT_HIGH: Float = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CannyParams {
    pub sigma: Float,
    pub low: Float,
    pub high: Float,
}

impl Default for CannyParams {
    fn default() -> Self {
        CannyParams {
            sigma: DEFAULT_SIGMA,
            low: DEFAULT_LOW,
            high: DEFAULT_HIGH,
        }
    }
}

impl CannyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("canny sigma must be > 0, got {}", self.sigma)));
        }
        if !(0.0 < self.low && self.low < self.high) {
            return Err(Error::Config(format!(
                "canny thresholds need 0 < low < high, got {} and {}",
                self.low, self.high
            )));
        }
        Ok(())
    }
}

fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn gaussian_blur(x: &[Float], h: usize, w: usize, sigma: Float) -> Vec<Float> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<Float> = (-r..=r).map(|i| (-((i * i) as Float) / (2.0 * sigma * sigma)).exp()).collect();
    let s: Float = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            tmp[y * w + xx] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * x[y * w + clamp_idx(xx as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            out[y * w + xx] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp[clamp_idx(y as isize + k as isize - r, h) * w + xx])
                .sum();
        }
    }
    out
}

/// Binary edge map of an `h × w` plane.
pub fn canny(gray: &[Float], h: usize, w: usize, params: &CannyParams) -> Result<BinaryMap> {
    params.validate()?;
    if gray.len() != h * w || h == 0 || w == 0 {
        return Err(Error::shape(format!("{} values for a {w}x{h} plane", gray.len())));
    }
    let s = gaussian_blur(gray, h, w, params.sigma);
    let at = |y: isize, x: isize| s[clamp_idx(y, h) * w + clamp_idx(x, w)];
    let mut mag = vec![0.0; h * w];
    let mut dir = vec![0u8; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            let i = y as usize * w + x as usize;
            mag[i] = gx.hypot(gy);
            // 0: horizontal gradient, 1: 45°, 2: vertical, 3: 135°
            let mut angle = gy.atan2(gx).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            dir[i] = (((angle + 22.5) / 45.0) as u8) % 4;
        }
    }
    let max = mag.iter().copied().fold(0.0, Float::max);
    if max <= 1e-12 {
        return Ok(BinaryMap::zeros(w, h));
    }
    let m = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let (dy, dx) = match dir[i] {
                0 => (0, 1),
                1 => (1, 1),
                2 => (1, 0),
                _ => (1, -1),
            };
            let v = mag[i];
            // strict on one side so plateaus two pixels wide keep one pixel
            if v > m(y - dy, x - dx) && v >= m(y + dy, x + dx) {
                thin[i] = v;
            }
        }
    }
    let (lo, hi) = (params.low * max, params.high * max);
    let mut out = vec![0u8; h * w];
    let mut queue = VecDeque::new();
    for (i, &v) in thin.iter().enumerate() {
        if v >= hi {
            out[i] = 1;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if out[j] == 0 && thin[j] >= lo {
                    out[j] = 1;
                    queue.push_back(j);
                }
            }
        }
    }
    BinaryMap::new(w, h, out)
}
