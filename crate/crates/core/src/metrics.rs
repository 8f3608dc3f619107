//! Image quality metrics: PSNR, SSIM and the Fréchet distance between
//! feature distributions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// `10·log10(max² / MSE)`; identical inputs give `+∞`.
pub fn psnr(a: &[Float], b: &[Float], max_value: Float) -> Result<Float> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!("psnr over {} and {} values", a.len(), b.len())));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<Float>() / a.len() as Float;
    if mse == 0.0 {
        return Ok(Float::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: Float = 1.5;
pub const SSIM_K1: Float = 0.01;
pub const SSIM_K2: Float = 0.03;
pub const SSIM_RANGE: Float = 255.0;

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: Float) -> Vec<Float> {
    let c = (size as Float - 1.0) / 2.0;
    let raw: Vec<Float> = (0..size)
        .map(|i| (-((i as Float - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: Float = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h × w` plane.
fn filter_valid(x: &[Float], h: usize, w: usize, taps: &[Float]) -> Vec<Float> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for ox in 0..wo {
            rows[y * wo + ox] = taps.iter().enumerate().map(|(j, t)| t * x[y * w + ox + j]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for oy in 0..ho {
        for ox in 0..wo {
            out[oy * wo + ox] = taps.iter().enumerate().map(|(i, t)| t * rows[(oy + i) * wo + ox]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully contained 11×11 windows of one plane.
pub fn ssim_plane(a: &[Float], b: &[Float], h: usize, w: usize) -> Result<Float> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::shape(format!("ssim planes of {} and {} values for {h}x{w}", a.len(), b.len())));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let prod = |p: &[Float], q: &[Float]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let e_aa = filter_valid(&prod(a, a), h, w, &taps);
    let e_bb = filter_valid(&prod(b, b), h, w, &taps);
    let e_ab = filter_valid(&prod(a, b), h, w, &taps);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += num / den;
    }
    Ok(total / n as Float)
}

/// SSIM of `[H, W]`, `[C, H, W]` or `[N, C, H, W]` tensors on the 0–255
/// scale, averaged over every plane.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<Float> {
    a.expect_same_shape(b)?;
    let shape = a.shape();
    if shape.len() < 2 {
        return Err(Error::shape(format!("ssim needs an image, got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let plane = h * w;
    let planes = a.numel() / plane;
    let mut total = 0.0;
    for p in 0..planes {
        let r = p * plane..(p + 1) * plane;
        total += ssim_plane(&a.data()[r.clone()], &b.data()[r], h, w)?;
    }
    Ok(total / planes as Float)
}

pub const FID_EPS: Float = 1e-6;
/// Eigenvalues down to this are treated as rounding noise and clamped.
pub const FID_NEG_TOL: Float = -1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct FidReport {
    pub value: Float,
    /// Whether `1e-6·I` was added to singular covariances.
    pub regularized: bool,
}

fn moments(x: &[Vec<Float>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.len();
    if n < 2 {
        return Err(Error::Data(format!("fid needs at least 2 samples per side, got {n}")));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|v| v.len() != d) {
        return Err(Error::shape("fid feature vectors must share a nonzero length"));
    }
    let mut mean = DVector::zeros(d);
    for v in x {
        for (m, &a) in mean.iter_mut().zip(v) {
            *m += a as f64;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for v in x {
        let c = DVector::from_iterator(d, v.iter().map(|&a| a as f64)) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    Ok((mean, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < 0.0 {
            if *v < FID_NEG_TOL {
                return Err(Error::Domain(format!("covariance eigenvalue {v} is negative")));
            }
            *v = 0.0;
        }
        *v = v.sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

fn is_singular(c: &DMatrix<f64>) -> bool {
    let eig = SymmetricEigen::new(c.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    eig.eigenvalues.iter().any(|&v| v <= 1e-12 * max.max(1.0))
}

/// Fréchet distance between Gaussian fits of two feature sets.
///
/// The mean term is `‖μ_r − μ_g‖²`, or the plain norm when `unsquared`.
/// `Tr((C_r C_g)^{1/2})` is evaluated as `Tr((C_r^{1/2} C_g C_r^{1/2})^{1/2})`,
/// the square root of a symmetric positive semidefinite matrix.
pub fn fid(real: &[Vec<Float>], generated: &[Vec<Float>], unsquared: bool) -> Result<FidReport> {
    let (mr, mut cr) = moments(real)?;
    let (mg, mut cg) = moments(generated)?;
    if mr.len() != mg.len() {
        return Err(Error::shape(format!("fid feature sizes {} and {} differ", mr.len(), mg.len())));
    }
    let d = mr.len();
    let regularized = is_singular(&cr) || is_singular(&cg);
    if regularized {
        let eye = DMatrix::<f64>::identity(d, d) * FID_EPS;
        cr += &eye;
        cg += &eye;
    }
    let diff2 = (&mr - &mg).norm_squared();
    let mean_term = if unsquared { diff2.sqrt() } else { diff2 };
    let sr = sym_sqrt(&cr)?;
    let mut inner = &sr * &cg * &sr;
    inner = (&inner + inner.transpose()) * 0.5;
    let cross = sym_sqrt(&inner)?.trace();
    let value = mean_term + cr.trace() + cg.trace() - 2.0 * cross;
    Ok(FidReport {
        value: value.max(0.0) as Float,
        regularized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        let a = vec![10.0; 64];
        let b: Vec<Float> = a.iter().map(|v| v + 1.0).collect();
        assert!((psnr(&a, &b, 255.0).unwrap() - 48.1308).abs() < 1e-3);
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), Float::INFINITY);
        let z = vec![0.0; 4];
        let f = vec![255.0; 4];
        assert!(psnr(&z, &f, 255.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn gaussian_taps_sum_to_one() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<Float>() - 1.0).abs() < 1e-12);
        assert_eq!(t[0], t[10]);
    }

    #[test]
    fn ssim_rejects_small_images() {
        assert!(ssim_plane(&[0.0; 100], &[0.0; 100], 10, 10).is_err());
    }
}
