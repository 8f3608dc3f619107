//! im2col-based convolution kernels shared by the plain, transposed and
//! masked convolution ops.
//!
//! All routines work on a single batch item at a time and accumulate kernel
//! gradients across the batch in index order, so results do not depend on
//! scheduling.

use crate::error::{Error, Result};
use crate::tensor::Float;

/// Geometry of a forward convolution from a `c × h × w` input to an
/// `f × ho × wo` output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
    pub ho: usize,
    pub wo: usize,
}

fn out_extent(n: usize, k: usize, stride: usize, pad: usize, dil: usize) -> Option<usize> {
    let span = dil * (k - 1) + 1;
    let padded = n + 2 * pad;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c: usize,
        h: usize,
        w: usize,
        f: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        dil: usize,
    ) -> Result<Self> {
        if kh == 0 || kw == 0 || stride == 0 || dil == 0 {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw}, stride {stride}, dilation {dil}: all must be >= 1"
            )));
        }
        let (ho, wo) = match (
            out_extent(h, kh, stride, pad, dil),
            out_extent(w, kw, stride, pad, dil),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::shape(format!(
                    "input {h}x{w} with padding {pad} is smaller than the dilated kernel {kh}x{kw} (dilation {dil})"
                )))
            }
        };
        Ok(ConvGeom {
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad,
            dil,
            ho,
            wo,
        })
    }

    /// Geometry whose forward map sends an output of the transposed
    /// convolution back to its `h × w` input. Transposed convolution is the
    /// adjoint of this forward map.
    pub fn for_transpose(
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let big_h = ((h - 1) * stride + kh).checked_sub(2 * pad);
        let big_w = ((w - 1) * stride + kw).checked_sub(2 * pad);
        match (big_h, big_w) {
            (Some(bh), Some(bw)) if bh > 0 && bw > 0 => {
                let g = ConvGeom::new(cout, bh, bw, cin, kh, kw, stride, pad, 1)?;
                debug_assert_eq!((g.ho, g.wo), (h, w));
                Ok(g)
            }
            _ => Err(Error::shape(format!(
                "transposed convolution of {h}x{w} with kernel {kh}x{kw}, stride {stride}, padding {pad} has no positive output extent"
            ))),
        }
    }

    pub fn in_plane(&self) -> usize {
        self.h * self.w
    }

    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn kernel_len(&self) -> usize {
        self.f * self.col_rows()
    }

    /// Input coordinate hit by output coordinate `o` and kernel tap `k`
    /// along one axis, or `None` if it falls in the padding.
    #[inline]
    fn src(&self, o: usize, k: usize, n: usize) -> Option<usize> {
        let pos = (o * self.stride + k * self.dil) as isize - self.pad as isize;
        if pos >= 0 && (pos as usize) < n {
            Some(pos as usize)
        } else {
            None
        }
    }

    /// Number of valid taps and number of in-bounds taps for every output
    /// position, given a single-channel `h × w` validity plane.
    pub fn window_counts(&self, mask: &[Float]) -> (Vec<Float>, Vec<Float>) {
        let mut valid = vec![0.0; self.out_plane()];
        let mut inb = vec![0.0; self.out_plane()];
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let (mut v, mut n) = (0.0, 0.0);
                for ki in 0..self.kh {
                    let Some(iy) = self.src(oy, ki, self.h) else {
                        continue;
                    };
                    for kj in 0..self.kw {
                        let Some(ix) = self.src(ox, kj, self.w) else {
                            continue;
                        };
                        v += mask[iy * self.w + ix];
                        n += 1.0;
                    }
                }
                valid[oy * self.wo + ox] = v;
                inb[oy * self.wo + ox] = n;
            }
        }
        (valid, inb)
    }

    /// Transposed counterpart of [`window_counts`](Self::window_counts):
    /// the mask lives on the `ho × wo` side and counts are gathered on the
    /// `h × w` side.
    pub fn window_counts_transpose(&self, mask: &[Float]) -> (Vec<Float>, Vec<Float>) {
        let mut valid = vec![0.0; self.in_plane()];
        let mut inb = vec![0.0; self.in_plane()];
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let m = mask[oy * self.wo + ox];
                for ki in 0..self.kh {
                    let Some(iy) = self.src(oy, ki, self.h) else {
                        continue;
                    };
                    for kj in 0..self.kw {
                        let Some(ix) = self.src(ox, kj, self.w) else {
                            continue;
                        };
                        valid[iy * self.w + ix] += m;
                        inb[iy * self.w + ix] += 1.0;
                    }
                }
            }
        }
        (valid, inb)
    }
}

/// Unfolds one `c × h × w` image into a `(c·kh·kw) × (ho·wo)` matrix.
pub fn im2col(x: &[Float], g: &ConvGeom, cols: &mut [Float]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.c {
        let xc = &x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    match g.src(oy, ki, g.h) {
                        None => drow.fill(0.0),
                        Some(iy) => {
                            let srow = &xc[iy * g.w..(iy + 1) * g.w];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                *d = match g.src(ox, kj, g.w) {
                                    Some(ix) => srow[ix],
                                    None => 0.0,
                                };
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds columns back, accumulating into `x`.
pub fn col2im(cols: &[Float], g: &ConvGeom, x: &mut [Float]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.c {
        let xc = &mut x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let Some(iy) = g.src(oy, ki, g.h) else {
                        continue;
                    };
                    let xrow = &mut xc[iy * g.w..(iy + 1) * g.w];
                    for ox in 0..g.wo {
                        if let Some(ix) = g.src(ox, kj, g.w) {
                            xrow[ix] += src[oy * g.wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `c = a·b + beta·c` for row-major operands, with optional transposition
/// of `a` (stored `k × m`) and `b` (stored `n × k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Float],
    a_t: bool,
    b: &[Float],
    b_t: bool,
    beta: Float,
    c: &mut [Float],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and strides describe dense
    // row-major storage of exactly those extents.
    unsafe {
        #[cfg(not(feature = "f32"))]
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Forward convolution without bias over a batch of `batch` images.
/// `w` is laid out `[f, c, kh, kw]`.
pub fn conv_forward(x: &[Float], batch: usize, g: &ConvGeom, w: &[Float]) -> Vec<Float> {
    let (rows, plane) = (g.col_rows(), g.out_plane());
    let mut out = vec![0.0; batch * g.f * plane];
    let mut cols = vec![0.0; rows * plane];
    for n in 0..batch {
        let xn = &x[n * g.c * g.in_plane()..(n + 1) * g.c * g.in_plane()];
        im2col(xn, g, &mut cols);
        let on = &mut out[n * g.f * plane..(n + 1) * g.f * plane];
        gemm(g.f, rows, plane, w, false, &cols, false, 0.0, on);
    }
    out
}

/// Gradient of [`conv_forward`] with respect to its input.
pub fn conv_backward_input(dout: &[Float], batch: usize, g: &ConvGeom, w: &[Float]) -> Vec<Float> {
    let (rows, plane) = (g.col_rows(), g.out_plane());
    let mut dx = vec![0.0; batch * g.c * g.in_plane()];
    let mut dcols = vec![0.0; rows * plane];
    for n in 0..batch {
        let dn = &dout[n * g.f * plane..(n + 1) * g.f * plane];
        gemm(rows, g.f, plane, w, true, dn, false, 0.0, &mut dcols);
        col2im(
            &dcols,
            g,
            &mut dx[n * g.c * g.in_plane()..(n + 1) * g.c * g.in_plane()],
        );
    }
    dx
}

/// Gradient of [`conv_forward`] with respect to its kernel, summed over the
/// batch in index order.
pub fn conv_backward_kernel(x: &[Float], dout: &[Float], batch: usize, g: &ConvGeom) -> Vec<Float> {
    let (rows, plane) = (g.col_rows(), g.out_plane());
    let mut dw = vec![0.0; g.kernel_len()];
    let mut cols = vec![0.0; rows * plane];
    for n in 0..batch {
        let xn = &x[n * g.c * g.in_plane()..(n + 1) * g.c * g.in_plane()];
        im2col(xn, g, &mut cols);
        let dn = &dout[n * g.f * plane..(n + 1) * g.f * plane];
        gemm(g.f, plane, rows, dn, false, &cols, true, 1.0, &mut dw);
    }
    dw
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_formula() {
        let g = ConvGeom::new(1, 9, 7, 1, 3, 3, 2, 1, 2).unwrap();
        // floor((9 + 2 - 2*2 - 1)/2) + 1 = 4 ; floor((7 + 2 - 4 - 1)/2) + 1 = 3
        assert_eq!((g.ho, g.wo), (4, 3));
    }

    #[test]
    fn rejects_kernel_larger_than_padded_input() {
        assert!(ConvGeom::new(1, 2, 2, 1, 5, 5, 1, 1, 1).is_err());
        assert!(ConvGeom::new(1, 2, 2, 1, 0, 1, 1, 0, 1).is_err());
    }

    #[test]
    fn transpose_geometry_inverts_strided_halving() {
        let g = ConvGeom::for_transpose(8, 16, 16, 4, 4, 4, 2, 1).unwrap();
        assert_eq!((g.h, g.w, g.ho, g.wo), (32, 32, 16, 16));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom::new(2, 5, 4, 1, 3, 2, 2, 1, 1).unwrap();
        let x: Vec<Float> = (0..g.c * g.in_plane()).map(|i| (i as Float * 0.37).sin()).collect();
        let y: Vec<Float> = (0..g.col_rows() * g.out_plane())
            .map(|i| (i as Float * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let lhs: Float = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: Float = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
