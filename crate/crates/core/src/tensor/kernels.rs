//! Raw buffer kernels shared by the tape operations.

use super::element::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

fn out_extent(size: usize, k: usize, stride: usize, dilation: usize, padding: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = size + 2 * padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

impl ConvGeometry {
    pub fn new(
        x: &[usize],
        weight: &[usize],
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Self> {
        let [_, cin, h, w] = x[..] else {
            return Err(Error::shape("conv2d input", x, &[0, 0, 0, 0]));
        };
        let [cout, wcin, kh, kw] = weight[..] else {
            return Err(Error::shape("conv2d weight", weight, &[0, 0, 0, 0]));
        };
        if wcin != cin || kh != kw {
            return Err(Error::shape("conv2d", x, weight));
        }
        if kh == 0 || stride == 0 || dilation == 0 {
            return Err(Error::config(format!(
                "conv2d needs k, stride, dilation >= 1 (k={kh}, stride={stride}, dilation={dilation})"
            )));
        }
        let extent = |size| out_extent(size, kh, stride, dilation, padding).filter(|&e| e >= 1);
        let (Some(oh), Some(ow)) = (extent(h), extent(w)) else {
            return Err(Error::config(format!(
                "conv2d output extent is not positive for input {h}x{w}, k={kh}, stride={stride}, dilation={dilation}, padding={padding}"
            )));
        };
        Ok(ConvGeometry {
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            dilation,
            padding,
            oh,
            ow,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    pub fn in_item(&self) -> usize {
        self.cin * self.h * self.w
    }

    pub fn out_item(&self) -> usize {
        self.cout * self.oh * self.ow
    }

    /// A 1×1 stride-1 unpadded convolution reads its input as the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    fn source(&self, out: usize, tap: usize) -> Option<usize> {
        let pos = (out * self.stride + tap * self.dilation) as isize - self.padding as isize;
        (pos >= 0).then_some(pos as usize)
    }

    /// Unfolds one batch item `[cin, h, w]` into `[cin·k·k, oh·ow]`.
    pub fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let plane = self.out_pixels();
        for ci in 0..self.cin {
            let src = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.oh {
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match self.source(oy, ki).filter(|&iy| iy < self.h) {
                            None => line.fill(T::zero()),
                            Some(iy) => {
                                let srow = &src[iy * self.w..(iy + 1) * self.w];
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.source(ox, kj).filter(|&ix| ix < self.w) {
                                        Some(ix) => srow[ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates columns back into `dx`.
    pub fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let plane = self.out_pixels();
        for ci in 0..self.cin {
            let dst = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * self.k + ki) * self.k + kj;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.oh {
                        let Some(iy) = self.source(oy, ki).filter(|&iy| iy < self.h) else {
                            continue;
                        };
                        for ox in 0..self.ow {
                            if let Some(ix) = self.source(ox, kj).filter(|&ix| ix < self.w) {
                                dst[iy * self.w + ix] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// One output coordinate of a bilinear resize: two source indices and the
/// weight of the second.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilinearTap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Half-pixel-centre (align-corners = false) sampling taps for resizing an
/// axis of `src` samples to `dst` samples.
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<BilinearTap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if hi == lo { 0.0 } else { pos - lo as f64 };
            BilinearTap { lo, hi, frac }
        })
        .collect()
}

/// Views `shape` as `[outer, len, inner]` around `axis`.
pub(crate) fn axis_lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

pub(crate) fn softmax_lanes<T: Real>(x: &[T], out: &mut [T], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[base + j * inner]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (x[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                total += e;
            }
            let inv = T::one() / total;
            for j in 0..len {
                out[base + j * inner] *= inv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_for_identity_resize_are_exact() {
        for t in bilinear_taps(5, 5).iter().enumerate() {
            assert_eq!(t.1.lo, t.0);
            assert_eq!(t.1.frac, 0.0);
        }
    }

    #[test]
    fn geometry_rejects_empty_output() {
        let err = ConvGeometry::new(&[1, 1, 2, 2], &[1, 1, 3, 3], 1, 2, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        let g = ConvGeometry::new(&[1, 2, 5, 4], &[3, 2, 3, 3], 2, 2, 2).unwrap();
        let x: Vec<f64> = (0..g.in_item()).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..g.col_rows() * g.out_pixels())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; c.len()];
        g.im2col(&x, &mut cols);
        let mut back = vec![0.0; x.len()];
        g.col2im(&c, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
