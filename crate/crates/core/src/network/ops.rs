//! Layer kernels shared by the float reference and the integer simulator.

use std::ops::{AddAssign, Mul};

use crate::tensor::{Shape, Tensor3};

pub(crate) trait Scalar: Copy + Default + AddAssign + Mul<Output = Self> + PartialOrd {}

impl Scalar for f64 {}
impl Scalar for i64 {}

/// Valid output range `[lo, hi)` along one axis for kernel tap `k`.
#[inline]
fn tap_range(k: usize, stride: usize, pad: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - pad < in_len
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if in_len + pad > k {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Cross-correlation with zero padding. `weight` is `[out, in, k, k]`.
pub(crate) fn conv2d<T: Scalar>(
    input: &Tensor3<T>,
    weight: &[T],
    kernel: usize,
    stride: usize,
    pad: usize,
    out_shape: Shape,
) -> Tensor3<T> {
    let in_shape = input.shape;
    let mut out = Tensor3::zeros(out_shape);
    let plane = out_shape.plane();
    for oc in 0..out_shape.c {
        let dst = &mut out.data[oc * plane..(oc + 1) * plane];
        for ic in 0..in_shape.c {
            let src = input.channel(ic);
            for ky in 0..kernel {
                let (ylo, yhi) = tap_range(ky, stride, pad, in_shape.h, out_shape.h);
                for kx in 0..kernel {
                    let w = weight[((oc * in_shape.c + ic) * kernel + ky) * kernel + kx];
                    let (xlo, xhi) = tap_range(kx, stride, pad, in_shape.w, out_shape.w);
                    for oy in ylo..yhi {
                        let iy = oy * stride + ky - pad;
                        let row = &src[iy * in_shape.w..(iy + 1) * in_shape.w];
                        let drow = &mut dst[oy * out_shape.w..(oy + 1) * out_shape.w];
                        for ox in xlo..xhi {
                            drow[ox] += w * row[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Max over each window; padded cells never win.
pub(crate) fn max_pool<T: Scalar>(
    input: &Tensor3<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_shape: Shape,
) -> Tensor3<T> {
    let s = input.shape;
    let mut out = Tensor3::zeros(out_shape);
    for c in 0..s.c {
        for oy in 0..out_shape.h {
            for ox in 0..out_shape.w {
                let mut best: Option<T> = None;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= s.w as isize {
                            continue;
                        }
                        let v = input.at(c, iy as usize, ix as usize);
                        if best.is_none_or(|b| v > b) {
                            best = Some(v);
                        }
                    }
                }
                *out.at_mut(c, oy, ox) = best.unwrap_or_default();
            }
        }
    }
    out
}

pub(crate) fn channel_sums<T: Scalar>(input: &Tensor3<T>) -> Tensor3<T> {
    let mut out = Tensor3::zeros(Shape::new(input.shape.c, 1, 1));
    for c in 0..input.shape.c {
        let mut acc = T::default();
        for &v in input.channel(c) {
            acc += v;
        }
        out.data[c] = acc;
    }
    out
}

/// `weight` is `[out, in]` over the flattened input.
pub(crate) fn linear<T: Scalar>(input: &[T], weight: &[T], out_features: usize) -> Tensor3<T> {
    let n = input.len();
    let mut out = Tensor3::zeros(Shape::new(out_features, 1, 1));
    for (o, dst) in out.data.iter_mut().enumerate() {
        let row = &weight[o * n..(o + 1) * n];
        let mut acc = T::default();
        for (&w, &x) in row.iter().zip(input) {
            acc += w * x;
        }
        *dst = acc;
    }
    out
}
