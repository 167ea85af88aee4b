//! Raw compute routines behind the tape ops.
//!
//! Convolutions are lowered to one GEMM per batch item via im2col. The
//! GEMM accumulates row-by-row in a fixed k-order, so results are
//! bitwise identical whether rows are computed serially or in parallel.

use rayon::prelude::*;

use crate::error::TensorError;
use crate::num::Element;

/// `c[m,n] += a[m,k] * b[k,n]`, all row-major.
pub fn gemm_acc<T: Element>(par: bool, c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    if par && m > 1 && k * n > 4096 {
        c.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(crow, arow)| gemm_row(crow, arow, b, k, n));
    } else {
        for (crow, arow) in c.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
            gemm_row(crow, arow, b, k, n);
        }
    }
}

#[inline]
fn gemm_row<T: Element>(crow: &mut [T], arow: &[T], b: &[T], k: usize, n: usize) {
    let crow = &mut crow[..n];
    let mut p = 0;
    while p + 4 <= k {
        let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
        let b0 = &b[p * n..p * n + n];
        let b1 = &b[(p + 1) * n..(p + 1) * n + n];
        let b2 = &b[(p + 2) * n..(p + 2) * n + n];
        let b3 = &b[(p + 3) * n..(p + 3) * n + n];
        for j in 0..n {
            crow[j] = crow[j] + a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
        }
        p += 4;
    }
    while p < k {
        let av = arow[p];
        let brow = &b[p * n..p * n + n];
        for j in 0..n {
            crow[j] = crow[j] + av * brow[j];
        }
        p += 1;
    }
}

pub fn transpose<T: Element>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = vec![T::zero(); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Output extent of a direct convolution along one spatial dimension.
pub fn conv_out_extent(
    op: &'static str,
    dim: &'static str,
    size: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<usize, TensorError> {
    let padded = size + 2 * padding;
    if k > padded {
        return Err(TensorError::Unsupported {
            op,
            detail: format!("kernel {k} exceeds padded {dim} extent {padded}"),
        });
    }
    let span = padded - k;
    if span % stride != 0 {
        return Err(TensorError::NonIntegralOutput {
            op,
            dim,
            size,
            kernel: k,
            stride,
            padding,
        });
    }
    Ok(span / stride + 1)
}

/// Fills `col` (`[c*k*k, out_h*out_w]` row-major) from one `[C,H,W]` image.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Element>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    col: &mut [T],
) {
    debug_assert_eq!(col.len(), c * k * k * out_h * out_w);
    let plane = h * w;
    let patch = out_h * out_w;
    for r in 0..c * k * k {
        let ci = r / (k * k);
        let ky = (r / k) % k;
        let kx = r % k;
        let dst_row = &mut col[r * patch..(r + 1) * patch];
        // valid ox range: 0 <= ox*stride + kx - pad < w
        let (ox_lo, ox_hi) = valid_range(kx, pad, stride, w, out_w);
        for oy in 0..out_h {
            let dst = &mut dst_row[oy * out_w..(oy + 1) * out_w];
            let iy = (oy * stride + ky) as isize - pad as isize;
            if iy < 0 || iy >= h as isize {
                dst.fill(T::zero());
                continue;
            }
            let src = &input[ci * plane + iy as usize * w..ci * plane + (iy as usize + 1) * w];
            dst[..ox_lo].fill(T::zero());
            dst[ox_hi..].fill(T::zero());
            if ox_hi <= ox_lo {
                continue;
            }
            if stride == 1 {
                let ix0 = ox_lo + kx - pad;
                dst[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
            } else {
                for ox in ox_lo..ox_hi {
                    dst[ox] = src[ox * stride + kx - pad];
                }
            }
        }
    }
}

/// Scatter-add of a column matrix back into image space (im2col adjoint).
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<T: Element>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    dst: &mut [T],
) {
    debug_assert_eq!(dst.len(), c * h * w);
    let plane = h * w;
    let patch = out_h * out_w;
    for r in 0..c * k * k {
        let ci = r / (k * k);
        let ky = (r / k) % k;
        let kx = r % k;
        let src_row = &col[r * patch..(r + 1) * patch];
        let (ox_lo, ox_hi) = valid_range(kx, pad, stride, w, out_w);
        for oy in 0..out_h {
            let iy = (oy * stride + ky) as isize - pad as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let src = &src_row[oy * out_w..(oy + 1) * out_w];
            let drow = &mut dst[ci * plane + iy as usize * w..ci * plane + (iy as usize + 1) * w];
            for ox in ox_lo..ox_hi {
                let ix = ox * stride + kx - pad;
                drow[ix] = drow[ix] + src[ox];
            }
        }
    }
}

fn valid_range(kx: usize, pad: usize, stride: usize, w: usize, out_w: usize) -> (usize, usize) {
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx).div_ceil(stride)
    };
    let hi_excl = if w + pad > kx {
        ((w + pad - kx - 1) / stride + 1).min(out_w)
    } else {
        0
    };
    (lo.min(out_w), hi_excl.max(lo).min(out_w))
}

/// 2x2 max pooling with first-occurrence argmax (block scan order:
/// top-left, top-right, bottom-left, bottom-right).
pub fn maxpool2_fwd<T: Element>(input: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u8>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); c * oh * ow];
    let mut arg = vec![0u8; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ci * h * w + 2 * oy * w + 2 * ox;
                let cand = [input[base], input[base + 1], input[base + w], input[base + w + 1]];
                let mut best = 0usize;
                for (i, &v) in cand.iter().enumerate().skip(1) {
                    if v > cand[best] {
                        best = i;
                    }
                }
                let o = ci * oh * ow + oy * ow + ox;
                out[o] = cand[best];
                arg[o] = best as u8;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_bwd<T: Element>(
    grad_out: &[T],
    arg: &[u8],
    c: usize,
    h: usize,
    w: usize,
    grad_in: &mut [T],
) {
    let (oh, ow) = (h / 2, w / 2);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = ci * oh * ow + oy * ow + ox;
                let base = ci * h * w + 2 * oy * w + 2 * ox;
                let idx = match arg[o] {
                    0 => base,
                    1 => base + 1,
                    2 => base + w,
                    _ => base + w + 1,
                };
                grad_in[idx] = grad_in[idx] + grad_out[o];
            }
        }
    }
}

/// Per-channel mean and `1/sqrt(var + eps)` over one `[C,H,W]` item.
pub fn channel_stats<T: Element>(input: &[T], c: usize, plane: usize, eps: T) -> Vec<(T, T)> {
    let inv_n = T::from_f64(1.0 / plane as f64);
    (0..c)
        .map(|ci| {
            let x = &input[ci * plane..(ci + 1) * plane];
            let mean = x.iter().copied().sum::<T>() * inv_n;
            let var = x
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                * inv_n;
            (mean, T::one() / (var + eps).sqrt())
        })
        .collect()
}

/// Box-filter 2x downsampling of a `[C,H,W]` image (even extents).
pub fn box_down2<T: Element>(input: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ci * h * w + 2 * oy * w + 2 * ox;
                out[ci * oh * ow + oy * ow + ox] =
                    (input[base] + input[base + 1] + input[base + w] + input[base + w + 1])
                        * quarter;
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling of a `[C,H,W]` image.
pub fn nn_up2<T: Element>(input: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[ci * oh * ow + y * ow + x] = input[ci * h * w + (y / 2) * w + x / 2];
            }
        }
    }
    out
}
