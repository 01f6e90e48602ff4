//! Raw numeric kernels shared by the tape and by callers that need a
//! single gradient without recording a graph (the adaptive loss weight
//! reads the last decoder layer's weight gradient this way).
//!
//! Images are single `[C, H, W]` tensors; batching happens one level up.

use super::Scalar;

/// Geometry of a 2-D convolution window over a `[C, H, W]` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn is_valid(&self) -> bool {
        self.stride >= 1
            && self.kernel >= 1
            && self.kernel <= self.height + 2 * self.pad
            && self.kernel <= self.width + 2 * self.pad
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Checked row-major matrix product `c = alpha * op(a) * op(b) + beta * c`
/// where `op` optionally transposes. `a` is stored `[m, k]` (or `[k, m]` when
/// `trans_a`), `b` is `[k, n]` (or `[n, k]` when `trans_b`), `c` is `[m, n]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v = *v * beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

/// Unfolds image patches into a `[C*k*k, Ho*Wo]` column matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut cols = vec![T::zero(); g.col_rows() * ho * wo];
    let (h, w, k, s, p) = (g.height as isize, g.width as isize, g.kernel, g.stride, g.pad);
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let ih = (oh * s + ki) as isize - p as isize;
                    if ih < 0 || ih >= h {
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    let out = &mut dst[oh * wo..(oh + 1) * wo];
                    for (ow, o) in out.iter_mut().enumerate() {
                        let iw = (ow * s + kj) as isize - p as isize;
                        if iw >= 0 && iw < w {
                            *o = src[iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back into an image, summing
/// overlapping contributions in a fixed order.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut x = vec![T::zero(); g.channels * g.height * g.width];
    let (h, w, k, s, p) = (g.height as isize, g.width as isize, g.kernel, g.stride, g.pad);
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let ih = (oh * s + ki) as isize - p as isize;
                    if ih < 0 || ih >= h {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for ow in 0..wo {
                        let iw = (ow * s + kj) as isize - p as isize;
                        if iw >= 0 && iw < w {
                            dst[iw as usize] += src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[C_in, H, W] * [C_out, C_in, k, k] -> [C_out, Ho, Wo]`.
pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], c_out: usize, g: &ConvGeom) -> Vec<T> {
    let cols = im2col(x, g);
    let n = g.col_cols();
    let mut out = vec![T::zero(); c_out * n];
    gemm(c_out, g.col_rows(), n, T::one(), w, false, &cols, false, T::zero(), &mut out);
    out
}

/// Gradient of a convolution with respect to its input image.
pub fn conv2d_grad_input<T: Scalar>(dout: &[T], w: &[T], c_out: usize, g: &ConvGeom) -> Vec<T> {
    let n = g.col_cols();
    let mut dcols = vec![T::zero(); g.col_rows() * n];
    gemm(g.col_rows(), c_out, n, T::one(), w, true, dout, false, T::zero(), &mut dcols);
    col2im(&dcols, g)
}

/// Gradient of a convolution with respect to its weight, `[C_out, C_in, k, k]`.
pub fn conv2d_grad_weight<T: Scalar>(x: &[T], dout: &[T], c_out: usize, g: &ConvGeom) -> Vec<T> {
    let cols = im2col(x, g);
    let n = g.col_cols();
    let mut dw = vec![T::zero(); c_out * g.col_rows()];
    gemm(c_out, n, g.col_rows(), T::one(), dout, false, &cols, true, T::zero(), &mut dw);
    dw
}

/// Transposed convolution. `out_geom` describes the *output* image as if it
/// were the input of the forward convolution whose adjoint this is; `x` is
/// `[C_in, Ho, Wo]` of that convolution and `w` is `[C_in, C_out, k, k]`.
pub fn conv_transpose2d_forward<T: Scalar>(x: &[T], w: &[T], c_in: usize, out_geom: &ConvGeom) -> Vec<T> {
    conv2d_grad_input(x, w, c_in, out_geom)
}

/// Returns (grad wrt input `[C_in, H, W]`, grad wrt weight `[C_in, C_out, k, k]`).
pub fn conv_transpose2d_backward<T: Scalar>(
    x: &[T],
    dout: &[T],
    w: &[T],
    c_in: usize,
    out_geom: &ConvGeom,
) -> (Vec<T>, Vec<T>) {
    (
        conv2d_forward(dout, w, c_in, out_geom),
        conv2d_grad_weight(dout, x, c_in, out_geom),
    )
}

/// Transposes axes of a row-major array.
pub fn permute<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = super::strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], c_out: usize, g: &ConvGeom) -> Vec<f64> {
        let (ho, wo) = (g.out_height(), g.out_width());
        let mut out = vec![0.0; c_out * ho * wo];
        for co in 0..c_out {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..g.channels {
                        for ki in 0..g.kernel {
                            for kj in 0..g.kernel {
                                let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                                let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                                if ih < 0 || iw < 0 || ih >= g.height as isize || iw >= g.width as isize {
                                    continue;
                                }
                                acc += x[(ci * g.height + ih as usize) * g.width + iw as usize]
                                    * w[((co * g.channels + ci) * g.kernel + ki) * g.kernel + kj];
                            }
                        }
                    }
                    out[(co * ho + oh) * wo + ow] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // [2,3]
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // [3,4]
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, 1.0, &a, false, &b, false, 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // a^T stored as [3,2]
        let at: Vec<f64> = (0..3).flat_map(|k| (0..2).map(move |i| (i * 3 + k) as f64)).collect();
        let mut c2 = vec![0.0; 8];
        gemm(2, 3, 4, 1.0, &at, true, &b, false, 0.0, &mut c2);
        assert_eq!(c, c2);
    }

    #[test]
    fn conv_matches_direct_loops() {
        let g = ConvGeom { channels: 2, height: 5, width: 6, kernel: 3, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..60).map(|v| ((v * 7) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..54).map(|v| ((v * 5) % 7) as f64 * 0.1 - 0.3).collect();
        let got = conv2d_forward(&x, &w, 3, &g);
        let want = naive_conv(&x, &w, 3, &g);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { channels: 2, height: 4, width: 5, kernel: 3, stride: 1, pad: 1 };
        let x: Vec<f64> = (0..40).map(|v| (v as f64).sin()).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|v| (v as f64 * 0.3).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, &g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn permute_swaps_axes() {
        let data: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let (out, shape) = permute(&data, &[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(out, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let (back, _) = permute(&out, &shape, &inverse_permutation(&[1, 0]));
        assert_eq!(back, data);
    }
}
