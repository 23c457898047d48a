//! 3×3 cross-correlation over NHWC feature maps via im2col + gemm.

use super::gemm::{gemm, MatRef};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(Error::shape(format!(
                "conv3x3 wants N×H×W×C input and K×C×3×3 kernels, got {x_shape:?} and {w_shape:?}"
            )));
        }
        if w_shape[2] != 3 || w_shape[3] != 3 || w_shape[1] != x_shape[3] {
            return Err(Error::shape(format!(
                "conv3x3 kernels {w_shape:?} do not fit input {x_shape:?}"
            )));
        }
        if pad > 1 || !(1..=2).contains(&stride) {
            return Err(Error::invalid(format!(
                "conv3x3 supports pad in {{0,1}} and stride in {{1,2}}, got pad={pad} stride={stride}"
            )));
        }
        let extent = |n: usize| -> Result<usize> {
            let padded = n + 2 * pad;
            if padded < 3 {
                return Err(Error::shape(format!(
                    "conv3x3 output extent < 1 for input extent {n} with pad {pad}"
                )));
            }
            Ok((padded - 3) / stride + 1)
        };
        Ok(ConvGeometry {
            batch: x_shape[0],
            in_h: x_shape[1],
            in_w: x_shape[2],
            in_c: x_shape[3],
            out_h: extent(x_shape[1])?,
            out_w: extent(x_shape[2])?,
            out_c: w_shape[0],
            stride,
            pad,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_c * 9
    }

    fn out_pixels(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Patch matrix with one row per output pixel, columns ordered `(c, ky, kx)`
/// to match the row-major `K × C × 3 × 3` kernel layout.
fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let pl = g.patch_len();
    let mut cols = vec![0.0; g.out_pixels() * pl];
    let mut row = 0;
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut cols[row * pl..(row + 1) * pl];
                for ky in 0..3 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let src = ((n * g.in_h + iy as usize) * g.in_w + ix as usize) * g.in_c;
                        let tap = ky * 3 + kx;
                        for c in 0..g.in_c {
                            dst[c * 9 + tap] = x[src + c];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let pl = g.patch_len();
    let mut dx = vec![0.0; g.batch * g.in_h * g.in_w * g.in_c];
    let mut row = 0;
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &cols[row * pl..(row + 1) * pl];
                for ky in 0..3 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let dst = ((n * g.in_h + iy as usize) * g.in_w + ix as usize) * g.in_c;
                        let tap = ky * 3 + kx;
                        for c in 0..g.in_c {
                            dx[dst + c] += src[c * 9 + tap];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    dx
}

/// `out[n, oy, ox, k] = Σ_{c, ky, kx} w[k, c, ky, kx] · x[n, oy·s + ky − pad, ox·s + kx − pad, c]`
/// with zero padding.
pub fn conv3x3(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    Ok(conv3x3_with_patches(x, w, stride, pad)?.0)
}

/// [`conv3x3`] that also returns the patch matrix, for reuse in the backward pass.
pub(crate) fn conv3x3_with_patches(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Vec<f64>)> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
    let cols = im2col(x.data(), &g);
    let mut out = vec![0.0; g.out_pixels() * g.out_c];
    gemm(
        MatRef::new(&cols, g.out_pixels(), g.patch_len()),
        MatRef::new(w.data(), g.out_c, g.patch_len()).t(),
        0.0,
        &mut out,
    );
    let out = Tensor::new(&[g.batch, g.out_h, g.out_w, g.out_c], out)?.check_finite("conv3x3")?;
    Ok((out, cols))
}

/// Gradients of [`conv3x3`] with respect to `(x, w)`.
pub fn conv3x3_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
    let cols = im2col(x.data(), &g);
    let (dx, dw) = conv3x3_backward_from_patches(x.shape(), w, &cols, grad_out, stride, pad, true)?;
    Ok((dx.expect("input gradient requested"), dw))
}

/// Backward pass from saved patches; the input gradient is skipped unless `need_dx`.
pub(crate) fn conv3x3_backward_from_patches(
    x_shape: &[usize],
    w: &Tensor,
    cols: &[f64],
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    let g = ConvGeometry::new(x_shape, w.shape(), stride, pad)?;
    let pl = g.patch_len();
    let gout = MatRef::new(grad_out.data(), g.out_pixels(), g.out_c);

    let mut dw = vec![0.0; g.out_c * pl];
    gemm(
        gout.t(),
        MatRef::new(cols, g.out_pixels(), pl),
        0.0,
        &mut dw,
    );

    let dx = if need_dx {
        let mut dcols = vec![0.0; g.out_pixels() * pl];
        gemm(gout, MatRef::new(w.data(), g.out_c, pl), 0.0, &mut dcols);
        Some(Tensor::new(x_shape, col2im(&dcols, &g))?)
    } else {
        None
    };
    Ok((dx, Tensor::new(w.shape(), dw)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad).unwrap();
        let mut out = Tensor::zeros(&[g.batch, g.out_h, g.out_w, g.out_c]);
        for n in 0..g.batch {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    for k in 0..g.out_c {
                        let mut acc = 0.0;
                        for c in 0..g.in_c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0
                                        || ix < 0
                                        || iy >= g.in_h as isize
                                        || ix >= g.in_w as isize
                                    {
                                        continue;
                                    }
                                    let xv = x.data()[((n * g.in_h + iy as usize) * g.in_w
                                        + ix as usize)
                                        * g.in_c
                                        + c];
                                    let wv = w.data()[((k * g.in_c + c) * 3 + ky) * 3 + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data_mut()[((n * g.out_h + oy) * g.out_w + ox) * g.out_c + k] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn sum_kernel_on_ones() {
        let x = Tensor::ones(&[1, 3, 3, 1]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let out = conv3x3(&x, &w, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 5, 4, 3], 1.0, &mut rng);
        let mut w = Tensor::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            w.data_mut()[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        let out = conv3x3(&x, &w, 1, 1).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 0), (2, 1)] {
            let x = Tensor::randn(&[2, 7, 6, 3], 1.0, &mut rng);
            let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
            let got = conv3x3(&x, &w, stride, pad).unwrap();
            let want = naive(&x, &w, stride, pad);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn output_extent_formula() {
        let g = ConvGeometry::new(&[1, 32, 32, 3], &[8, 3, 3, 3], 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (16, 16));
        let g = ConvGeometry::new(&[1, 5, 5, 3], &[8, 3, 3, 3], 2, 0).unwrap();
        assert_eq!((g.out_h, g.out_w), (2, 2));
    }

    #[test]
    fn rejects_empty_output_and_bad_args() {
        assert!(ConvGeometry::new(&[1, 2, 2, 1], &[1, 1, 3, 3], 1, 0).is_err());
        assert!(ConvGeometry::new(&[1, 4, 4, 1], &[1, 1, 3, 3], 3, 0).is_err());
        assert!(ConvGeometry::new(&[1, 4, 4, 1], &[1, 1, 3, 3], 1, 2).is_err());
    }
}
