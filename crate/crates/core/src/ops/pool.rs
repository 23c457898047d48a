use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    GlobalAvg,
    /// Average over `window × window` blocks stepping by `stride`.
    Avg {
        window: usize,
        stride: usize,
    },
}

fn dims4(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    x.expect_rank(4, "pooled map")?;
    let s = x.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

/// `N × H × W × C` to `N × C` by averaging each channel.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, h, w, c) = dims4(x)?;
    let hw = h * w;
    let mut out = vec![0.0; n * c];
    for b in 0..n {
        let acc = &mut out[b * c..(b + 1) * c];
        for p in 0..hw {
            for (a, v) in acc.iter_mut().zip(x.row(b * hw + p)) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= hw as f64);
    }
    Tensor::new(&[n, c], out)
}

pub fn global_avg_pool_backward(x_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (n, h, w, c) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let hw = h * w;
    let mut dx = vec![0.0; n * hw * c];
    for b in 0..n {
        let g = grad_out.row(b);
        for p in 0..hw {
            for (d, gv) in dx[(b * hw + p) * c..(b * hw + p + 1) * c].iter_mut().zip(g) {
                *d = gv / hw as f64;
            }
        }
    }
    Tensor::new(x_shape, dx).unwrap()
}

fn avg_extent(n: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 || window > n {
        return Err(Error::invalid(format!(
            "average pool window {window} / stride {stride} does not fit extent {n}"
        )));
    }
    Ok((n - window) / stride + 1)
}

/// Windowed average pooling; the trailing remainder that no window covers is dropped.
pub fn avg_pool(x: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let (n, h, w, c) = dims4(x)?;
    let (oh, ow) = (
        avg_extent(h, window, stride)?,
        avg_extent(w, window, stride)?,
    );
    let area = (window * window) as f64;
    let mut out = vec![0.0; n * oh * ow * c];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = ((b * oh + oy) * ow + ox) * c;
                for ky in 0..window {
                    for kx in 0..window {
                        let src = ((b * h + oy * stride + ky) * w + ox * stride + kx) * c;
                        for j in 0..c {
                            out[dst + j] += x.data()[src + j];
                        }
                    }
                }
                out[dst..dst + c].iter_mut().for_each(|v| *v /= area);
            }
        }
    }
    Tensor::new(&[n, oh, ow, c], out)
}

pub fn avg_pool_backward(
    x_shape: &[usize],
    grad_out: &Tensor,
    window: usize,
    stride: usize,
) -> Tensor {
    let (n, h, w, c) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
    let area = (window * window) as f64;
    let mut dx = vec![0.0; n * h * w * c];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let src = ((b * oh + oy) * ow + ox) * c;
                for ky in 0..window {
                    for kx in 0..window {
                        let dst = ((b * h + oy * stride + ky) * w + ox * stride + kx) * c;
                        for j in 0..c {
                            dx[dst + j] += grad_out.data()[src + j] / area;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x_shape, dx).unwrap()
}

pub fn pool(x: &Tensor, kind: PoolKind) -> Result<Tensor> {
    match kind {
        PoolKind::GlobalAvg => global_avg_pool(x),
        PoolKind::Avg { window, stride } => avg_pool(x, window, stride),
    }
}

/// Non-overlapping average pooling down to `target_h × target_w`; the extents
/// must divide exactly.
pub fn align_pool(x: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let (_, h, w, _) = dims4(x)?;
    if target_h == 0 || target_w == 0 || h % target_h != 0 || w % target_w != 0 {
        return Err(Error::shape(format!(
            "cannot align {h}×{w} to {target_h}×{target_w} by integer pooling"
        )));
    }
    let (wy, wx) = (h / target_h, w / target_w);
    if wy != wx {
        return Err(Error::shape(format!(
            "alignment needs equal pooling windows, got {wy}×{wx}"
        )));
    }
    avg_pool(x, wy, wy)
}
