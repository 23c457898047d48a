//! Per-pixel linear maps (1×1 convolutions).

use super::gemm::{gemm, MatRef};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `out[i, k] = Σ_j w[k, j] · x[i, j] + b[k]` for every pixel `i`.
///
/// `x` may have any leading shape; its last axis is the input channel axis.
/// `w` is `K × d`.
pub fn linear_map_1x1(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    w.expect_rank(2, "1x1 kernel")?;
    let (k, d) = (w.shape()[0], w.shape()[1]);
    if x.last_dim() != d || x.rank() == 0 {
        return Err(Error::shape(format!(
            "1x1 map: input {:?} vs kernels {:?}",
            x.shape(),
            w.shape()
        )));
    }
    if let Some(b) = b {
        if b.len() != k {
            return Err(Error::shape(format!(
                "1x1 bias has {} entries, want {k}",
                b.len()
            )));
        }
    }
    let rows = x.rows();
    let mut out = vec![0.0; rows * k];
    if let Some(b) = b {
        for r in 0..rows {
            out[r * k..(r + 1) * k].copy_from_slice(b.data());
        }
    }
    let beta = if b.is_some() { 1.0 } else { 0.0 };
    gemm(
        MatRef::new(x.data(), rows, d),
        MatRef::new(w.data(), k, d).t(),
        beta,
        &mut out,
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = k;
    Tensor::new(&shape, out)?.check_finite("linear_map_1x1")
}

/// Gradients of [`linear_map_1x1`] with respect to `(x, w, b)`.
pub fn linear_map_1x1_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (k, d) = (w.shape()[0], w.shape()[1]);
    let rows = x.rows();
    let g = MatRef::new(grad_out.data(), rows, k);

    let mut dx = vec![0.0; rows * d];
    gemm(g, MatRef::new(w.data(), k, d), 0.0, &mut dx);

    let mut dw = vec![0.0; k * d];
    gemm(g.t(), MatRef::new(x.data(), rows, d), 0.0, &mut dw);

    let mut db = vec![0.0; k];
    for r in 0..rows {
        for (acc, v) in db.iter_mut().zip(&grad_out.data()[r * k..(r + 1) * k]) {
            *acc += v;
        }
    }
    (
        Tensor::new(x.shape(), dx).unwrap(),
        Tensor::new(&[k, d], dw).unwrap(),
        Tensor::new(&[k], db).unwrap(),
    )
}
