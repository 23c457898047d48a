//! Per-channel batch normalization over the last axis.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Exponential moving averages of the batch statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
    pub initialized: bool,
    pub momentum: f64,
    pub eps: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
            initialized: false,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Values the backward pass needs from a train-mode forward.
#[derive(Debug, Clone)]
pub struct BnSaved {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

fn check_params(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<usize> {
    let c = x.last_dim();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(format!(
            "batch norm over {c} channels got γ {:?}, β {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(c)
}

/// Whitens with the batch statistics and folds them into `stats`.
///
/// Running variance tracks the same biased estimator used for whitening, so a
/// repeated batch drives eval output to the train output.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut RunningStats,
) -> Result<(Tensor, BnSaved)> {
    let c = check_params(x, gamma, beta)?;
    let n = x.rows();
    if n < 2 {
        return Err(Error::invalid(format!(
            "train-mode batch norm needs at least 2 values per channel, got {n}"
        )));
    }
    let xs = x.data();
    let mut mean = vec![0.0; c];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(&xs[r * c..(r + 1) * c]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; c];
    for r in 0..n {
        for ((s, v), m) in var.iter_mut().zip(&xs[r * c..(r + 1) * c]).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= n as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();

    let mut xhat = vec![0.0; xs.len()];
    let mut out = vec![0.0; xs.len()];
    for r in 0..n {
        for j in 0..c {
            let i = r * c + j;
            xhat[i] = (xs[i] - mean[j]) * inv_std[j];
            out[i] = gamma.data()[j] * xhat[i] + beta.data()[j];
        }
    }

    if stats.initialized {
        let m = stats.momentum;
        for j in 0..c {
            stats.mean.data_mut()[j] = (1.0 - m) * stats.mean.data()[j] + m * mean[j];
            stats.var.data_mut()[j] = (1.0 - m) * stats.var.data()[j] + m * var[j];
        }
    } else {
        stats.mean = Tensor::from_vec(mean);
        stats.var = Tensor::from_vec(var);
        stats.initialized = true;
    }

    Ok((
        Tensor::new(x.shape(), out)?.check_finite("batch_norm")?,
        BnSaved {
            xhat: Tensor::new(x.shape(), xhat)?,
            inv_std,
        },
    ))
}

pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &RunningStats,
) -> Result<Tensor> {
    let c = check_params(x, gamma, beta)?;
    if !stats.initialized {
        return Err(Error::invalid(
            "eval-mode batch norm before any train step: running statistics uninitialized",
        ));
    }
    let inv_std: Vec<f64> = stats
        .var
        .data()
        .iter()
        .map(|v| 1.0 / (v + stats.eps).sqrt())
        .collect();
    let out = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let j = i % c;
            gamma.data()[j] * (v - stats.mean.data()[j]) * inv_std[j] + beta.data()[j]
        })
        .collect();
    Tensor::new(x.shape(), out)?.check_finite("batch_norm")
}

/// Gradients of train-mode batch norm with respect to `(x, γ, β)`.
pub fn batch_norm_backward(
    saved: &BnSaved,
    gamma: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = gamma.len();
    let n = saved.xhat.rows();
    let xhat = saved.xhat.data();
    let g = grad_out.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for r in 0..n {
        for j in 0..c {
            let i = r * c + j;
            dgamma[j] += g[i] * xhat[i];
            dbeta[j] += g[i];
        }
    }
    // dx = γ·inv_std/n · (n·g − Σg − x̂·Σ(g·x̂))
    let nf = n as f64;
    let dx = (0..n * c)
        .map(|i| {
            let j = i % c;
            gamma.data()[j] * saved.inv_std[j] / nf * (nf * g[i] - dbeta[j] - xhat[i] * dgamma[j])
        })
        .collect();
    (
        Tensor::new(saved.xhat.shape(), dx).unwrap(),
        Tensor::from_vec(dgamma),
        Tensor::from_vec(dbeta),
    )
}
