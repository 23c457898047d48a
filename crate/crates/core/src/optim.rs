//! Stochastic gradient descent with (Nesterov) momentum.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// One buffer per parameter, created lazily on the first update.
    pub velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(lr: f64, momentum: f64, nesterov: bool, weight_decay: f64) -> Self {
        OptimizerState {
            lr,
            momentum,
            nesterov,
            weight_decay,
            velocity: Vec::new(),
        }
    }
}

/// One update step:
///
/// ```text
/// g ← g + wd·w
/// v ← m·v + g
/// w ← w − lr·(g + m·v)    (Nesterov)
/// w ← w − lr·v            (heavy ball)
/// ```
///
/// With `m = 0` both reduce to `w ← w − lr·g`.
pub fn sgd_update(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(Error::shape(
            "optimizer state does not match the parameter list",
        ));
    }
    for ((w, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        w.expect_same_shape(g)?;
        w.expect_same_shape(v)?;
        let (m, lr, wd) = (state.momentum, state.lr, state.weight_decay);
        for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let gi = gi + wd * *wi;
            *vi = m * *vi + gi;
            let step = if state.nesterov { gi + m * *vi } else { *vi };
            *wi -= lr * step;
        }
    }
    Ok(())
}

/// Learning rate after applying `factor` once for every milestone `≤ epoch`.
pub fn step_schedule(base_lr: f64, epoch: usize, milestones: &[usize], factor: f64) -> f64 {
    milestones
        .iter()
        .filter(|&&m| epoch >= m)
        .fold(base_lr, |lr, _| lr * factor)
}
