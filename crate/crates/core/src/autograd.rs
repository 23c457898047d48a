//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive records its output together with whatever the backward
//! pass needs. [`Tape::backward`] walks the record in reverse and accumulates
//! gradients into every node that (transitively) depends on a parameter.

use crate::error::{Error, Result};
use crate::ops::{
    activation, conv, l2, linear,
    loss::{self, KlDivergence},
    norm::{self, BnSaved, Mode, RunningStats},
    pool,
};
use crate::tensor::Tensor;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        patches: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved,
        mode: Mode,
    },
    Relu {
        x: Var,
    },
    Softmax {
        x: Var,
        temperature: f64,
    },
    /// Softmax over the channels plus one implicit rejection logit `μ`.
    RejectSoftmax {
        x: Var,
        eps: f64,
    },
    L2Rows {
        x: Var,
        norms: Vec<f64>,
    },
    Transpose {
        x: Var,
    },
    ScaleBy {
        x: Var,
        s: Var,
    },
    AddScaled {
        x: Var,
        y: Option<Var>,
        alpha: f64,
    },
    GlobalAvgPool {
        x: Var,
    },
    AvgPool {
        x: Var,
        window: usize,
        stride: usize,
    },
    CrossEntropy {
        logits: Var,
        grad: Tensor,
    },
    KlDiv {
        target: Tensor,
        q: Var,
    },
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
    Dot {
        x: Var,
        c: Tensor,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    kl_clamped: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Trainable input; its gradient is available after [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of KL entries whose prediction hit the probability floor.
    pub fn kl_clamped(&self) -> usize {
        self.kl_clamped
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn linear_map_1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = linear::linear_map_1x1(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(out, rg, Op::Linear { x, w, b }))
    }

    pub fn conv3x3(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (out, mut patches) =
            conv::conv3x3_with_patches(self.value(x), self.value(w), stride, pad)?;
        let rg = self.any_grad(&[x, w]);
        if !rg {
            patches = Vec::new();
        }
        Ok(self.push(
            out,
            rg,
            Op::Conv {
                x,
                w,
                stride,
                pad,
                patches,
            },
        ))
    }

    /// Batch norm; train mode whitens with batch statistics and updates `stats`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
    ) -> Result<Var> {
        let (out, saved) = match mode {
            Mode::Train => {
                norm::batch_norm_train(self.value(x), self.value(gamma), self.value(beta), stats)?
            }
            Mode::Eval => {
                let out = norm::batch_norm_eval(
                    self.value(x),
                    self.value(gamma),
                    self.value(beta),
                    stats,
                )?;
                let inv_std: Vec<f64> = stats
                    .var
                    .data()
                    .iter()
                    .map(|v| 1.0 / (v + stats.eps).sqrt())
                    .collect();
                let c = inv_std.len();
                let xhat = self
                    .value(x)
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (v - stats.mean.data()[i % c]) * inv_std[i % c])
                    .collect();
                let xhat = Tensor::new(self.value(x).shape(), xhat)?;
                (out, BnSaved { xhat, inv_std })
            }
        };
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
                mode,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = activation::relu(self.value(x));
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::Relu { x })
    }

    pub fn channel_softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let out = activation::channel_softmax(self.value(x), temperature)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::Softmax { x, temperature }))
    }

    /// Entropy-smoothed assignment `p_k = e^{ε a_k} / (e^{ε μ} + Σ e^{ε a_k'})`.
    pub fn reject_softmax(&mut self, x: Var, mu: f64, eps: f64) -> Result<Var> {
        let out = crate::assign::smooth_assignment_map(self.value(x), mu, eps)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::RejectSoftmax { x, eps }))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (out, norms) = l2::l2_normalize_rows(self.value(x));
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::L2Rows { x, norms })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose2()?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::Transpose { x }))
    }

    /// Multiplies `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape(format!(
                "scale must be a single value, got {:?}",
                self.value(s).shape()
            )));
        }
        let k = self.value(s).item();
        let out = self.value(x).map(|v| v * k).check_finite("scale_by")?;
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(out, rg, Op::ScaleBy { x, s }))
    }

    /// `x + alpha · y`. With `alpha == 0` the output is a bitwise copy of `x`.
    pub fn add_scaled(&mut self, x: Var, y: Var, alpha: f64) -> Result<Var> {
        self.value(x).expect_same_shape(self.value(y))?;
        if alpha == 0.0 {
            let out = self.value(x).clone();
            let rg = self.any_grad(&[x]);
            return Ok(self.push(out, rg, Op::AddScaled { x, y: None, alpha }));
        }
        let out = self
            .value(x)
            .zip_map(self.value(y), |a, b| a + alpha * b)?
            .check_finite("add_scaled")?;
        let rg = self.any_grad(&[x, y]);
        Ok(self.push(
            out,
            rg,
            Op::AddScaled {
                x,
                y: Some(y),
                alpha,
            },
        ))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = pool::global_avg_pool(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::GlobalAvgPool { x }))
    }

    pub fn avg_pool(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let out = pool::avg_pool(self.value(x), window, stride)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::AvgPool { x, window, stride }))
    }

    /// Mean softmax cross-entropy of `logits` (batch × classes) against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, grad) = loss::cross_entropy_with_grad(self.value(logits), labels)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(Tensor::scalar(loss), rg, Op::CrossEntropy { logits, grad }))
    }

    /// `KL(target ‖ q)` averaged over rows; `q` must already be a distribution.
    pub fn kl_div(&mut self, target: &Tensor, q: Var) -> Result<Var> {
        let KlDivergence { value, clamped } = loss::kl_div(target, self.value(q))?;
        self.kl_clamped += clamped;
        let rg = self.any_grad(&[q]);
        Ok(self.push(
            Tensor::scalar(value),
            rg,
            Op::KlDiv {
                target: target.clone(),
                q,
            },
        ))
    }

    /// `Σ w_i · t_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::shape("weighted_sum terms must be scalars"));
            }
            total += w * self.value(v).item();
        }
        let rg = self.any_grad(&terms.iter().map(|t| t.0).collect::<Vec<_>>());
        let out = Tensor::scalar(total).check_finite("weighted_sum")?;
        Ok(self.push(
            out,
            rg,
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
        ))
    }

    /// `Σ x ⊙ c` for a constant `c` of the same shape.
    pub fn dot(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        self.value(x).expect_same_shape(c)?;
        let total: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a * b)
            .sum();
        let out = Tensor::scalar(total).check_finite("dot")?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::Dot { x, c: c.clone() }))
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from the scalar `loss`. The tape can be replayed only once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Autograd(
                "tape already consumed by a backward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Autograd(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let seed = Tensor::new(self.value(loss).shape(), vec![1.0])?;
        self.nodes[loss.0].grad = Some(seed);

        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.clone() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_node(i, &op, &g)?;
            self.nodes[i].op = op;
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, op: &Op, g: &Tensor) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (dx, dw, db) =
                    linear::linear_map_1x1_backward(self.value(*x), self.value(*w), g);
                self.accumulate(*x, dx);
                self.accumulate(*w, dw);
                if let Some(b) = b {
                    self.accumulate(*b, db);
                }
            }
            Op::Conv {
                x,
                w,
                stride,
                pad,
                patches,
            } => {
                let need_dx = self.nodes[x.0].requires_grad;
                let (dx, dw) = conv::conv3x3_backward_from_patches(
                    self.value(*x).shape(),
                    self.value(*w),
                    patches,
                    g,
                    *stride,
                    *pad,
                    need_dx,
                )?;
                if let Some(dx) = dx {
                    self.accumulate(*x, dx);
                }
                self.accumulate(*w, dw);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
                mode,
            } => {
                // Eval mode is a fixed affine map per channel.
                if *mode == Mode::Eval {
                    let c = saved.inv_std.len();
                    let gm = self.value(*gamma).clone();
                    let dx = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, gv)| gv * gm.data()[k % c] * saved.inv_std[k % c])
                        .collect();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for (k, gv) in g.data().iter().enumerate() {
                        dgamma[k % c] += gv * saved.xhat.data()[k];
                        dbeta[k % c] += gv;
                    }
                    self.accumulate(*x, Tensor::new(g.shape(), dx)?);
                    self.accumulate(*gamma, Tensor::from_vec(dgamma));
                    self.accumulate(*beta, Tensor::from_vec(dbeta));
                } else {
                    let (dx, dgamma, dbeta) =
                        norm::batch_norm_backward(saved, self.value(*gamma), g);
                    self.accumulate(*x, dx);
                    self.accumulate(*gamma, dgamma);
                    self.accumulate(*beta, dbeta);
                }
            }
            Op::Relu { x } => {
                let dx = activation::relu_backward(self.value(*x), g);
                self.accumulate(*x, dx);
            }
            Op::Softmax { x, temperature } => {
                let dx =
                    activation::channel_softmax_backward(&self.nodes[i].value, g, *temperature);
                self.accumulate(*x, dx);
            }
            Op::RejectSoftmax { x, eps } => {
                // Same Jacobian as a softmax whose extra (rejection) entry
                // receives no upstream gradient.
                let dx = activation::channel_softmax_backward(&self.nodes[i].value, g, *eps);
                self.accumulate(*x, dx);
            }
            Op::L2Rows { x, norms } => {
                let dx = l2::l2_normalize_rows_backward(&self.nodes[i].value, norms, g);
                self.accumulate(*x, dx);
            }
            Op::Transpose { x } => {
                let dx = g.transpose2()?;
                self.accumulate(*x, dx);
            }
            Op::ScaleBy { x, s } => {
                let k = self.value(*s).item();
                let dx = g.map(|v| v * k);
                let ds: f64 = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(a, b)| a * b)
                    .sum();
                let s_shape = self.value(*s).shape().to_vec();
                self.accumulate(*x, dx);
                self.accumulate(*s, Tensor::new(&s_shape, vec![ds])?);
            }
            Op::AddScaled { x, y, alpha } => {
                self.accumulate(*x, g.clone());
                if let Some(y) = y {
                    self.accumulate(*y, g.map(|v| v * alpha));
                }
            }
            Op::GlobalAvgPool { x } => {
                let dx = pool::global_avg_pool_backward(self.value(*x).shape(), g);
                self.accumulate(*x, dx);
            }
            Op::AvgPool { x, window, stride } => {
                let dx = pool::avg_pool_backward(self.value(*x).shape(), g, *window, *stride);
                self.accumulate(*x, dx);
            }
            Op::CrossEntropy { logits, grad } => {
                let up = g.item();
                self.accumulate(*logits, grad.map(|v| v * up));
            }
            Op::Dot { x, c } => {
                let up = g.item();
                self.accumulate(*x, c.map(|v| v * up));
            }
            Op::KlDiv { target, q } => {
                let dq = loss::kl_div_backward(target, self.value(*q), g.item());
                self.accumulate(*q, dq);
            }
            Op::WeightedSum { terms } => {
                let up = g.item();
                for &(v, w) in terms {
                    let shape = self.value(v).shape().to_vec();
                    self.accumulate(v, Tensor::new(&shape, vec![up * w])?);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.scale_by(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.value(y).item(), 9.0);
        assert_eq!(tape.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn relu_gradient_below_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![-0.5, 2.0]));
        let r = tape.relu(x);
        let w = tape.constant(Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap());
        let s = tape.linear_map_1x1(r, w, None).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Autograd(_))));

        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.scale_by(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Autograd(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.param(Tensor::scalar(5.0));
        let y = tape.scale_by(x, c).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().item(), 2.0);
    }

    #[test]
    fn add_scaled_zero_alpha_is_bitwise_copy() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-0.0, 1.5, -2.25]));
        let y = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let z = tape.add_scaled(x, y, 0.0).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(tape.value(z)), bits(tape.value(x)));
    }
}
