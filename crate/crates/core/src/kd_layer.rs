//! The residual knowledge-distillation layer.
//!
//! ```text
//! x ─┬──────────────────────────────────────────────(+)── x̂ = x + α·x′
//!    └─ ℓ2 ─ 1×1 ω̂ ·γ_ω ─ a ─┬─ assign ─ p ─ 1×1 ν̂ ·γ_ν ─ x′
//!                             └─ softmax ─ p_S   (compared with the teacher's p_T)
//! ```
//!
//! Matching kernels `ω` (`K × d`) and embedding kernels `ν` (`d × K`) are kept
//! unit-norm: rows of `ω`, columns of `ν`. The forward pass normalizes them
//! again on the tape, so gradients see the normalization, and
//! [`KdLayerParams::renormalize`] projects the stored values back after every
//! optimizer step.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{self, norm::RunningStats, Mode};
use crate::seed::rng_for;
use crate::tensor::Tensor;
use rand::Rng;

/// How the layer turns similarity scores into an assignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AssignMode {
    /// Batch-norm whitening plus ReLU, left unnormalized.
    BnRelu,
    /// Entropy-smoothed assignment with rejection threshold `mu`.
    ExplicitSoftmax { mu: f64, eps: f64 },
}

impl AssignMode {
    pub const DEFAULT_MU: f64 = 0.0;
    pub const DEFAULT_EPS: f64 = 4.0;

    pub fn explicit_default() -> Self {
        AssignMode::ExplicitSoftmax {
            mu: Self::DEFAULT_MU,
            eps: Self::DEFAULT_EPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdLayerParams {
    /// Matching kernels, `K × d`, unit rows.
    pub omega: Tensor,
    pub gamma_omega: Tensor,
    /// Embedding kernels, `d × K`, unit columns. `None` gives a loss-only
    /// layer whose output is always `x`.
    pub nu: Option<Tensor>,
    pub gamma_nu: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub bn_stats: RunningStats,
    pub alpha: f64,
    pub mode: AssignMode,
    pub pred_temperature: f64,
}

/// Tape handles produced by [`KdLayerParams::forward`].
#[derive(Debug, Clone)]
pub struct KdForward {
    pub x_hat: Var,
    /// Student predictions `softmax(a)` per pixel.
    pub p_s: Var,
    /// Similarity scores `a`.
    pub scores: Var,
    /// The assignment `p`, when the embedding branch ran.
    pub assignment: Option<Var>,
    /// Whitened scores entering the ReLU, in BN-ReLU mode.
    pub pre_activation: Option<Var>,
    /// Parameter handles, ordered as [`KdLayerParams::param_names`].
    pub params: Vec<Var>,
}

/// Standard-normal `rows × cols` matrix, before any normalization.
pub fn draw_kernels<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0, rng)
}

/// Fresh layer for `d` input channels and `k` templates. `ω` and `ν` come from
/// separate seed streams, so dropping `ν` leaves `ω` unchanged.
pub fn init_kd_layer(
    d: usize,
    k: usize,
    alpha: f64,
    mode: AssignMode,
    seed: u64,
) -> Result<KdLayerParams> {
    if d == 0 || k == 0 {
        return Err(Error::invalid(format!(
            "KD layer needs d ≥ 1 and K ≥ 1, got d={d}, K={k}"
        )));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!(
            "α must be finite and ≥ 0, got {alpha}"
        )));
    }
    if let AssignMode::ExplicitSoftmax { mu, eps } = mode {
        if !(eps > 0.0 && eps.is_finite() && mu.is_finite()) {
            return Err(Error::invalid(format!(
                "explicit assignment needs ε > 0, got ε={eps}, μ={mu}"
            )));
        }
    }
    let omega = draw_kernels(k, d, &mut rng_for(seed, "kd.omega"));
    let nu_rows = draw_kernels(k, d, &mut rng_for(seed, "kd.nu"));
    let mut layer = KdLayerParams {
        omega,
        gamma_omega: Tensor::ones(&[1]),
        nu: Some(nu_rows.transpose2()?),
        gamma_nu: Tensor::ones(&[1]),
        bn_gamma: Tensor::ones(&[k]),
        bn_beta: Tensor::zeros(&[k]),
        bn_stats: RunningStats::new(k),
        alpha,
        mode,
        pred_temperature: 1.0,
    };
    layer.renormalize();
    Ok(layer)
}

fn normalize_rows_in_place(t: &mut Tensor) {
    let (n, _) = ops::l2::l2_normalize_rows(t);
    *t = n;
}

impl KdLayerParams {
    /// Drops the embedding branch (loss-only layer).
    pub fn without_embedding(mut self) -> Self {
        self.nu = None;
        self
    }

    pub fn channels(&self) -> usize {
        self.omega.shape()[1]
    }

    pub fn templates(&self) -> usize {
        self.omega.shape()[0]
    }

    /// True when the layer output is `x` regardless of its input.
    pub fn is_passthrough(&self) -> bool {
        self.alpha == 0.0 || self.nu.is_none()
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        let mut names = vec!["omega", "gamma_omega"];
        if self.nu.is_some() {
            names.extend(["nu", "gamma_nu"]);
        }
        names.extend(["bn_gamma", "bn_beta"]);
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.omega, &self.gamma_omega];
        if let Some(nu) = &self.nu {
            out.extend([nu, &self.gamma_nu]);
        }
        out.extend([&self.bn_gamma, &self.bn_beta]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.omega, &mut self.gamma_omega];
        if let Some(nu) = &mut self.nu {
            out.extend([nu, &mut self.gamma_nu]);
        }
        out.extend([&mut self.bn_gamma, &mut self.bn_beta]);
        out
    }

    /// Restores unit-norm rows of `ω` and unit-norm columns of `ν`.
    pub fn renormalize(&mut self) {
        normalize_rows_in_place(&mut self.omega);
        if let Some(nu) = &mut self.nu {
            let mut rows = nu.transpose2().expect("ν is a matrix");
            normalize_rows_in_place(&mut rows);
            *nu = rows.transpose2().expect("ν is a matrix");
        }
    }

    /// Records the layer on `tape`. Only the layer's own parameters enter.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<KdForward> {
        let params: Vec<Var> = self
            .params()
            .into_iter()
            .map(|t| tape.param(t.clone()))
            .collect();
        self.forward_with(tape, x, &params, mode)
    }

    /// As [`KdLayerParams::forward`], with parameter handles supplied by the
    /// caller in [`KdLayerParams::param_names`] order. Only `bn_stats` is
    /// read from `self` (and updated in train mode).
    pub fn forward_with(
        &mut self,
        tape: &mut Tape,
        x: Var,
        params: &[Var],
        mode: Mode,
    ) -> Result<KdForward> {
        if params.len() != self.param_names().len() {
            return Err(Error::shape(format!(
                "KD layer takes {} parameters, got {}",
                self.param_names().len(),
                params.len()
            )));
        }
        let d = self.channels();
        let xv = tape.value(x);
        if xv.rank() < 2 || xv.last_dim() != d {
            return Err(Error::shape(format!(
                "KD layer expects {d} channels, got input {:?}",
                xv.shape()
            )));
        }
        let (omega, gamma_omega) = (params[0], params[1]);
        let nu = self.nu.as_ref().map(|_| (params[2], params[3]));
        let (bn_gamma, bn_beta) = (params[params.len() - 2], params[params.len() - 1]);

        // zero pixels stay zero and score 0 against every kernel
        let x_unit = tape.l2_normalize_rows(x);
        let omega_unit = tape.l2_normalize_rows(omega);
        let cos = tape.linear_map_1x1(x_unit, omega_unit, None)?;
        let scores = tape.scale_by(cos, gamma_omega)?;
        let p_s = tape.channel_softmax(scores, self.pred_temperature)?;

        let mut pre_activation = None;
        let (x_hat, assignment) = match nu {
            Some((nu, gamma_nu)) if self.alpha != 0.0 => {
                let p = match self.mode {
                    AssignMode::BnRelu => {
                        let w =
                            tape.batch_norm(scores, bn_gamma, bn_beta, &mut self.bn_stats, mode)?;
                        pre_activation = Some(w);
                        tape.relu(w)
                    }
                    AssignMode::ExplicitSoftmax { mu, eps } => {
                        tape.reject_softmax(scores, mu, eps)?
                    }
                };
                let nu_t = tape.transpose(nu)?;
                let nu_rows = tape.l2_normalize_rows(nu_t);
                let nu_unit = tape.transpose(nu_rows)?;
                let embedded = tape.linear_map_1x1(p, nu_unit, None)?;
                let x_prime = tape.scale_by(embedded, gamma_nu)?;
                (tape.add_scaled(x, x_prime, self.alpha)?, Some(p))
            }
            _ => (tape.add_scaled(x, x, 0.0)?, None),
        };
        Ok(KdForward {
            x_hat,
            p_s,
            scores,
            assignment,
            pre_activation,
            params: params.to_vec(),
        })
    }
}

/// Tape-free forward: returns `(x̂, p_S)`.
pub fn kd_forward(x: &Tensor, params: &mut KdLayerParams, mode: Mode) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = params.forward(&mut tape, xv, mode)?;
    Ok((tape.value(out.x_hat).clone(), tape.value(out.p_s).clone()))
}

/// Mean over pixels of `KL(p_T ‖ p_S)`.
pub fn kd_distill_loss(p_s: &Tensor, p_t: &Tensor) -> Result<f64> {
    p_s.expect_same_shape(p_t)?;
    Ok(ops::kl_div(p_t, p_s)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(seed: u64, shape: &[usize]) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn zero_alpha_is_bitwise_identity() {
        for mode in [AssignMode::BnRelu, AssignMode::explicit_default()] {
            let mut layer = init_kd_layer(5, 7, 0.0, mode, 3).unwrap();
            let x = random_input(1, &[2, 3, 3, 5]);
            let (x_hat, p_s) = kd_forward(&x, &mut layer, Mode::Train).unwrap();
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&x_hat), bits(&x));
            assert_eq!(p_s.shape(), &[2, 3, 3, 7]);
        }
    }

    #[test]
    fn zero_embedding_scale_is_identity() {
        let mut layer = init_kd_layer(4, 6, 1.0, AssignMode::BnRelu, 5).unwrap();
        layer.gamma_nu = Tensor::zeros(&[1]);
        let x = random_input(2, &[2, 2, 2, 4]);
        let (x_hat, _) = kd_forward(&x, &mut layer, Mode::Train).unwrap();
        assert_eq!(x_hat, x);
    }

    #[test]
    fn hand_composed_single_pixel() {
        let mut layer = init_kd_layer(2, 2, 0.5, AssignMode::explicit_default(), 0).unwrap();
        layer.omega = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        layer.nu = Some(Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap());
        layer.gamma_omega = Tensor::from_vec(vec![2.0]);
        layer.gamma_nu = Tensor::from_vec(vec![3.0]);
        let x = Tensor::new(&[1, 1, 1, 2], vec![3.0, 4.0]).unwrap();
        let (x_hat, p_s) = kd_forward(&x, &mut layer, Mode::Train).unwrap();

        // unit pixel (0.6, 0.8); scores 2·(0.6, 0.8)
        let a: [f64; 2] = [1.2, 1.6];
        let denom = 1.0 + (4.0 * a[0]).exp() + (4.0 * a[1]).exp();
        let p = [(4.0 * a[0]).exp() / denom, (4.0 * a[1]).exp() / denom];
        // ν swaps the two templates onto the two channels
        let x_prime = [3.0 * p[1], 3.0 * p[0]];
        let expect_x = [3.0 + 0.5 * x_prime[0], 4.0 + 0.5 * x_prime[1]];
        let z = a[0].exp() + a[1].exp();
        let expect_ps = [a[0].exp() / z, a[1].exp() / z];
        for i in 0..2 {
            assert!((x_hat.data()[i] - expect_x[i]).abs() < 1e-12);
            assert!((p_s.data()[i] - expect_ps[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_pixel_scores_zero() {
        let mut layer = init_kd_layer(3, 4, 1.0, AssignMode::explicit_default(), 1).unwrap();
        let x = Tensor::zeros(&[1, 1, 1, 3]);
        let (x_hat, p_s) = kd_forward(&x, &mut layer, Mode::Train).unwrap();
        assert!(x_hat.is_finite());
        assert!(p_s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn init_is_deterministic_and_normalized() {
        let a = init_kd_layer(8, 16, 1.0, AssignMode::BnRelu, 42).unwrap();
        let b = init_kd_layer(8, 16, 1.0, AssignMode::BnRelu, 42).unwrap();
        assert_eq!(a, b);
        for r in 0..16 {
            let n: f64 = a.omega.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        let nu_rows = a.nu.as_ref().unwrap().transpose2().unwrap();
        for r in 0..16 {
            let n: f64 = nu_rows.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert_eq!(a.clone().without_embedding().omega, a.omega);
    }

    #[test]
    fn large_bank_has_no_degenerate_rows() {
        let raw = draw_kernels(4096, 64, &mut rng_for(9, "kd.omega"));
        let min = (0..4096)
            .map(|r| raw.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min);
        assert!(min > 0.0);
        let layer = init_kd_layer(64, 4096, 1.0, AssignMode::BnRelu, 9).unwrap();
        assert!(layer.omega.is_finite());
    }

    #[test]
    fn distill_loss_examples() {
        let p = Tensor::new(&[1, 1, 1, 2], vec![0.3, 0.7]).unwrap();
        assert_eq!(kd_distill_loss(&p, &p).unwrap(), 0.0);
        let ps = Tensor::new(&[1, 1, 1, 2], vec![0.5, 0.5]).unwrap();
        let pt = Tensor::new(&[1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
        assert!((kd_distill_loss(&ps, &pt).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(kd_distill_loss(&ps, &Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn matched_target_gives_zero_kernel_gradient() {
        let mut layer = init_kd_layer(3, 5, 1.0, AssignMode::BnRelu, 4).unwrap();
        let x = random_input(6, &[2, 2, 2, 3]);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = layer.forward(&mut tape, xv, Mode::Train).unwrap();
        let target = tape.value(out.p_s).clone();
        let loss = tape.kl_div(&target, out.p_s).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        let g = tape.grad(out.params[0]).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn channel_mismatch_errors() {
        let mut layer = init_kd_layer(3, 5, 1.0, AssignMode::BnRelu, 4).unwrap();
        assert!(kd_forward(&Tensor::zeros(&[1, 2, 2, 4]), &mut layer, Mode::Train).is_err());
    }

    #[test]
    fn renormalize_after_perturbation() {
        let mut layer = init_kd_layer(6, 10, 1.0, AssignMode::BnRelu, 2).unwrap();
        layer.omega = layer.omega.map(|v| 3.0 * v + 0.1);
        layer.renormalize();
        for r in 0..10 {
            let n: f64 = layer.omega.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }
}
