//! Central finite-difference gradient checks.
//!
//! [`check_gradients`] compares the tape's gradients with
//! `(f(x + h·e_j) − f(x − h·e_j)) / 2h` for every input coordinate, and
//! [`primitive_suite`] runs that comparison over every differentiable
//! primitive plus the full KD layer with its distillation loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::kd_layer::{init_kd_layer, AssignMode};
use crate::ops::{Mode, RunningStats};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, 1e-8)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(1e-8)
}

/// Largest relative error over all inputs of `f`.
///
/// `f` records a scalar function of its inputs on a fresh tape; every input is
/// registered as a parameter. `f` must be deterministic.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOL
    }
}

/// Normal entries pushed at least `margin` away from zero, so that ReLU and
/// similar kinks stay outside the finite-difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor {
    Tensor::randn(shape, 1.0, rng).map(|v| {
        if v.abs() < margin {
            margin.copysign(v)
        } else {
            v
        }
    })
}

fn simplex_rows(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> Tensor {
    let logits = Tensor::randn(&[rows, k], 1.0, rng);
    crate::ops::channel_softmax(&logits, 1.0).expect("finite logits")
}

type Case = Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>;

fn cases() -> Vec<(&'static str, Case)> {
    let mut v: Vec<(&'static str, Case)> = Vec::new();
    v.push((
        "linear_map_1x1",
        Box::new(|rng| {
            let (d, k) = (rng.random_range(1..5), rng.random_range(1..5));
            let x = Tensor::randn(&[2, 2, 2, d], 1.0, rng);
            let w = Tensor::randn(&[k, d], 1.0, rng);
            let b = Tensor::randn(&[k], 1.0, rng);
            let c = Tensor::randn(&[2, 2, 2, k], 1.0, rng);
            check_gradients(&[x, w, b], |t, v| {
                let y = t.linear_map_1x1(v[0], v[1], Some(v[2]))?;
                t.dot(y, &c)
            })
        }),
    ));
    v.push((
        "conv3x3",
        Box::new(|rng| {
            let (d, k) = (rng.random_range(1..4), rng.random_range(1..4));
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..=1);
            let x = Tensor::randn(&[2, 5, 5, d], 1.0, rng);
            let w = Tensor::randn(&[k, d, 3, 3], 1.0, rng);
            let probe = crate::ops::conv3x3(&x, &w, stride, pad)?;
            let c = Tensor::randn(probe.shape(), 1.0, rng);
            check_gradients(&[x, w], |t, v| {
                let y = t.conv3x3(v[0], v[1], stride, pad)?;
                t.dot(y, &c)
            })
        }),
    ));
    for mode in [Mode::Train, Mode::Eval] {
        v.push((
            if mode == Mode::Train {
                "batch_norm(train)"
            } else {
                "batch_norm(eval)"
            },
            Box::new(move |rng| {
                let k = rng.random_range(1..4);
                let x = Tensor::randn(&[3, 2, 2, k], 1.5, rng).map(|v| v + 0.3);
                let gamma = Tensor::uniform(&[k], 0.5, 2.0, rng);
                let beta = Tensor::randn(&[k], 1.0, rng);
                let c = Tensor::randn(x.shape(), 1.0, rng);
                let mut warm = RunningStats::new(k);
                crate::ops::batch_norm_train(
                    &Tensor::randn(&[8, k], 1.0, rng),
                    &gamma,
                    &beta,
                    &mut warm,
                )?;
                check_gradients(&[x, gamma, beta], |t, v| {
                    let mut stats = warm.clone();
                    let y = t.batch_norm(v[0], v[1], v[2], &mut stats, mode)?;
                    t.dot(y, &c)
                })
            }),
        ));
    }
    v.push((
        "relu",
        Box::new(|rng| {
            let x = away_from_zero(rng, &[3, 4], 1e-3);
            let c = Tensor::randn(&[3, 4], 1.0, rng);
            check_gradients(&[x], |t, v| {
                let y = t.relu(v[0]);
                t.dot(y, &c)
            })
        }),
    ));
    v.push((
        "channel_softmax",
        Box::new(|rng| {
            let temp = rng.random_range(0.2..3.0);
            let x = Tensor::randn(&[3, 5], 1.0, rng);
            let c = Tensor::randn(&[3, 5], 1.0, rng);
            check_gradients(&[x], |t, v| {
                let y = t.channel_softmax(v[0], temp)?;
                t.dot(y, &c)
            })
        }),
    ));
    v.push((
        "reject_softmax",
        Box::new(|rng| {
            let (mu, eps) = (rng.random_range(-1.0..1.0), rng.random_range(0.5..4.0));
            let x = Tensor::randn(&[3, 4], 1.0, rng);
            let c = Tensor::randn(&[3, 4], 1.0, rng);
            check_gradients(&[x], |t, v| {
                let y = t.reject_softmax(v[0], mu, eps)?;
                t.dot(y, &c)
            })
        }),
    ));
    v.push((
        "l2_normalize_rows",
        Box::new(|rng| {
            let x = Tensor::randn(&[4, 3], 1.0, rng);
            let c = Tensor::randn(&[4, 3], 1.0, rng);
            check_gradients(&[x], |t, v| {
                let y = t.l2_normalize_rows(v[0]);
                t.dot(y, &c)
            })
        }),
    ));
    v.push((
        "transpose",
        Box::new(|rng| {
            let x = Tensor::randn(&[3, 4], 1.0, rng);
            let c = Tensor::randn(&[4, 3], 1.0, rng);
            check_gradients(&[x], |t, v| {
                let y = t.transpose(v[0])?;
                t.dot(y, &c)
            })
        }),
    ));
    v.push((
        "scale_by",
        Box::new(|rng| {
            let x = Tensor::randn(&[2, 3], 1.0, rng);
            let s = Tensor::randn(&[1], 1.0, rng);
            let c = Tensor::randn(&[2, 3], 1.0, rng);
            check_gradients(&[x, s], |t, v| {
                let y = t.scale_by(v[0], v[1])?;
                t.dot(y, &c)
            })
        }),
    ));
    v.push((
        "add_scaled",
        Box::new(|rng| {
            let alpha = rng.random_range(-2.0..2.0);
            let x = Tensor::randn(&[2, 3], 1.0, rng);
            let y = Tensor::randn(&[2, 3], 1.0, rng);
            let c = Tensor::randn(&[2, 3], 1.0, rng);
            check_gradients(&[x, y], |t, v| {
                let z = t.add_scaled(v[0], v[1], alpha)?;
                t.dot(z, &c)
            })
        }),
    ));
    v.push((
        "global_avg_pool",
        Box::new(|rng| {
            let x = Tensor::randn(&[2, 3, 3, 2], 1.0, rng);
            let c = Tensor::randn(&[2, 2], 1.0, rng);
            check_gradients(&[x], |t, v| {
                let y = t.global_avg_pool(v[0])?;
                t.dot(y, &c)
            })
        }),
    ));
    v.push((
        "avg_pool",
        Box::new(|rng| {
            let x = Tensor::randn(&[1, 4, 4, 2], 1.0, rng);
            let c = Tensor::randn(&[1, 2, 2, 2], 1.0, rng);
            check_gradients(&[x], |t, v| {
                let y = t.avg_pool(v[0], 2, 2)?;
                t.dot(y, &c)
            })
        }),
    ));
    v.push((
        "cross_entropy",
        Box::new(|rng| {
            let x = Tensor::randn(&[4, 5], 2.0, rng);
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            check_gradients(&[x], |t, v| t.cross_entropy(v[0], &labels))
        }),
    ));
    v.push((
        "kl_div",
        Box::new(|rng| {
            let target = simplex_rows(rng, 3, 4);
            let x = Tensor::randn(&[3, 4], 1.0, rng);
            check_gradients(&[x], |t, v| {
                let q = t.channel_softmax(v[0], 1.0)?;
                t.kl_div(&target, q)
            })
        }),
    ));
    v.push((
        "weighted_sum",
        Box::new(|rng| {
            let (w1, w2) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let x = Tensor::randn(&[3], 1.0, rng);
            let y = Tensor::randn(&[3], 1.0, rng);
            let (cx, cy) = (Tensor::randn(&[3], 1.0, rng), Tensor::randn(&[3], 1.0, rng));
            check_gradients(&[x, y], |t, v| {
                let a = t.dot(v[0], &cx)?;
                let b = t.dot(v[1], &cy)?;
                t.weighted_sum(&[(a, w1), (b, w2)])
            })
        }),
    ));
    for (name, mode) in [
        ("kd_layer(bn_relu)+kl", AssignMode::BnRelu),
        ("kd_layer(explicit)+kl", AssignMode::explicit_default()),
    ] {
        v.push((name, Box::new(move |rng| kd_composite(rng, mode))));
    }
    v
}

/// Gradient check through the whole KD layer: the loss couples the residual
/// output (through a fixed projection) with the distillation KL term, so both
/// branches carry gradient to every parameter.
fn kd_composite(rng: &mut ChaCha8Rng, mode: AssignMode) -> Result<f64> {
    let (d, k) = (rng.random_range(2..5), rng.random_range(2..6));
    let seed = rng.random();
    let template = init_kd_layer(d, k, rng.random_range(0.5..1.5), mode, seed)?;
    let mut inputs = vec![Tensor::randn(&[2, 2, 2, d], 1.0, rng)];
    inputs.extend(template.params().into_iter().cloned());
    let target = simplex_rows(rng, 8, k).reshape(&[2, 2, 2, k])?;
    let c = Tensor::randn(&[2, 2, 2, d], 1.0, rng);
    let f = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let mut layer = template.clone();
        let out = layer.forward_with(t, v[0], &v[1..], Mode::Train)?;
        let kl = t.kl_div(&target, out.p_s)?;
        let proj = t.dot(out.x_hat, &c)?;
        t.weighted_sum(&[(kl, 1.0), (proj, 0.5)])
    };
    // redraw when a ReLU input sits inside the difference stencil
    if mode == AssignMode::BnRelu && near_relu_kink(&template, &inputs, 1e-3)? {
        return kd_composite(rng, mode);
    }
    check_gradients(&inputs, f)
}

fn near_relu_kink(
    template: &crate::kd_layer::KdLayerParams,
    inputs: &[Tensor],
    margin: f64,
) -> Result<bool> {
    let mut layer = template.clone();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = layer.forward_with(&mut tape, vars[0], &vars[1..], Mode::Train)?;
    let pre = out.pre_activation.map(|v| tape.value(v).clone());
    Ok(pre.is_some_and(|p| p.data().iter().any(|v| v.abs() < margin)))
}

/// Runs every case `instances` times with independent random draws.
pub fn primitive_suite(seed: u64, instances: usize) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, case) in cases() {
        let mut worst = 0.0f64;
        for _ in 0..instances {
            worst = worst.max(case(&mut rng)?);
        }
        out.push(CheckOutcome {
            name,
            instances,
            max_rel_err: worst,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0, 2.0], &[1.0, 2.1]) - 0.1 / 2.1).abs() < 1e-15);
    }

    #[test]
    fn square_has_exact_gradient() {
        let x = Tensor::from_vec(vec![1.5]);
        let err = check_gradients(&[x], |t, v| t.scale_by(v[0], v[0])).unwrap();
        assert!(err < 1e-9);
    }

    #[test]
    fn suite_passes_on_a_few_instances() {
        for outcome in primitive_suite(1, 3).unwrap() {
            assert!(outcome.passed(), "{outcome:?}");
        }
    }
}
