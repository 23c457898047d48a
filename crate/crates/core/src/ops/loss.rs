//! KL divergence between per-pixel distributions and softmax cross-entropy.

use super::activation::softmax_row;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to predicted probabilities inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
/// Allowed deviation of a row sum from 1.
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlDivergence {
    /// Mean over rows of `Σ_k p_k (log p_k − log q_k)`.
    pub value: f64,
    /// Entries where `p_k > 0` but `q_k` fell below [`PROB_FLOOR`].
    pub clamped: usize,
}

pub fn check_simplex(t: &Tensor, what: &str) -> Result<()> {
    for r in 0..t.rows() {
        let row = t.row(r);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL || row.iter().any(|&v| v < -SIMPLEX_TOL || !v.is_finite())
        {
            return Err(Error::invalid(format!(
                "{what} row {r} is not on the simplex (sum {s})"
            )));
        }
    }
    Ok(())
}

/// `KL(p ‖ q)` averaged over rows, with `0 · log 0 := 0`.
pub fn kl_div(p_target: &Tensor, q_pred: &Tensor) -> Result<KlDivergence> {
    p_target.expect_same_shape(q_pred)?;
    check_simplex(p_target, "target distribution")?;
    check_simplex(q_pred, "predicted distribution")?;
    let mut total = 0.0;
    let mut clamped = 0;
    for (&p, &q) in p_target.data().iter().zip(q_pred.data()) {
        if p <= 0.0 {
            continue;
        }
        if q < PROB_FLOOR {
            clamped += 1;
        }
        total += p * (p.ln() - q.max(PROB_FLOOR).ln());
    }
    let rows = p_target.rows().max(1);
    Ok(KlDivergence {
        value: total / rows as f64,
        clamped,
    })
}

/// Gradient of [`kl_div`] with respect to `q_pred`; zero where the floor is active.
pub fn kl_div_backward(p_target: &Tensor, q_pred: &Tensor, upstream: f64) -> Tensor {
    let rows = p_target.rows().max(1) as f64;
    p_target
        .zip_map(q_pred, |p, q| {
            if p <= 0.0 || q < PROB_FLOOR {
                0.0
            } else {
                -upstream * p / (q * rows)
            }
        })
        .expect("kl gradient shape")
}

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy_with_grad(logits, labels)?.0)
}

/// Loss and its gradient `(softmax − onehot) / batch`.
pub fn cross_entropy_with_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    logits.expect_rank(2, "logits")?;
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::shape(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let mut grad = vec![0.0; b * c];
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        let g = &mut grad[r * c..(r + 1) * c];
        softmax_row(row, 1.0, g);
        g[y] -= 1.0;
        g.iter_mut().for_each(|v| *v /= b as f64);
    }
    let loss = loss / b.max(1) as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross_entropy"));
    }
    Ok((loss, Tensor::new(&[b, c], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::activation::channel_softmax;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..k)
            .map(|_| -rng.random::<f64>().max(1e-300).ln())
            .collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|a| a / s).collect()
    }

    #[test]
    fn kl_examples() {
        let p = Tensor::from_vec(vec![0.5, 0.5]);
        assert_eq!(kl_div(&p, &p).unwrap().value, 0.0);
        let p = Tensor::from_vec(vec![1.0, 0.0]);
        let q = Tensor::from_vec(vec![0.5, 0.5]);
        let kl = kl_div(&p, &q).unwrap();
        assert!((kl.value - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(kl.clamped, 0);
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let k = rng.random_range(1..12);
            let p = Tensor::from_vec(random_simplex(&mut rng, k));
            let q = Tensor::from_vec(random_simplex(&mut rng, k));
            assert!(kl_div(&p, &q).unwrap().value >= -1e-15);
        }
    }

    #[test]
    fn kl_clamps_and_flags_zero_prediction() {
        let p = Tensor::from_vec(vec![0.5, 0.5]);
        let q = Tensor::from_vec(vec![1.0, 0.0]);
        let kl = kl_div(&p, &q).unwrap();
        assert_eq!(kl.clamped, 1);
        assert!(kl.value.is_finite());
        assert!(
            (kl.value - 0.5 * (0.5f64.ln() - PROB_FLOOR.ln()) - 0.5 * 0.5f64.ln()).abs() < 1e-9
        );
    }

    #[test]
    fn kl_rejects_off_simplex() {
        let p = Tensor::from_vec(vec![0.6, 0.6]);
        let q = Tensor::from_vec(vec![0.5, 0.5]);
        assert!(kl_div(&p, &q).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let logits = Tensor::zeros(&[1, 4]);
        let ce = cross_entropy(&logits, &[0]).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-15);

        let logits = Tensor::new(&[1, 3], vec![100.0, 0.0, 0.0]).unwrap();
        assert!(cross_entropy(&logits, &[0]).unwrap() < 1e-40);

        assert!(cross_entropy(&logits, &[3]).is_err());
    }

    #[test]
    fn cross_entropy_equals_kl_from_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let c = rng.random_range(2..8);
            let logits = Tensor::randn(&[1, c], 2.0, &mut rng);
            let y = rng.random_range(0..c);
            let mut one_hot = vec![0.0; c];
            one_hot[y] = 1.0;
            let q = channel_softmax(&logits, 1.0).unwrap();
            let kl = kl_div(&Tensor::new(&[1, c], one_hot).unwrap(), &q).unwrap();
            let ce = cross_entropy(&logits, &[y]).unwrap();
            // entropy of a one-hot target is zero
            assert!((kl.value - ce).abs() < 1e-12);
        }
    }
}
