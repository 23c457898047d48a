use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    x.zip_map(grad_out, |v, g| if v > 0.0 { g } else { 0.0 })
        .expect("relu gradient shape")
}

/// Softmax over the last axis of `temperature · x`, stabilized by subtracting
/// the row maximum.
pub fn channel_softmax(x: &Tensor, temperature: f64) -> Result<Tensor> {
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(Error::invalid(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let c = x.last_dim();
    let mut out = vec![0.0; x.len()];
    for r in 0..x.rows() {
        softmax_row(x.row(r), temperature, &mut out[r * c..(r + 1) * c]);
    }
    Tensor::new(x.shape(), out)?.check_finite("channel_softmax")
}

pub(crate) fn softmax_row(x: &[f64], temperature: f64, out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (temperature * (v - max)).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Given the softmax output `p`, maps upstream `g` to `T · p ⊙ (g − ⟨g, p⟩)` per row.
pub fn channel_softmax_backward(p: &Tensor, grad_out: &Tensor, temperature: f64) -> Tensor {
    let c = p.last_dim();
    let mut dx = vec![0.0; p.len()];
    for r in 0..p.rows() {
        let pr = p.row(r);
        let gr = grad_out.row(r);
        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..c {
            dx[r * c + j] = temperature * pr[j] * (gr[j] - dot);
        }
    }
    Tensor::new(p.shape(), dx).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_examples() {
        let x = Tensor::from_vec(vec![-1.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
        let neg = Tensor::from_vec(vec![-3.0, -0.1, -7.0]);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_examples() {
        let s = channel_softmax(&Tensor::from_vec(vec![0.0, 0.0]), 1.0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = channel_softmax(&Tensor::from_vec(vec![1000.0, 0.0]), 1.0).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] < 1e-300);

        let a = channel_softmax(&Tensor::from_vec(vec![0.3, 0.1]), 2.0).unwrap();
        let b = channel_softmax(&Tensor::from_vec(vec![0.6, 0.2]), 1.0).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        assert!(channel_softmax(&Tensor::from_vec(vec![0.0]), 0.0).is_err());
        assert!(channel_softmax(&Tensor::from_vec(vec![0.0]), -1.0).is_err());
    }
}
