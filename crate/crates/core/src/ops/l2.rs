use crate::tensor::Tensor;

/// Scales every row (last axis) to unit ℓ2 norm. Zero rows stay zero.
pub fn l2_normalize_rows(x: &Tensor) -> (Tensor, Vec<f64>) {
    let c = x.last_dim();
    let mut out = x.data().to_vec();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = &mut out[r * c..(r + 1) * c];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
        norms.push(n);
    }
    (Tensor::new(x.shape(), out).unwrap(), norms)
}

/// Backward of [`l2_normalize_rows`]: `(g − y⟨g, y⟩) / ‖x‖`, zero on zero rows.
pub fn l2_normalize_rows_backward(y: &Tensor, norms: &[f64], grad_out: &Tensor) -> Tensor {
    let c = y.last_dim();
    let mut dx = vec![0.0; y.len()];
    for (r, &n) in norms.iter().enumerate() {
        if n <= 0.0 {
            continue;
        }
        let yr = y.row(r);
        let gr = grad_out.row(r);
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..c {
            dx[r * c + j] = (gr[j] - yr[j] * dot) / n;
        }
    }
    Tensor::new(y.shape(), dx).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_rows_and_zero_rows() {
        let x = Tensor::new(&[2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let (y, norms) = l2_normalize_rows(&x);
        assert_eq!(y.data(), &[0.6, 0.8, 0.0, 0.0]);
        assert_eq!(norms, vec![5.0, 0.0]);
    }
}
