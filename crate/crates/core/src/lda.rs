//! Linear discriminant analysis with scatter shrinkage.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::ops::linear_map_1x1;
use crate::tensor::Tensor;

pub const DEFAULT_SHRINKAGE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct LdaModel {
    /// `d_LDA × d` projection.
    pub w: Tensor,
    /// Offset placing the projected global mean at the origin.
    pub b: Tensor,
    pub shrinkage: f64,
}

impl LdaModel {
    pub fn output_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape()[1]
    }

    /// Projects every pixel of a `… × d` map, as a 1×1 convolution.
    pub fn apply_map(&self, map: &Tensor) -> Result<Tensor> {
        linear_map_1x1(map, &self.w, Some(&self.b))
    }

    /// Projects one feature vector.
    pub fn apply_row(&self, x: &[f64]) -> Vec<f64> {
        (0..self.output_dim())
            .map(|k| {
                self.w.row(k).iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b.data()[k]
            })
            .collect()
    }
}

/// Fits LDA on the rows of `features` (`N × d`).
///
/// Solves `S_b v = λ (S_w + λ_s·tr(S_w)/d·I) v` and keeps the eigenvectors of
/// the `C − 1` largest eigenvalues (fewer if `d < C − 1`), where `C` is the
/// number of classes present. Each direction is scaled to unit within-class
/// variance and signed so that its largest-magnitude entry is positive.
pub fn fit_lda(features: &Tensor, labels: &[usize], shrinkage: f64) -> Result<LdaModel> {
    features.expect_rank(2, "LDA features")?;
    let (n, d) = (features.rows(), features.last_dim());
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {n} samples",
            labels.len()
        )));
    }
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(Error::invalid(format!(
            "shrinkage must lie in [0, 1], got {shrinkage}"
        )));
    }
    let num_labels = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; num_labels];
    for &y in labels {
        counts[y] += 1;
    }
    let present: Vec<usize> = (0..num_labels).filter(|&c| counts[c] > 0).collect();
    if present.len() < 2 {
        return Err(Error::invalid("LDA needs at least two classes"));
    }
    if let Some(&c) = present.iter().find(|&&c| counts[c] < 2) {
        return Err(Error::invalid(format!(
            "class {c} has fewer than 2 samples"
        )));
    }

    let mut means = vec![0.0; num_labels * d];
    let mut global = vec![0.0; d];
    for (i, &y) in labels.iter().enumerate() {
        for (j, v) in features.row(i).iter().enumerate() {
            means[y * d + j] += v;
            global[j] += v;
        }
    }
    for &c in &present {
        means[c * d..(c + 1) * d]
            .iter_mut()
            .for_each(|m| *m /= counts[c] as f64);
    }
    global.iter_mut().for_each(|m| *m /= n as f64);

    let centered = DMatrix::from_fn(n, d, |i, j| features.row(i)[j] - means[labels[i] * d + j]);
    let mut sw = centered.transpose() * &centered;
    let mut sb = DMatrix::<f64>::zeros(d, d);
    for &c in &present {
        let diff = nalgebra::DVector::from_fn(d, |j, _| means[c * d + j] - global[j]);
        sb += (counts[c] as f64) * &diff * diff.transpose();
    }
    sw /= n as f64;
    sb /= n as f64;
    let ridge = shrinkage * sw.trace() / d as f64;
    for j in 0..d {
        sw[(j, j)] += ridge;
    }

    let chol = sw.clone().cholesky().ok_or_else(|| {
        Error::Singular(
            "within-class scatter is not positive definite; set a positive shrinkage".into(),
        )
    })?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("within-class scatter factor is singular".into()))?;
    let m = &l_inv * &sb * l_inv.transpose();
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let out_dim = (present.len() - 1).min(d);
    let back = l_inv.transpose();
    let mut w = Vec::with_capacity(out_dim * d);
    for &idx in order.iter().take(out_dim) {
        let v = &back * eig.eigenvectors.column(idx);
        let pivot = (0..d).fold(
            0,
            |best, j| if v[j].abs() > v[best].abs() { j } else { best },
        );
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        w.extend(v.iter().map(|x| sign * x));
    }
    let w = Tensor::new(&[out_dim, d], w)?.check_finite("LDA projection")?;
    let b: Vec<f64> = (0..out_dim)
        .map(|k| {
            -w.row(k)
                .iter()
                .zip(&global)
                .map(|(a, g)| a * g)
                .sum::<f64>()
        })
        .collect();
    Ok(LdaModel {
        w,
        b: Tensor::from_vec(b),
        shrinkage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_blobs(rng: &mut ChaCha8Rng, n: usize) -> (Tensor, Vec<usize>) {
        let noise = Tensor::randn(&[2 * n, 2], 1.0, rng);
        let mut data = noise.into_data();
        let mut labels = Vec::new();
        for i in 0..2 * n {
            let y = i % 2;
            data[i * 2] += if y == 0 { -1.0 } else { 1.0 };
            labels.push(y);
        }
        (Tensor::new(&[2 * n, 2], data).unwrap(), labels)
    }

    #[test]
    fn two_class_direction_is_mean_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, y) = two_blobs(&mut rng, 20_000);
        let lda = fit_lda(&x, &y, 0.0).unwrap();
        let w = lda.w.row(0);
        let cos = w[0].abs() / (w[0] * w[0] + w[1] * w[1]).sqrt();
        assert!(cos > 0.999, "direction {w:?}");
    }

    #[test]
    fn projected_global_mean_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[90, 4], 1.0, &mut rng);
        let y: Vec<usize> = (0..90).map(|i| i % 3).collect();
        let lda = fit_lda(&x, &y, 0.1).unwrap();
        assert_eq!(lda.output_dim(), 2);
        let mut mean = [0.0; 2];
        for i in 0..90 {
            for (m, v) in mean.iter_mut().zip(lda.apply_row(x.row(i))) {
                *m += v / 90.0;
            }
        }
        assert!(mean.iter().all(|m| m.abs() < 1e-12));
    }

    #[test]
    fn singular_scatter_without_shrinkage() {
        // the second coordinate is constant, so S_w is singular
        let x = Tensor::new(&[4, 2], vec![0., 1., 1., 1., 5., 1., 6., 1.]).unwrap();
        let err = fit_lda(&x, &[0, 0, 1, 1], 0.0).unwrap_err();
        assert!(matches!(err, Error::Singular(_)));
        assert!(fit_lda(&x, &[0, 0, 1, 1], 0.1).is_ok());
    }

    #[test]
    fn validation() {
        let x = Tensor::zeros(&[3, 2]);
        assert!(fit_lda(&x, &[0, 0, 0], 0.1).is_err());
        assert!(fit_lda(&x, &[0, 0, 1], 0.1).is_err());
        assert!(fit_lda(&x, &[0, 1], 0.1).is_err());
    }
}
