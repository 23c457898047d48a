//! Soft labels for the penultimate layer.
//!
//! Teacher pixels are described by their squared distances to `K` cluster
//! centers; the soft label puts the most mass on the nearest center,
//! `p_T = softmax(−d/τ)`. The clustering-free variant instead uses the
//! activations of the teacher's last 3×3 convolution directly,
//! `p_T = softmax(act/τ)`.

use crate::error::{Error, Result};
use crate::kmeans::{check_distinct, kmeans, sq_dist};
use crate::ops::{align_pool, channel_softmax};
use crate::tensor::Tensor;

/// Centers closer than this are treated as duplicates.
pub const DEDUP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    KMeans,
    /// Pre-BN activations of the teacher's final 3×3 convolution.
    Teacher3x3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenultimateLabeler {
    /// `K × d`; empty (`0 × 0`) for the 3×3 source.
    pub centers: Tensor,
    pub tau: f64,
    pub source: LabelSource,
}

impl PenultimateLabeler {
    pub fn from_centers(centers: Tensor, tau: f64) -> Result<Self> {
        centers.expect_rank(2, "centers")?;
        if centers.shape()[0] < 2 {
            return Err(Error::invalid(
                "a penultimate labeler needs at least 2 centers",
            ));
        }
        check_tau(tau)?;
        if !centers.is_finite() {
            return Err(Error::NonFinite("penultimate centers"));
        }
        check_distinct(&centers, DEDUP_TOL)?;
        Ok(PenultimateLabeler {
            centers,
            tau,
            source: LabelSource::KMeans,
        })
    }

    pub fn teacher_3x3(tau: f64) -> Result<Self> {
        check_tau(tau)?;
        Ok(PenultimateLabeler {
            centers: Tensor::zeros(&[0, 0]),
            tau,
            source: LabelSource::Teacher3x3,
        })
    }

    /// Applies the labeler to the matching teacher map (penultimate features
    /// for K-means, final 3×3 pre-activations otherwise).
    pub fn label(&self, teacher_map: &Tensor) -> Result<Tensor> {
        match self.source {
            LabelSource::KMeans => penultimate_soft_labels(teacher_map, self),
            LabelSource::Teacher3x3 => labels_from_3x3_kernels(teacher_map, self.tau),
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!(
            "label temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

/// K-means centers of teacher pixel features (`N × d`).
pub fn fit_penultimate_centers(features: &Tensor, k: usize, seed: u64) -> Result<Tensor> {
    Ok(kmeans(features, k, seed)?.centers)
}

/// `softmax(−‖f − ρ_k‖² / τ)` over the centers for every pixel.
pub fn penultimate_soft_labels(
    teacher_map: &Tensor,
    labeler: &PenultimateLabeler,
) -> Result<Tensor> {
    let centers = &labeler.centers;
    let d = centers.last_dim();
    if teacher_map.last_dim() != d || centers.rank() != 2 || centers.shape()[0] == 0 {
        return Err(Error::shape(format!(
            "teacher map {:?} does not match centers {:?}",
            teacher_map.shape(),
            centers.shape()
        )));
    }
    let k = centers.rows();
    let mut neg = Vec::with_capacity(teacher_map.rows() * k);
    for r in 0..teacher_map.rows() {
        let f = teacher_map.row(r);
        neg.extend((0..k).map(|c| -sq_dist(f, centers.row(c))));
    }
    let mut shape = teacher_map.shape().to_vec();
    *shape.last_mut().unwrap() = k;
    channel_softmax(&Tensor::new(&shape, neg)?, 1.0 / labeler.tau)
}

/// `softmax(act / τ)` per pixel.
pub fn labels_from_3x3_kernels(activations: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    channel_softmax(activations, 1.0 / tau)
}

/// Average-pools a `… × H × W × d` map down to `target_h × target_w`.
pub fn align_spatial(teacher_map: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    if teacher_map.rank() == 3 {
        let s = teacher_map.shape();
        let batched = teacher_map.clone().reshape(&[1, s[0], s[1], s[2]])?;
        let out = align_pool(&batched, target_h, target_w)?;
        let o = out.shape().to_vec();
        return out.reshape(&o[1..]);
    }
    align_pool(teacher_map, target_h, target_w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_at_a_center_is_nearly_one_hot() {
        let centers = Tensor::new(&[3, 2], vec![0., 0., 10., 0., 0., 10.]).unwrap();
        let lab = PenultimateLabeler::from_centers(centers, 0.1).unwrap();
        let map = Tensor::new(&[1, 1, 1, 2], vec![0., 0.]).unwrap();
        let p = lab.label(&map).unwrap();
        assert!(p.data()[0] > 0.999);
    }

    #[test]
    fn huge_temperature_is_uniform() {
        let centers = Tensor::new(&[3, 2], vec![0., 0., 1., 0., 0., 1.]).unwrap();
        let lab = PenultimateLabeler::from_centers(centers, 1e6).unwrap();
        let map = Tensor::new(&[1, 1, 1, 2], vec![0.3, 0.2]).unwrap();
        let p = lab.label(&map).unwrap();
        assert!(p.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-6));
    }

    #[test]
    fn equidistant_centers_share_mass() {
        let centers = Tensor::new(&[2, 1], vec![-1.0, 1.0]).unwrap();
        let lab = PenultimateLabeler::from_centers(centers, 1.0).unwrap();
        let p = lab
            .label(&Tensor::new(&[1, 1], vec![0.0]).unwrap())
            .unwrap();
        assert_eq!(p.data()[0], p.data()[1]);
    }

    #[test]
    fn dimension_mismatch() {
        let centers = Tensor::new(&[2, 1], vec![-1.0, 1.0]).unwrap();
        let lab = PenultimateLabeler::from_centers(centers, 1.0).unwrap();
        assert!(lab.label(&Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn labeler_rejects_duplicates_and_single_center() {
        assert!(PenultimateLabeler::from_centers(Tensor::zeros(&[2, 3]), 1.0).is_err());
        assert!(PenultimateLabeler::from_centers(Tensor::zeros(&[1, 3]), 1.0).is_err());
    }

    #[test]
    fn kernel_labels() {
        let p = labels_from_3x3_kernels(&Tensor::full(&[2, 4], 0.7), 1.0).unwrap();
        assert!(p.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
        let p = labels_from_3x3_kernels(&Tensor::from_vec(vec![10.0, 0.0, 0.0]), 1.0).unwrap();
        assert!(p.data()[0] > 0.9999);
    }

    #[test]
    fn alignment_examples() {
        let c = Tensor::full(&[8, 8, 2], 1.5);
        let out = align_spatial(&c, 4, 4).unwrap();
        assert_eq!(out.shape(), &[4, 4, 2]);
        assert!(out.data().iter().all(|&v| v == 1.5));

        let checker: Vec<f64> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect();
        let out = align_spatial(&Tensor::new(&[4, 4, 1], checker).unwrap(), 2, 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
        assert!(align_spatial(&Tensor::zeros(&[6, 6, 1]), 4, 4).is_err());
    }
}
