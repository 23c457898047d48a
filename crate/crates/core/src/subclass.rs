//! Sub-class decision tables for the intermediate layer.
//!
//! LDA-projected teacher pixels of each class are split into `K` sub-classes
//! by K-means. Two nearest-prototype classifiers then label a pixel `z` of
//! class `c`:
//!
//! * `h₁(z; c)`: nearest prototype among the sub-classes of `c`;
//! * `h₂(z)`: nearest prototype among all `C·K` sub-classes.
//!
//! Row `(c, k)` of the table `s_T` is the empirical distribution of `h₂` over
//! the pixels with `h₁ = (c, k)`. It measures how often pixels of that
//! sub-class are mistaken for other sub-classes, and is used verbatim as the
//! soft label of every pixel that `h₁` sends to `(c, k)`.
//!
//! Sub-class `(c, k)` has linear index `c·K + k`; nearest-prototype ties go to
//! the lowest linear index.

use crate::error::{Error, Result};
use crate::kmeans::{kmeans, sq_dist};
use crate::lda::LdaModel;
use crate::seed::sub_seed;
use crate::tensor::Tensor;

pub const DEFAULT_K_INTER: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct SubclassModel {
    /// `C × K × d_LDA`.
    pub prototypes: Tensor,
    /// `(C·K) × (C·K)`, row-stochastic.
    pub s_t: Tensor,
    pub num_classes: usize,
    pub k_inter: usize,
    pub report: FitReport,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitReport {
    /// Sub-classes that received no pixels; their rows are one-hot on themselves.
    pub empty_rows: Vec<usize>,
    /// Pixels counted per sub-class.
    pub row_counts: Vec<usize>,
}

impl SubclassModel {
    pub fn entities(&self) -> usize {
        self.num_classes * self.k_inter
    }

    /// `h₁`: linear index of the nearest prototype of class `c`.
    pub fn h1(&self, z: &[f64], c: usize) -> usize {
        nearest_in(
            z,
            &self.prototypes,
            c * self.k_inter..(c + 1) * self.k_inter,
        )
    }

    /// `h₂`: linear index of the nearest prototype overall.
    pub fn h2(&self, z: &[f64]) -> usize {
        nearest_in(z, &self.prototypes, 0..self.entities())
    }

    /// Replaces each row by `softmax(log row / τ)`; zero entries stay zero.
    pub fn smooth_rows(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid(format!(
                "table temperature must be positive, got {tau}"
            )));
        }
        let m = self.entities();
        let data = self.s_t.data_mut();
        for r in 0..m {
            let row = &mut data[r * m..(r + 1) * m];
            let scaled: Vec<f64> = row
                .iter()
                .map(|&v| {
                    if v > 0.0 {
                        v.ln() / tau
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scaled.iter().map(|s| (s - max).exp()).sum();
            for (o, s) in row.iter_mut().zip(&scaled) {
                *o = (s - max).exp() / z;
            }
        }
        Ok(())
    }
}

/// Nearest row of `prototypes` (viewed as `rows × d`) within `range`.
fn nearest_in(z: &[f64], prototypes: &Tensor, range: std::ops::Range<usize>) -> usize {
    let d = prototypes.last_dim();
    let data = prototypes.data();
    let mut best = (range.start, f64::INFINITY);
    for idx in range {
        let dist = sq_dist(z, &data[idx * d..(idx + 1) * d]);
        if dist < best.1 {
            best = (idx, dist);
        }
    }
    best.0
}

fn check_inputs(z: &Tensor, labels: &[usize], num_classes: usize) -> Result<()> {
    z.expect_rank(2, "LDA features")?;
    if labels.len() != z.rows() {
        return Err(Error::shape(format!(
            "{} labels for {} pixels",
            labels.len(),
            z.rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    Ok(())
}

/// Per-class K-means, prototypes, and the table `s_T`.
pub fn fit_subclass_model(
    z: &Tensor,
    labels: &[usize],
    num_classes: usize,
    k_inter: usize,
    seed: u64,
) -> Result<SubclassModel> {
    check_inputs(z, labels, num_classes)?;
    if k_inter == 0 {
        return Err(Error::invalid("K_inter must be at least 1"));
    }
    let d = z.last_dim();
    let mut prototypes = vec![0.0; num_classes * k_inter * d];
    for c in 0..num_classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.len() < k_inter {
            return Err(Error::invalid(format!(
                "class {c} has {} pixels, fewer than K_inter={k_inter}",
                members.len()
            )));
        }
        let pts = z.select_outer(&members);
        let fit = kmeans(&pts, k_inter, sub_seed(seed, &format!("subclass.{c}")))?;
        let mut sums = vec![0.0; k_inter * d];
        let mut counts = vec![0usize; k_inter];
        for (i, &a) in fit.assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * d..(a + 1) * d].iter_mut().zip(pts.row(i)) {
                *s += v;
            }
        }
        for k in 0..k_inter {
            let dst = &mut prototypes[(c * k_inter + k) * d..(c * k_inter + k + 1) * d];
            if counts[k] == 0 {
                dst.copy_from_slice(fit.centers.row(k));
            } else {
                for (o, s) in dst.iter_mut().zip(&sums[k * d..(k + 1) * d]) {
                    *o = s / counts[k] as f64;
                }
            }
        }
    }
    let prototypes = Tensor::new(&[num_classes, k_inter, d], prototypes)?;
    let mut model = SubclassModel {
        prototypes,
        s_t: Tensor::zeros(&[0, 0]),
        num_classes,
        k_inter,
        report: FitReport::default(),
    };
    let m = model.entities();
    let mut counts = vec![0usize; m * m];
    for (i, &y) in labels.iter().enumerate() {
        let zi = z.row(i);
        counts[model.h1(zi, y) * m + model.h2(zi)] += 1;
    }
    let (s_t, report) = normalize_counts(&counts, m);
    model.s_t = s_t;
    model.report = report;
    Ok(model)
}

fn normalize_counts(counts: &[usize], m: usize) -> (Tensor, FitReport) {
    let mut table = vec![0.0; m * m];
    let mut report = FitReport::default();
    for r in 0..m {
        let row = &counts[r * m..(r + 1) * m];
        let total: usize = row.iter().sum();
        report.row_counts.push(total);
        if total == 0 {
            table[r * m + r] = 1.0;
            report.empty_rows.push(r);
        } else {
            for (o, &c) in table[r * m..(r + 1) * m].iter_mut().zip(row) {
                *o = c as f64 / total as f64;
            }
        }
    }
    (Tensor::new(&[m, m], table).expect("square table"), report)
}

/// Recomputes `s_T` from scratch with an explicit loop over pixels and
/// prototypes. `prototypes` is `C × K × d`.
pub fn counting_oracle_st(
    z: &Tensor,
    labels: &[usize],
    prototypes: &Tensor,
) -> Result<(Tensor, FitReport)> {
    prototypes.expect_rank(3, "prototypes")?;
    let (c_n, k_n, d) = (
        prototypes.shape()[0],
        prototypes.shape()[1],
        prototypes.shape()[2],
    );
    check_inputs(z, labels, c_n)?;
    if z.last_dim() != d {
        return Err(Error::shape("feature and prototype dimensions differ"));
    }
    let m = c_n * k_n;
    let mut counts = vec![0usize; m * m];
    for (i, &y) in labels.iter().enumerate() {
        let zi = z.row(i);
        let (mut best1, mut d1) = (0, f64::INFINITY);
        let (mut best2, mut d2) = (0, f64::INFINITY);
        for c in 0..c_n {
            for k in 0..k_n {
                let idx = c * k_n + k;
                let p = &prototypes.data()[idx * d..(idx + 1) * d];
                let mut dist = 0.0;
                for j in 0..d {
                    dist += (zi[j] - p[j]) * (zi[j] - p[j]);
                }
                if c == y && dist < d1 {
                    best1 = idx;
                    d1 = dist;
                }
                if dist < d2 {
                    best2 = idx;
                    d2 = dist;
                }
            }
        }
        counts[best1 * m + best2] += 1;
    }
    Ok(normalize_counts(&counts, m))
}

/// Intermediate soft labels for a `B × h × w × d` teacher map and image labels `y`.
pub fn intermediate_soft_labels(
    teacher_map: &Tensor,
    y: &[usize],
    lda: &LdaModel,
    model: &SubclassModel,
) -> Result<Tensor> {
    teacher_map.expect_rank(4, "teacher map")?;
    let s = teacher_map.shape();
    if y.len() != s[0] {
        return Err(Error::shape(format!(
            "{} labels for a batch of {}",
            y.len(),
            s[0]
        )));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= model.num_classes) {
        return Err(Error::invalid(format!("label {bad} out of range")));
    }
    if lda.output_dim() != model.prototypes.last_dim() {
        return Err(Error::shape("LDA output and prototype dimensions differ"));
    }
    let z = lda.apply_map(teacher_map)?;
    let hw = s[1] * s[2];
    let m = model.entities();
    let mut out = Vec::with_capacity(z.rows() * m);
    for (b, &c) in y.iter().enumerate() {
        for p in 0..hw {
            let row = model.h1(z.row(b * hw + p), c);
            out.extend_from_slice(model.s_t.row(row));
        }
    }
    Tensor::new(&[s[0], s[1], s[2], m], out)
}
