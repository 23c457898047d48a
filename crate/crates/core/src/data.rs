//! Datasets: the `pattern-blobs` generator, container-backed loading,
//! train-split normalization and seeded horizontal flips.
//!
//! Each pattern-blobs image shows one dominant shape motif whose type is the
//! class, drawn at a random position, scale and color over a noisy
//! background, plus fainter distractor motifs of other classes.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::container::{Payload, TensorContainer};
use crate::error::{Error, Result};
use crate::seed::{rng_for, sub_seed};
use crate::tensor::Tensor;

pub const NUM_MOTIFS: usize = 10;

pub const TRAIN_IMAGES: &str = "train_images.ltkd";
pub const TRAIN_LABELS: &str = "train_labels.ltkd";
pub const TEST_IMAGES: &str = "test_images.ltkd";
pub const TEST_LABELS: &str = "test_labels.ltkd";
pub const NORMALIZATION: &str = "normalization.ltkd";

#[derive(Debug, Clone, PartialEq)]
pub struct BlobsConfig {
    pub num_classes: usize,
    pub size: usize,
    pub train: usize,
    pub test: usize,
    /// Standard deviation of per-pixel noise, in [0, 1] intensity units.
    pub noise: f64,
    /// Number of distractor motifs per image.
    pub distractors: usize,
    /// Distractor intensity relative to the class motif.
    pub distractor_contrast: f64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        BlobsConfig {
            num_classes: 10,
            size: 32,
            train: 5000,
            test: 1000,
            noise: 0.2,
            distractors: 2,
            distractor_contrast: 0.6,
        }
    }
}

/// Coverage in `[0, 1]` of motif `kind` at offset `(dy, dx)` from its center,
/// for a motif of radius `r` and stroke half-width `t`.
fn motif_coverage(kind: usize, dy: f64, dx: f64, r: f64, t: f64) -> f64 {
    let soft = |dist: f64| (1.0 - (dist - t).max(0.0)).clamp(0.0, 1.0);
    let inside = dy.abs() <= r + t && dx.abs() <= r + t;
    if !inside {
        return 0.0;
    }
    let rad = (dy * dy + dx * dx).sqrt();
    match kind {
        0 => soft(dy.abs()),                                           // horizontal bar
        1 => soft(dx.abs()),                                           // vertical bar
        2 => soft((dy - dx).abs() / 2f64.sqrt()),                      // main diagonal
        3 => soft((dy + dx).abs() / 2f64.sqrt()),                      // anti-diagonal
        4 => soft(dy.abs().min(dx.abs())),                             // plus
        5 => soft((dy - dx).abs().min((dy + dx).abs()) / 2f64.sqrt()), // saltire
        6 => soft((rad - r * 0.8).abs()),                              // ring
        7 => soft((rad - r * 0.55).max(0.0)),                          // disk
        8 => soft((dy.abs().max(dx.abs()) - r * 0.8).abs()),           // square outline
        _ => {
            // two dots on a horizontal line
            let a = ((dx - r * 0.6).powi(2) + dy * dy).sqrt();
            let b = ((dx + r * 0.6).powi(2) + dy * dy).sqrt();
            soft((a.min(b) - r * 0.25).max(0.0))
        }
    }
}

fn draw_motif(canvas: &mut [f64], size: usize, kind: usize, intensity: f64, rng: &mut impl Rng) {
    // radii are set for 32-pixel images and scale with the canvas
    let scale = size as f64 / 32.0;
    let r = rng.random_range(3.5..6.5) * scale;
    let t = rng.random_range(0.6..1.2) * scale.max(0.75);
    let margin = r + t + 1.0;
    let cy = rng.random_range(margin..size as f64 - margin);
    let cx = rng.random_range(margin..size as f64 - margin);
    let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.35..1.0));
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    for y in 0..size {
        for x in 0..size {
            let cov = motif_coverage(kind % NUM_MOTIFS, y as f64 - cy, x as f64 - cx, r, t);
            if cov > 0.0 {
                for (c, col) in color.iter().enumerate() {
                    canvas[(y * size + x) * 3 + c] += sign * intensity * cov * col;
                }
            }
        }
    }
}

/// Renders image `index` of a split; every image draws from its own stream.
pub fn render_blob(cfg: &BlobsConfig, seed: u64, split: &str, index: usize) -> (Vec<u8>, usize) {
    let mut rng = rng_for(sub_seed(seed, split), &format!("img{index}"));
    let size = cfg.size;
    let label = rng.random_range(0..cfg.num_classes);
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
    let mut canvas: Vec<f64> = (0..size * size * 3).map(|i| bg[i % 3]).collect();
    for _ in 0..cfg.distractors {
        let mut other = rng.random_range(0..cfg.num_classes - 1);
        if other >= label {
            other += 1;
        }
        draw_motif(
            &mut canvas,
            size,
            other,
            0.5 * cfg.distractor_contrast,
            &mut rng,
        );
    }
    draw_motif(&mut canvas, size, label, 0.5, &mut rng);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite noise level");
    let pixels = canvas
        .into_iter()
        .map(|v| ((v + noise.sample(&mut rng)).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    (pixels, label)
}

/// Images (`N × size × size × 3`, u8) and labels (`N`, i64) for one split.
pub fn generate_split(
    cfg: &BlobsConfig,
    seed: u64,
    split: &str,
    n: usize,
) -> Result<(TensorContainer, TensorContainer)> {
    if cfg.num_classes < 2 || cfg.num_classes > NUM_MOTIFS {
        return Err(Error::invalid(format!(
            "pattern-blobs supports 2..={NUM_MOTIFS} classes, got {}",
            cfg.num_classes
        )));
    }
    if cfg.size < 16 {
        return Err(Error::invalid(
            "pattern-blobs images must be at least 16 pixels wide",
        ));
    }
    let mut pixels = Vec::with_capacity(n * cfg.size * cfg.size * 3);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (img, y) = render_blob(cfg, seed, split, i);
        pixels.extend(img);
        labels.push(y as i64);
    }
    Ok((
        TensorContainer::new(&[n, cfg.size, cfg.size, 3], Payload::U8(pixels))?,
        TensorContainer::new(&[n], Payload::I64(labels))?,
    ))
}

/// Writes both splits of a pattern-blobs dataset into `dir`.
pub fn write_pattern_blobs(cfg: &BlobsConfig, seed: u64, dir: &Path) -> Result<()> {
    for (split, n, img_name, lab_name) in [
        ("train", cfg.train, TRAIN_IMAGES, TRAIN_LABELS),
        ("test", cfg.test, TEST_IMAGES, TEST_LABELS),
    ] {
        let (images, labels) = generate_split(cfg, seed, split, n)?;
        images.write(&dir.join(img_name))?;
        labels.write(&dir.join(lab_name))?;
    }
    Ok(())
}

/// Per-channel affine normalization `(x/255 − mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn fit(images: &TensorContainer) -> Result<Self> {
        let Payload::U8(px) = &images.payload else {
            return Err(Error::Format("images must be u8".into()));
        };
        let c = *images
            .dims
            .last()
            .ok_or_else(|| Error::Format("images need a channel axis".into()))?;
        let count = (px.len() / c.max(1)) as f64;
        if count == 0.0 {
            return Err(Error::invalid("cannot normalize an empty split"));
        }
        let mut mean = vec![0.0; c];
        for (i, &v) in px.iter().enumerate() {
            mean[i % c] += v as f64 / 255.0;
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for (i, &v) in px.iter().enumerate() {
            let d = v as f64 / 255.0 - mean[i % c];
            var[i % c] += d * d;
        }
        let std = var.iter().map(|v| (v / count).sqrt().max(1e-8)).collect();
        Ok(Normalization { mean, std })
    }

    pub fn apply(&self, images: &TensorContainer) -> Result<Tensor> {
        let Payload::U8(px) = &images.payload else {
            return Err(Error::Format("images must be u8".into()));
        };
        let c = self.mean.len();
        if images.dims.last() != Some(&c) {
            return Err(Error::shape(format!(
                "images {:?} vs {c} normalization channels",
                images.dims
            )));
        }
        let data = px
            .iter()
            .enumerate()
            .map(|(i, &v)| (v as f64 / 255.0 - self.mean[i % c]) / self.std[i % c])
            .collect();
        Tensor::new(&images.dims, data)
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut v = self.mean.clone();
        v.extend(&self.std);
        TensorContainer::new(&[2, self.mean.len()], Payload::F64(v)).expect("2 × C values")
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let t = c.to_tensor()?;
        if t.rank() != 2 || t.shape()[0] != 2 {
            return Err(Error::Format(format!(
                "normalization must be 2 × C, got {:?}",
                t.shape()
            )));
        }
        Ok(Normalization {
            mean: t.row(0).to_vec(),
            std: t.row(1).to_vec(),
        })
    }
}

/// A normalized split held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// `N × h × w × c`.
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Gathers a batch, flipping image `i` horizontally when `flips[i]`.
    pub fn batch(&self, indices: &[usize], flips: Option<&[bool]>) -> (Tensor, Vec<usize>) {
        let mut images = self.images.select_outer(indices);
        if let Some(flips) = flips {
            let [h, w, c] = self.image_shape();
            let per = h * w * c;
            for (b, _) in flips.iter().enumerate().filter(|(_, &f)| f) {
                flip_in_place(&mut images.data_mut()[b * per..(b + 1) * per], h, w, c);
            }
        }
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    /// Doubles as the validation split.
    pub test: Split,
    pub normalization: Normalization,
    pub num_classes: usize,
}

fn flip_in_place(img: &mut [f64], h: usize, w: usize, c: usize) {
    for y in 0..h {
        for x in 0..w / 2 {
            for ch in 0..c {
                img.swap((y * w + x) * c + ch, (y * w + (w - 1 - x)) * c + ch);
            }
        }
    }
}

/// Whether sample `index` is flipped in `epoch`; a pure function of its inputs.
pub fn flip_decision(seed: u64, epoch: usize, index: usize) -> bool {
    sub_seed(sub_seed(seed, "flip"), &format!("{epoch}/{index}")) & 1 == 1
}

fn read_labels(c: &TensorContainer, num_classes: usize, what: &str) -> Result<Vec<usize>> {
    let Payload::I64(v) = &c.payload else {
        return Err(Error::Format(format!("{what} must be i64")));
    };
    v.iter()
        .map(|&y| {
            if y < 0 || y as usize >= num_classes {
                Err(Error::invalid(format!(
                    "{what}: label {y} outside [0, {num_classes})"
                )))
            } else {
                Ok(y as usize)
            }
        })
        .collect()
}

fn load_split(
    dir: &Path,
    images: &str,
    labels: &str,
    num_classes: usize,
    input: [usize; 3],
) -> Result<(TensorContainer, Vec<usize>)> {
    let img = TensorContainer::read(&dir.join(images))?;
    let lab = TensorContainer::read(&dir.join(labels))?;
    if img.dims.len() != 4 || img.dims[1..] != input {
        return Err(Error::shape(format!(
            "{images}: dims {:?} do not match input {input:?}",
            img.dims
        )));
    }
    let y = read_labels(&lab, num_classes, labels)?;
    if y.len() != img.dims[0] {
        return Err(Error::invalid(format!(
            "{} images but {} labels",
            img.dims[0],
            y.len()
        )));
    }
    Ok((img, y))
}

/// Loads both splits from `dir`. Normalization statistics come from the
/// train split; they are written to `dir` on first load and reused after.
pub fn load_dataset(dir: &Path, num_classes: usize, input: [usize; 3]) -> Result<Dataset> {
    let (train_img, train_y) = load_split(dir, TRAIN_IMAGES, TRAIN_LABELS, num_classes, input)?;
    let (test_img, test_y) = load_split(dir, TEST_IMAGES, TEST_LABELS, num_classes, input)?;
    let norm_path = dir.join(NORMALIZATION);
    let normalization = if norm_path.exists() {
        Normalization::from_container(&TensorContainer::read(&norm_path)?)?
    } else {
        let n = Normalization::fit(&train_img)?;
        n.to_container().write(&norm_path)?;
        n
    };
    Ok(Dataset {
        train: Split {
            images: normalization.apply(&train_img)?,
            labels: train_y,
        },
        test: Split {
            images: normalization.apply(&test_img)?,
            labels: test_y,
        },
        normalization,
        num_classes,
    })
}
