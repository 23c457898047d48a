//! Experiment configuration, read from TOML.
//!
//! Sections: `[data]`, `[teacher]`, `[student]`, `[kd]`, `[train]`, `[io]`.
//! Every key has a default, and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::BlobsConfig;
use crate::error::{Error, Result};
use crate::kd_layer::AssignMode;
use crate::model::ModelSpec;
use crate::penultimate::LabelSource;
use crate::train::{TrainPlan, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory; defaults to `<io.out>/data`.
    pub dir: Option<PathBuf>,
    pub num_classes: usize,
    pub image_size: usize,
    pub train: usize,
    pub test: usize,
    pub noise: f64,
    pub distractors: usize,
    pub distractor_contrast: f64,
    pub flip: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        let b = BlobsConfig::default();
        DataConfig {
            dir: None,
            num_classes: b.num_classes,
            image_size: b.size,
            train: b.train,
            test: b.test,
            noise: b.noise,
            distractors: b.distractors,
            distractor_contrast: b.distractor_contrast,
            flip: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Conv groups as `[width, stride]` pairs; the role's default when absent.
    pub groups: Option<Vec<[usize; 2]>>,
    /// Overrides `[train] lr` for this network.
    pub lr: Option<f64>,
    /// Overrides `[train] epochs` for this network.
    pub epochs: Option<usize>,
}

const TEACHER_GROUPS: [[usize; 2]; 8] = [
    [12, 2],
    [12, 1],
    [24, 2],
    [24, 1],
    [48, 2],
    [48, 1],
    [48, 1],
    [48, 1],
];
const STUDENT_GROUPS: [[usize; 2]; 4] = [[8, 2], [16, 2], [32, 2], [32, 1]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdConfig {
    /// `baseline`, `vanilla`, `quest`, `letkd1` or `letkd2`.
    pub variant: String,
    pub k_penult: usize,
    pub k_inter: usize,
    pub alpha_penult: f64,
    pub alpha_inter: f64,
    /// Temperature of the penultimate soft labels.
    pub label_temperature: f64,
    /// Optional temperature applied to the rows of `s_T`.
    pub inter_temperature: Option<f64>,
    pub pred_temperature: f64,
    /// `kmeans` or `teacher_3x3`.
    pub labeler_source: String,
    /// `bn_relu` or `explicit`.
    pub assign_mode: String,
    pub mu: f64,
    pub eps: f64,
    pub vanilla_temperature: f64,
    pub vanilla_weight: f64,
    pub lda_shrinkage: f64,
    pub kmeans_samples: usize,
    pub lda_samples: usize,
    pub label_cache: bool,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            variant: "letkd1".into(),
            k_penult: 64,
            k_inter: crate::subclass::DEFAULT_K_INTER,
            alpha_penult: 1.0,
            alpha_inter: 1.0,
            label_temperature: 1.0,
            inter_temperature: None,
            pred_temperature: 1.0,
            labeler_source: "kmeans".into(),
            assign_mode: "bn_relu".into(),
            mu: AssignMode::DEFAULT_MU,
            eps: AssignMode::DEFAULT_EPS,
            vanilla_temperature: 4.0,
            vanilla_weight: 0.9,
            lda_shrinkage: crate::lda::DEFAULT_SHRINKAGE,
            kmeans_samples: 2_000_000,
            lda_samples: 500_000,
            label_cache: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub lr_factor: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Evaluate on the test split every this many epochs (and after the last).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            lr: 0.05,
            milestones: vec![35, 45, 55],
            lr_factor: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            batch_size: 64,
            eval_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub out: PathBuf,
    pub seed: u64,
    /// Seed of the synthetic dataset, shared by all runs.
    pub data_seed: u64,
    /// Write measured epoch times into the metrics; zero otherwise, which
    /// keeps metrics files byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            out: PathBuf::from("runs"),
            seed: 0,
            data_seed: 0,
            record_wall_time: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub teacher: NetConfig,
    #[serde(default)]
    pub student: NetConfig,
    #[serde(default)]
    pub kd: KdConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub io: IoConfig,
}

fn groups(g: &Option<Vec<[usize; 2]>>, default: &[[usize; 2]]) -> Vec<(usize, usize)> {
    g.as_deref()
        .unwrap_or(default)
        .iter()
        .map(|&[w, s]| (w, s))
        .collect()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.blobs()?;
        self.teacher_spec()?;
        self.student_spec()?;
        self.plan()?;
        self.teacher_plan()?;
        if self.train.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be at least 2 for batch norm".into(),
            ));
        }
        if self.train.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        Ok(())
    }

    pub fn blobs(&self) -> Result<BlobsConfig> {
        let d = &self.data;
        if d.train == 0 || d.test == 0 {
            return Err(Error::Config("both splits need at least one image".into()));
        }
        if !(d.noise >= 0.0 && d.noise.is_finite() && d.distractor_contrast >= 0.0) {
            return Err(Error::Config(
                "noise and distractor_contrast must be nonnegative".into(),
            ));
        }
        Ok(BlobsConfig {
            num_classes: d.num_classes,
            size: d.image_size,
            train: d.train,
            test: d.test,
            noise: d.noise,
            distractors: d.distractors,
            distractor_contrast: d.distractor_contrast,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.data.image_size, self.data.image_size, 3]
    }

    pub fn teacher_spec(&self) -> Result<ModelSpec> {
        ModelSpec::plain_cnn(
            self.input_shape(),
            &groups(&self.teacher.groups, &TEACHER_GROUPS),
            self.data.num_classes,
        )
        .map_err(|e| Error::Config(format!("[teacher] {e}")))
    }

    pub fn student_spec(&self) -> Result<ModelSpec> {
        ModelSpec::plain_cnn(
            self.input_shape(),
            &groups(&self.student.groups, &STUDENT_GROUPS),
            self.data.num_classes,
        )
        .map_err(|e| Error::Config(format!("[student] {e}")))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data
            .dir
            .clone()
            .unwrap_or_else(|| self.io.out.join("data"))
    }

    pub fn teacher_dir(&self) -> PathBuf {
        self.io.out.join("teacher")
    }

    pub fn labeler_dir(&self) -> PathBuf {
        let src = if self.kd.labeler_source == "teacher_3x3" {
            "3x3"
        } else {
            "kmeans"
        };
        self.io.out.join(format!("labels-{src}"))
    }

    pub fn student_dir(&self) -> PathBuf {
        self.io
            .out
            .join(format!("student-{}-seed{}", self.kd.variant, self.io.seed))
    }

    pub fn assign_mode(&self) -> Result<AssignMode> {
        match self.kd.assign_mode.as_str() {
            "bn_relu" => Ok(AssignMode::BnRelu),
            "explicit" => Ok(AssignMode::ExplicitSoftmax {
                mu: self.kd.mu,
                eps: self.kd.eps,
            }),
            other => Err(Error::Config(format!("unknown assign_mode {other:?}"))),
        }
    }

    pub fn label_source(&self) -> Result<LabelSource> {
        match self.kd.labeler_source.as_str() {
            "kmeans" => Ok(LabelSource::KMeans),
            "teacher_3x3" => Ok(LabelSource::Teacher3x3),
            other => Err(Error::Config(format!("unknown labeler_source {other:?}"))),
        }
    }

    /// The student training plan.
    pub fn plan(&self) -> Result<TrainPlan> {
        let t = &self.train;
        let k = &self.kd;
        let plan = TrainPlan {
            epochs: self.student.epochs.unwrap_or(t.epochs),
            lr: self.student.lr.unwrap_or(t.lr),
            milestones: t.milestones.clone(),
            lr_factor: t.lr_factor,
            momentum: t.momentum,
            nesterov: t.nesterov,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            seed: self.io.seed,
            variant: Variant::parse(&k.variant)?,
            lambda: 1.0,
            alpha_penult: k.alpha_penult,
            alpha_inter: k.alpha_inter,
            k_penult: k.k_penult,
            k_inter: k.k_inter,
            label_temperature: k.label_temperature,
            inter_temperature: k.inter_temperature,
            pred_temperature: k.pred_temperature,
            label_source: self.label_source()?,
            assign_mode: self.assign_mode()?,
            vanilla_temperature: k.vanilla_temperature,
            vanilla_weight: k.vanilla_weight,
            lda_shrinkage: k.lda_shrinkage,
            kmeans_samples: k.kmeans_samples,
            lda_samples: k.lda_samples,
            label_cache: k.label_cache,
            flip: self.data.flip,
            eval_every: t.eval_every,
            record_wall_time: self.io.record_wall_time,
        };
        plan.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(plan)
    }

    /// The teacher plan: cross-entropy only, teacher overrides applied.
    pub fn teacher_plan(&self) -> Result<TrainPlan> {
        let mut plan = self.plan()?;
        plan.variant = Variant::Baseline;
        plan.epochs = self.teacher.epochs.unwrap_or(self.train.epochs);
        plan.lr = self.teacher.lr.unwrap_or(self.train.lr);
        Ok(plan)
    }
}
