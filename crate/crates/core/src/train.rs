//! Training loops for teachers and students, evaluation, linear probes and
//! the α ablation.
//!
//! Every student step minimizes
//!
//! ```text
//! L = L_CE + λ·Σ_sites KL(p_T ‖ p_S)
//! ```
//!
//! where each KD site contributes only when the variant places a KD layer
//! there. The vanilla-KD variant instead adds `w·T²·KL(softmax(t/T) ‖ softmax(s/T))`
//! on the logits `t` (teacher) and `s` (student).

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample;
use rand::seq::SliceRandom;

use crate::autograd::{Tape, Var};
use crate::checkpoint::{Checkpoint, IntermediateLabeler, TeacherLabelers};
use crate::data::{flip_decision, Dataset, Split};
use crate::error::{Error, Result};
use crate::kd_layer::{init_kd_layer, AssignMode};
use crate::lda::fit_lda;
use crate::metrics::{MetricsRecord, MetricsWriter};
use crate::model::{KdSite, ModelSpec, NetForward, Network};
use crate::ops::{channel_softmax, Mode};
use crate::optim::{sgd_update, step_schedule, OptimizerState};
use crate::penultimate::{align_spatial, fit_penultimate_centers, LabelSource, PenultimateLabeler};
use crate::seed::{rng_for, sub_seed};
use crate::subclass::{fit_subclass_model, intermediate_soft_labels};
use crate::tensor::Tensor;

/// Batch size for inference-only passes.
const INFER_CHUNK: usize = 250;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Cross-entropy only, no KD layers.
    Baseline,
    /// Logit matching against the teacher's tempered softmax.
    VanillaKd,
    /// Penultimate KD loss through a loss-only layer (no residual path).
    QuestStyle,
    /// Penultimate KD layer.
    LetKd1,
    /// Penultimate and intermediate KD layers.
    LetKd2,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::VanillaKd,
        Variant::QuestStyle,
        Variant::LetKd1,
        Variant::LetKd2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::VanillaKd => "vanilla",
            Variant::QuestStyle => "quest",
            Variant::LetKd1 => "letkd1",
            Variant::LetKd2 => "letkd2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected one of baseline, vanilla, quest, letkd1, letkd2")))
    }

    pub fn penultimate_kd(self) -> bool {
        matches!(
            self,
            Variant::QuestStyle | Variant::LetKd1 | Variant::LetKd2
        )
    }

    pub fn intermediate_kd(self) -> bool {
        self == Variant::LetKd2
    }

    pub fn needs_teacher(self) -> bool {
        self != Variant::Baseline
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub epochs: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub lr_factor: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Weight of each KD-layer loss.
    pub lambda: f64,
    pub alpha_penult: f64,
    pub alpha_inter: f64,
    pub k_penult: usize,
    pub k_inter: usize,
    pub label_temperature: f64,
    pub inter_temperature: Option<f64>,
    pub pred_temperature: f64,
    pub label_source: LabelSource,
    pub assign_mode: AssignMode,
    pub vanilla_temperature: f64,
    pub vanilla_weight: f64,
    pub lda_shrinkage: f64,
    pub kmeans_samples: usize,
    pub lda_samples: usize,
    pub label_cache: bool,
    pub flip: bool,
    pub eval_every: usize,
    pub record_wall_time: bool,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            epochs: 60,
            lr: 0.05,
            milestones: vec![35, 45, 55],
            lr_factor: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            batch_size: 64,
            seed: 0,
            variant: Variant::LetKd1,
            lambda: 1.0,
            alpha_penult: 1.0,
            alpha_inter: 1.0,
            k_penult: 64,
            k_inter: crate::subclass::DEFAULT_K_INTER,
            label_temperature: 1.0,
            inter_temperature: None,
            pred_temperature: 1.0,
            label_source: LabelSource::KMeans,
            assign_mode: AssignMode::BnRelu,
            vanilla_temperature: 4.0,
            vanilla_weight: 0.9,
            lda_shrinkage: crate::lda::DEFAULT_SHRINKAGE,
            kmeans_samples: 2_000_000,
            lda_samples: 500_000,
            label_cache: true,
            flip: false,
            eval_every: 10,
            record_wall_time: false,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lr", self.lr)?;
        positive("label_temperature", self.label_temperature)?;
        positive("pred_temperature", self.pred_temperature)?;
        positive("vanilla_temperature", self.vanilla_temperature)?;
        if let Some(t) = self.inter_temperature {
            positive("inter_temperature", t)?;
        }
        for (name, a) in [
            ("alpha_penult", self.alpha_penult),
            ("alpha_inter", self.alpha_inter),
        ] {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::invalid(format!("{name} must be ≥ 0, got {a}")));
            }
        }
        if self.variant.penultimate_kd() && self.lambda != 1.0 {
            return Err(Error::invalid("KD-layer variants use λ = 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::invalid(
                "momentum must lie in [0, 1) and weight decay be ≥ 0",
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2"));
        }
        if self.k_penult < 2 || self.k_inter == 0 {
            return Err(Error::invalid("need K_penult ≥ 2 and K_inter ≥ 1"));
        }
        if !(0.0..=1.0).contains(&self.lda_shrinkage) || self.eval_every == 0 {
            return Err(Error::invalid(
                "shrinkage must lie in [0, 1] and eval_every be positive",
            ));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> OptimizerState {
        OptimizerState::new(self.lr, self.momentum, self.nesterov, self.weight_decay)
    }
}

/// Per-split mean losses and accuracy.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossSummary {
    pub ce: f64,
    pub kd_penult: f64,
    pub kd_inter: f64,
    pub top1: f64,
}

/// Soft targets for one batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Targets {
    pub penult: Option<Tensor>,
    pub inter: Option<Tensor>,
    /// Tempered teacher class distribution (vanilla KD).
    pub logits: Option<Tensor>,
}

/// Loss terms recorded for one batch.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub total: Var,
    pub ce: Var,
    /// Weighted contributions to `total`.
    pub kd_penult: Option<(Var, f64)>,
    pub kd_inter: Option<(Var, f64)>,
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count()
}

/// Records the student forward and its loss terms on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn record_losses(
    tape: &mut Tape,
    net: &mut Network,
    x: Tensor,
    y: &[usize],
    targets: &Targets,
    plan: &TrainPlan,
    mode: Mode,
    trainable: bool,
) -> Result<(NetForward, StepVars)> {
    let xv = tape.constant(x);
    let out = net.forward(tape, xv, mode, trainable)?;
    let ce = tape.cross_entropy(out.logits, y)?;
    let mut terms = vec![(ce, 1.0)];
    let mut kd_penult = None;
    let mut kd_inter = None;
    if let (Some(kd), Some(t)) = (&out.kd_penult, &targets.penult) {
        let v = tape.kl_div(t, kd.p_s)?;
        kd_penult = Some((v, plan.lambda));
    }
    if let (Some(kd), Some(t)) = (&out.kd_inter, &targets.inter) {
        let v = tape.kl_div(t, kd.p_s)?;
        kd_inter = Some((v, plan.lambda));
    }
    if plan.variant == Variant::VanillaKd {
        let t = targets
            .logits
            .as_ref()
            .ok_or_else(|| Error::invalid("vanilla KD needs teacher logits"))?;
        let temp = plan.vanilla_temperature;
        let q = tape.channel_softmax(out.logits, 1.0 / temp)?;
        let v = tape.kl_div(t, q)?;
        kd_penult = Some((v, plan.vanilla_weight * temp * temp));
    }
    terms.extend(kd_penult);
    terms.extend(kd_inter);
    let total = tape.weighted_sum(&terms)?;
    Ok((
        out,
        StepVars {
            total,
            ce,
            kd_penult,
            kd_inter,
        },
    ))
}

fn weighted(tape: &Tape, term: Option<(Var, f64)>) -> f64 {
    term.map_or(0.0, |(v, w)| w * tape.value(v).item())
}

/// Where the soft targets of a student run come from.
#[derive(Debug, Clone)]
pub enum LabelProvider {
    /// No teacher supervision.
    None,
    /// Teacher forward per batch.
    Online(Box<OnlineLabels>),
    /// Targets precomputed for every sample of both splits.
    Cached(Box<CachedLabels>),
}

#[derive(Debug, Clone)]
pub struct OnlineLabels {
    pub teacher: Network,
    pub labelers: Option<TeacherLabelers>,
    pub student: ModelSpec,
    pub plan: TrainPlan,
}

#[derive(Debug, Clone)]
pub struct CachedLabels {
    /// `[train, test]`, each holding unflipped and (if enabled) flipped targets.
    splits: [[Targets; 2]; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitId {
    Train,
    Test,
}

fn gather(t: &Option<Tensor>, idx: &[usize]) -> Option<Tensor> {
    t.as_ref().map(|t| t.select_outer(idx))
}

impl OnlineLabels {
    /// Teacher targets for a batch of (possibly flipped) images.
    pub fn targets(&mut self, x: &Tensor, y: &[usize]) -> Result<Targets> {
        let v = self.plan.variant;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.teacher.forward(&mut tape, xv, Mode::Eval, false)?;
        let mut targets = Targets::default();
        if v == Variant::VanillaKd {
            targets.logits = Some(channel_softmax(
                tape.value(out.logits),
                1.0 / self.plan.vanilla_temperature,
            )?);
        }
        if v.penultimate_kd() {
            let labelers = self
                .labelers
                .as_ref()
                .ok_or_else(|| Error::invalid("KD variants need teacher labelers"))?;
            let [h, w, _] = site_shape(&self.student, KdSite::Penultimate)?;
            let map = match labelers.penultimate.source {
                LabelSource::KMeans => tape.value(out.penult_x),
                LabelSource::Teacher3x3 => tape.value(out.last_conv_pre_bn),
            };
            targets.penult = Some(labelers.penultimate.label(&align_spatial(map, h, w)?)?);
        }
        if v.intermediate_kd() {
            let inter = self
                .labelers
                .as_ref()
                .and_then(|l| l.intermediate.as_ref())
                .ok_or_else(|| Error::invalid("letKD-2 needs an intermediate labeler"))?;
            let [h, w, _] = site_shape(&self.student, KdSite::Intermediate)?;
            let map = out.inter_x.ok_or_else(|| {
                Error::invalid("the teacher has no intermediate attachment point")
            })?;
            let aligned = align_spatial(tape.value(map), h, w)?;
            targets.inter = Some(intermediate_soft_labels(
                &aligned,
                y,
                &inter.lda,
                &inter.subclass,
            )?);
        }
        Ok(targets)
    }
}

fn concat(parts: Vec<Tensor>) -> Result<Tensor> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(&shape, data)
}

fn concat_opt(parts: Vec<Option<Tensor>>) -> Result<Option<Tensor>> {
    if parts.iter().any(Option::is_none) {
        return Ok(None);
    }
    concat(parts.into_iter().flatten().collect()).map(Some)
}

impl CachedLabels {
    /// Runs the online path over every sample, in order.
    pub fn build(online: &mut OnlineLabels, dataset: &Dataset) -> Result<Self> {
        let flip = online.plan.flip;
        let mut splits: [[Targets; 2]; 2] = Default::default();
        for (si, split) in [&dataset.train, &dataset.test].into_iter().enumerate() {
            for (fi, flipped) in [false, true].into_iter().enumerate() {
                if flipped && !flip {
                    continue;
                }
                let (mut p, mut i, mut l) = (Vec::new(), Vec::new(), Vec::new());
                for start in (0..split.len()).step_by(INFER_CHUNK) {
                    let idx: Vec<usize> = (start..(start + INFER_CHUNK).min(split.len())).collect();
                    let flips = vec![flipped; idx.len()];
                    let (x, y) = split.batch(&idx, Some(&flips));
                    let t = online.targets(&x, &y)?;
                    p.push(t.penult);
                    i.push(t.inter);
                    l.push(t.logits);
                }
                splits[si][fi] = Targets {
                    penult: concat_opt(p)?,
                    inter: concat_opt(i)?,
                    logits: concat_opt(l)?,
                };
            }
        }
        Ok(CachedLabels { splits })
    }
}

impl LabelProvider {
    pub fn targets(
        &mut self,
        split: SplitId,
        indices: &[usize],
        flips: Option<&[bool]>,
        x: &Tensor,
        y: &[usize],
    ) -> Result<Targets> {
        match self {
            LabelProvider::None => Ok(Targets::default()),
            LabelProvider::Online(o) => o.targets(x, y),
            LabelProvider::Cached(c) => {
                let s = &c.splits[split as usize];
                let pick = |f: usize, idx: &[usize]| Targets {
                    penult: gather(&s[f].penult, idx),
                    inter: gather(&s[f].inter, idx),
                    logits: gather(&s[f].logits, idx),
                };
                let Some(flips) = flips.filter(|f| f.iter().any(|&b| b)) else {
                    return Ok(pick(0, indices));
                };
                // rows come from the orientation each sample was drawn in
                let per_sample: Vec<Targets> = indices
                    .iter()
                    .zip(flips)
                    .map(|(&i, &f)| pick(f as usize, &[i]))
                    .collect();
                Ok(Targets {
                    penult: concat_opt(per_sample.iter().map(|t| t.penult.clone()).collect())?,
                    inter: concat_opt(per_sample.iter().map(|t| t.inter.clone()).collect())?,
                    logits: concat_opt(per_sample.into_iter().map(|t| t.logits).collect())?,
                })
            }
        }
    }
}

fn site_shape(spec: &ModelSpec, site: KdSite) -> Result<[usize; 3]> {
    spec.site_shape(site)
        .ok_or_else(|| Error::invalid(format!("the model has no {site:?} attachment point")))
}

/// Number of penultimate entities the labelers emit.
pub fn penultimate_entities(labelers: &TeacherLabelers, teacher: &ModelSpec) -> Result<usize> {
    match labelers.penultimate.source {
        LabelSource::KMeans => Ok(labelers.penultimate.centers.rows()),
        LabelSource::Teacher3x3 => teacher
            .last_conv_shape()
            .map(|s| s[2])
            .ok_or_else(|| Error::invalid("teacher has no conv layer")),
    }
}

/// A freshly initialized student with the KD layers its variant needs.
pub fn build_student(spec: &ModelSpec, plan: &TrainPlan, penult_k: usize) -> Result<Network> {
    let mut net = Network::init(spec, plan.seed)?;
    let v = plan.variant;
    if v.penultimate_kd() {
        let d = site_shape(spec, KdSite::Penultimate)?[2];
        let alpha = if v == Variant::QuestStyle {
            0.0
        } else {
            plan.alpha_penult
        };
        let mut kd = init_kd_layer(
            d,
            penult_k,
            alpha,
            plan.assign_mode,
            sub_seed(plan.seed, "kd_penult"),
        )?;
        kd.pred_temperature = plan.pred_temperature;
        if v == Variant::QuestStyle {
            kd = kd.without_embedding();
        }
        net.kd_penult = Some(kd);
    }
    if v.intermediate_kd() {
        let d = site_shape(spec, KdSite::Intermediate)?[2];
        let k = spec.num_classes * plan.k_inter;
        let mut kd = init_kd_layer(
            d,
            k,
            plan.alpha_inter,
            plan.assign_mode,
            sub_seed(plan.seed, "kd_inter"),
        )?;
        kd.pred_temperature = plan.pred_temperature;
        net.kd_inter = Some(kd);
    }
    Ok(net)
}

/// Eval-mode top-1 accuracy on `split`.
pub fn evaluate(net: &mut Network, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty split"));
    }
    let mut hits = 0;
    for start in (0..split.len()).step_by(INFER_CHUNK) {
        let idx: Vec<usize> = (start..(start + INFER_CHUNK).min(split.len())).collect();
        let (x, y) = split.batch(&idx, None);
        hits += correct(&net.predict(&x)?, &y);
    }
    Ok(hits as f64 / split.len() as f64)
}

/// Eval-mode losses and accuracy on a split.
pub fn eval_losses(
    net: &mut Network,
    split: &Split,
    split_id: SplitId,
    labels: &mut LabelProvider,
    plan: &TrainPlan,
) -> Result<LossSummary> {
    let mut sum = LossSummary::default();
    let mut hits = 0;
    for start in (0..split.len()).step_by(INFER_CHUNK) {
        let idx: Vec<usize> = (start..(start + INFER_CHUNK).min(split.len())).collect();
        let (x, y) = split.batch(&idx, None);
        let targets = labels.targets(split_id, &idx, None, &x, &y)?;
        let mut tape = Tape::new();
        let (out, vars) = record_losses(&mut tape, net, x, &y, &targets, plan, Mode::Eval, false)?;
        let n = idx.len() as f64;
        sum.ce += n * tape.value(vars.ce).item();
        sum.kd_penult += n * weighted(&tape, vars.kd_penult);
        sum.kd_inter += n * weighted(&tape, vars.kd_inter);
        hits += correct(tape.value(out.logits), &y);
    }
    let n = split.len() as f64;
    Ok(LossSummary {
        ce: sum.ce / n,
        kd_penult: sum.kd_penult / n,
        kd_inter: sum.kd_inter / n,
        top1: hits as f64 / n,
    })
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    pub history: Vec<MetricsRecord>,
    /// Eval-mode accuracies; absent when no step ran, since batch norm has no
    /// running statistics yet.
    pub train_top1: Option<f64>,
    pub test_top1: Option<f64>,
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(sub_seed(seed, "shuffle"), &epoch.to_string()));
    idx
}

/// Trains `net` in place under `plan` and returns the finished checkpoint.
pub fn fit(
    mut net: Network,
    plan: &TrainPlan,
    dataset: &Dataset,
    labels: &mut LabelProvider,
    mut metrics: Option<&mut MetricsWriter>,
) -> Result<TrainReport> {
    plan.validate()?;
    let mut opt = plan.optimizer();
    let mut history = Vec::new();
    let train = &dataset.train;
    for epoch in 0..plan.epochs {
        let started = Instant::now();
        opt.lr = step_schedule(plan.lr, epoch, &plan.milestones, plan.lr_factor);
        let order = shuffled(train.len(), plan.seed, epoch);
        let mut sum = LossSummary::default();
        let (mut hits, mut seen) = (0usize, 0usize);
        for (step, idx) in order.chunks(plan.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let flips: Option<Vec<bool>> = plan.flip.then(|| {
                idx.iter()
                    .map(|&i| flip_decision(plan.seed, epoch, i))
                    .collect()
            });
            let (x, y) = train.batch(idx, flips.as_deref());
            let targets = labels.targets(SplitId::Train, idx, flips.as_deref(), &x, &y)?;
            let mut tape = Tape::new();
            let (out, vars) = record_losses(
                &mut tape,
                &mut net,
                x,
                &y,
                &targets,
                plan,
                Mode::Train,
                true,
            )?;
            let total = tape.value(vars.total).item();
            let ce = tape.value(vars.ce).item();
            let (kp, ki) = (
                weighted(&tape, vars.kd_penult),
                weighted(&tape, vars.kd_inter),
            );
            if !total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    what: format!("loss is {total}"),
                });
            }
            if (total - (ce + kp + ki)).abs() > 1e-9 * (1.0 + total.abs()) {
                return Err(Error::Autograd(format!(
                    "loss decomposition broke: total {total} vs {ce} + {kp} + {ki}"
                )));
            }
            let n = idx.len() as f64;
            sum.ce += n * ce;
            sum.kd_penult += n * kp;
            sum.kd_inter += n * ki;
            hits += correct(tape.value(out.logits), &y);
            seen += idx.len();

            tape.backward(vars.total)?;
            let grads: Vec<Tensor> = out
                .params
                .iter()
                .map(|&v| {
                    tape.grad(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
                })
                .collect();
            drop(tape);
            sgd_update(&mut net.params_mut(), &grads, &mut opt)?;
            net.renormalize();
            if net.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    what: "non-finite parameters after the update".into(),
                });
            }
        }
        let seen_f = seen.max(1) as f64;
        let wall = |t: Instant| {
            if plan.record_wall_time {
                t.elapsed().as_secs_f64()
            } else {
                0.0
            }
        };
        let mut rows = vec![MetricsRecord {
            epoch,
            split: "train".into(),
            loss_ce: sum.ce / seen_f,
            loss_kd_penult: sum.kd_penult / seen_f,
            loss_kd_inter: sum.kd_inter / seen_f,
            top1: hits as f64 / seen_f,
            wall_seconds: wall(started),
        }];
        if (epoch + 1) % plan.eval_every == 0 || epoch + 1 == plan.epochs {
            let s = eval_losses(&mut net, &dataset.test, SplitId::Test, labels, plan)?;
            rows.push(MetricsRecord {
                epoch,
                split: "test".into(),
                loss_ce: s.ce,
                loss_kd_penult: s.kd_penult,
                loss_kd_inter: s.kd_inter,
                top1: s.top1,
                wall_seconds: wall(started),
            });
        }
        for r in rows {
            if let Some(m) = metrics.as_deref_mut() {
                m.write(&r)?;
            }
            history.push(r);
        }
    }
    let trained = history.iter().any(|r| r.split == "train");
    let (train_top1, test_top1) = if trained {
        (
            Some(evaluate(&mut net, &dataset.train)?),
            Some(evaluate(&mut net, &dataset.test)?),
        )
    } else {
        (None, None)
    };
    let mut meta = BTreeMap::new();
    meta.insert("variant".to_string(), plan.variant.name().to_string());
    meta.insert("seed".to_string(), plan.seed.to_string());
    meta.insert("epochs".to_string(), plan.epochs.to_string());
    if let (Some(a), Some(b)) = (train_top1, test_top1) {
        meta.insert("train_top1".to_string(), format!("{a:?}"));
        meta.insert("test_top1".to_string(), format!("{b:?}"));
    }
    Ok(TrainReport {
        checkpoint: Checkpoint {
            network: net,
            optimizer: Some(opt),
            meta,
        },
        history,
        train_top1,
        test_top1,
    })
}

/// Cross-entropy training of a teacher network.
pub fn train_teacher(
    spec: &ModelSpec,
    plan: &TrainPlan,
    dataset: &Dataset,
    metrics: Option<&mut MetricsWriter>,
) -> Result<TrainReport> {
    check_classes(dataset)?;
    let mut plan = plan.clone();
    plan.variant = Variant::Baseline;
    fit(
        Network::init(spec, plan.seed)?,
        &plan,
        dataset,
        &mut LabelProvider::None,
        metrics,
    )
}

fn check_classes(dataset: &Dataset) -> Result<()> {
    let mut seen = vec![false; dataset.num_classes];
    for &y in &dataset.train.labels {
        seen[y] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::invalid("the train split does not cover every class"));
    }
    Ok(())
}

/// Teacher maps over the train split, aligned to the student's sites.
struct TeacherPixels {
    /// `N·h·w × d`, from the penultimate site.
    penult: Tensor,
    /// `N·h·w × d` and per-pixel labels, from the intermediate site.
    inter: Option<(Tensor, Vec<usize>)>,
}

fn collect_teacher_pixels(
    teacher: &mut Network,
    train: &Split,
    student: &ModelSpec,
    with_inter: bool,
) -> Result<TeacherPixels> {
    let [ph, pw, _] = site_shape(student, KdSite::Penultimate)?;
    let inter_hw = if with_inter {
        let [h, w, _] = site_shape(student, KdSite::Intermediate)?;
        Some((h, w))
    } else {
        None
    };
    let (mut pen, mut int, mut int_labels) = (Vec::new(), Vec::new(), Vec::new());
    for start in (0..train.len()).step_by(INFER_CHUNK) {
        let idx: Vec<usize> = (start..(start + INFER_CHUNK).min(train.len())).collect();
        let (x, y) = train.batch(&idx, None);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = teacher.forward(&mut tape, xv, Mode::Eval, false)?;
        let p = align_spatial(tape.value(out.penult_x), ph, pw)?;
        pen.push(p.clone().reshape(&[p.rows(), p.last_dim()])?);
        if let Some((h, w)) = inter_hw {
            let map = out.inter_x.ok_or_else(|| {
                Error::invalid("the teacher has no intermediate attachment point")
            })?;
            let m = align_spatial(tape.value(map), h, w)?;
            int.push(m.clone().reshape(&[m.rows(), m.last_dim()])?);
            for &c in &y {
                int_labels.extend(std::iter::repeat_n(c, h * w));
            }
        }
    }
    Ok(TeacherPixels {
        penult: concat(pen)?,
        inter: if with_inter {
            Some((concat(int)?, int_labels))
        } else {
            None
        },
    })
}

/// Uniform subset of at most `limit` rows, in increasing order.
fn subset(n: usize, limit: usize, seed: u64, tag: &str) -> Option<Vec<usize>> {
    (n > limit).then(|| {
        let mut idx = sample(&mut rng_for(seed, tag), n, limit).into_vec();
        idx.sort_unstable();
        idx
    })
}

/// Fits the penultimate labeler and, when the student has an intermediate
/// site, the LDA and sub-class tables.
pub fn build_labelers(
    teacher: &mut Network,
    dataset: &Dataset,
    student: &ModelSpec,
    plan: &TrainPlan,
    seed: u64,
) -> Result<TeacherLabelers> {
    let with_inter = student.site_shape(KdSite::Intermediate).is_some()
        && teacher.spec.site_shape(KdSite::Intermediate).is_some();
    let needs_pixels = plan.label_source == LabelSource::KMeans || with_inter;
    let pixels = if needs_pixels {
        Some(collect_teacher_pixels(
            teacher,
            &dataset.train,
            student,
            with_inter,
        )?)
    } else {
        None
    };
    let penultimate = match plan.label_source {
        LabelSource::Teacher3x3 => PenultimateLabeler::teacher_3x3(plan.label_temperature)?,
        LabelSource::KMeans => {
            let feats = &pixels.as_ref().expect("pixels collected").penult;
            let feats = match subset(feats.rows(), plan.kmeans_samples, seed, "kmeans.subset") {
                Some(idx) => feats.select_outer(&idx),
                None => feats.clone(),
            };
            let centers = fit_penultimate_centers(&feats, plan.k_penult, sub_seed(seed, "penult"))?;
            PenultimateLabeler::from_centers(centers, plan.label_temperature)?
        }
    };
    let intermediate = match pixels.and_then(|p| p.inter) {
        Some((feats, labels)) => {
            let (feats, labels) = match subset(feats.rows(), plan.lda_samples, seed, "lda.subset") {
                Some(idx) => (
                    feats.select_outer(&idx),
                    idx.iter().map(|&i| labels[i]).collect(),
                ),
                None => (feats, labels),
            };
            let lda = fit_lda(&feats, &labels, plan.lda_shrinkage)?;
            let z = lda.apply_map(&feats)?;
            let mut subclass = fit_subclass_model(
                &z,
                &labels,
                dataset.num_classes,
                plan.k_inter,
                sub_seed(seed, "inter"),
            )?;
            if let Some(t) = plan.inter_temperature {
                subclass.smooth_rows(t)?;
            }
            Some(IntermediateLabeler { lda, subclass })
        }
        None => None,
    };
    Ok(TeacherLabelers {
        penultimate,
        intermediate,
    })
}

/// Builds the target source for a student run.
pub fn label_provider(
    plan: &TrainPlan,
    teacher: Option<&Network>,
    labelers: Option<&TeacherLabelers>,
    student: &ModelSpec,
    dataset: &Dataset,
) -> Result<LabelProvider> {
    if !plan.variant.needs_teacher() {
        return Ok(LabelProvider::None);
    }
    let teacher = teacher.ok_or_else(|| {
        Error::invalid(format!("variant {} needs a teacher", plan.variant.name()))
    })?;
    for site in [KdSite::Penultimate, KdSite::Intermediate] {
        if let (Some(s), Some(t)) = (student.site_shape(site), teacher.spec.site_shape(site)) {
            if t[0] % s[0] != 0 || t[1] % s[1] != 0 {
                return Err(Error::invalid(format!(
                    "teacher {site:?} map {}×{} cannot be pooled to the student's {}×{}",
                    t[0], t[1], s[0], s[1]
                )));
            }
        }
    }
    let mut online = OnlineLabels {
        teacher: teacher.clone(),
        labelers: labelers.cloned(),
        student: student.clone(),
        plan: plan.clone(),
    };
    if plan.label_cache {
        Ok(LabelProvider::Cached(Box::new(CachedLabels::build(
            &mut online,
            dataset,
        )?)))
    } else {
        Ok(LabelProvider::Online(Box::new(online)))
    }
}

/// Trains one student under `plan`.
pub fn train_student(
    spec: &ModelSpec,
    plan: &TrainPlan,
    teacher: Option<&Network>,
    labelers: Option<&TeacherLabelers>,
    dataset: &Dataset,
    metrics: Option<&mut MetricsWriter>,
) -> Result<TrainReport> {
    check_classes(dataset)?;
    let penult_k = match (plan.variant.penultimate_kd(), labelers, teacher) {
        (true, Some(l), Some(t)) => penultimate_entities(l, &t.spec)?,
        (true, ..) => {
            return Err(Error::invalid(
                "KD-layer variants need a teacher and labelers",
            ))
        }
        (false, ..) => plan.k_penult,
    };
    let net = build_student(spec, plan, penult_k)?;
    let mut provider = label_provider(plan, teacher, labelers, spec, dataset)?;
    fit(net, plan, dataset, &mut provider, metrics)
}

fn gap_features(
    net: &mut Network,
    split: &Split,
    site: KdSite,
    use_kd_output: bool,
) -> Result<Tensor> {
    let mut rows = Vec::new();
    for start in (0..split.len()).step_by(INFER_CHUNK) {
        let idx: Vec<usize> = (start..(start + INFER_CHUNK).min(split.len())).collect();
        let (x, _) = split.batch(&idx, None);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = net.forward(&mut tape, xv, Mode::Eval, false)?;
        let v = match (site, use_kd_output) {
            (KdSite::Penultimate, false) => Some(out.penult_x),
            (KdSite::Penultimate, true) => Some(out.penult_x_hat),
            (KdSite::Intermediate, false) => out.inter_x,
            (KdSite::Intermediate, true) => out.inter_x_hat,
        }
        .ok_or_else(|| Error::invalid(format!("the model has no {site:?} attachment point")))?;
        rows.push(crate::ops::global_avg_pool(tape.value(v))?);
    }
    concat(rows)
}

/// Accuracy of an LDA classifier fit to pooled features of the train split
/// and scored on the test split.
pub fn linear_probe(
    net: &mut Network,
    site: KdSite,
    dataset: &Dataset,
    use_kd_output: bool,
) -> Result<f64> {
    let train = gap_features(net, &dataset.train, site, use_kd_output)?;
    let test = gap_features(net, &dataset.test, site, use_kd_output)?;
    lda_classifier_accuracy(
        &train,
        &dataset.train.labels,
        &test,
        &dataset.test.labels,
        dataset.num_classes,
    )
}

/// Nearest class mean in the LDA space of the train features.
pub fn lda_classifier_accuracy(
    train: &Tensor,
    train_y: &[usize],
    test: &Tensor,
    test_y: &[usize],
    num_classes: usize,
) -> Result<f64> {
    let lda = fit_lda(train, train_y, crate::lda::DEFAULT_SHRINKAGE)?;
    let z = lda.apply_map(train)?;
    let k = lda.output_dim();
    let mut means = vec![0.0; num_classes * k];
    let mut counts = vec![0usize; num_classes];
    for (i, &y) in train_y.iter().enumerate() {
        counts[y] += 1;
        for (m, v) in means[y * k..(y + 1) * k].iter_mut().zip(z.row(i)) {
            *m += v;
        }
    }
    for c in 0..num_classes {
        if counts[c] > 0 {
            means[c * k..(c + 1) * k]
                .iter_mut()
                .for_each(|m| *m /= counts[c] as f64);
        }
    }
    let zt = lda.apply_map(test)?;
    let hits = test_y
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let mut best = (usize::MAX, f64::INFINITY);
            for c in (0..num_classes).filter(|&c| counts[c] > 0) {
                let d = crate::kmeans::sq_dist(zt.row(i), &means[c * k..(c + 1) * k]);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best.0 == y
        })
        .count();
    Ok(hits as f64 / test_y.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaRow {
    pub alpha_inter: f64,
    pub alpha_penult: f64,
    /// Test top-1 per seed.
    pub top1: Vec<f64>,
}

impl AlphaRow {
    pub fn mean(&self) -> f64 {
        self.top1.iter().sum::<f64>() / self.top1.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AlphaRow>,
}

impl AlphaReport {
    pub fn row(&self, alpha_inter: f64, alpha_penult: f64) -> Option<&AlphaRow> {
        self.rows
            .iter()
            .find(|r| r.alpha_inter == alpha_inter && r.alpha_penult == alpha_penult)
    }

    /// Mean over the rows with the given α at one site, averaging the other.
    pub fn marginal(&self, site: KdSite, alpha: f64) -> f64 {
        let picked: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| match site {
                KdSite::Intermediate => r.alpha_inter == alpha,
                KdSite::Penultimate => r.alpha_penult == alpha,
            })
            .map(AlphaRow::mean)
            .collect();
        picked.iter().sum::<f64>() / picked.len().max(1) as f64
    }

    /// Plain-text table: one row per grid point, one column per seed.
    pub fn to_table(&self) -> String {
        let mut s = String::from("alpha_inter,alpha_penult");
        for seed in &self.seeds {
            s.push_str(&format!(",seed{seed}"));
        }
        s.push_str(",mean\n");
        for r in &self.rows {
            s.push_str(&format!("{},{}", r.alpha_inter, r.alpha_penult));
            for v in &r.top1 {
                s.push_str(&format!(",{v}"));
            }
            s.push_str(&format!(",{}\n", r.mean()));
        }
        s
    }
}

/// Trains letKD-2 students over `(α_inter, α_penult) ∈ {0, 1}²` for every seed.
pub fn ablate_alpha(
    spec: &ModelSpec,
    base: &TrainPlan,
    teacher: &Network,
    labelers: &TeacherLabelers,
    dataset: &Dataset,
    seeds: &[u64],
) -> Result<AlphaReport> {
    let mut rows = Vec::new();
    for (alpha_inter, alpha_penult) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
        let mut top1 = Vec::new();
        for &seed in seeds {
            let plan = TrainPlan {
                variant: Variant::LetKd2,
                alpha_inter,
                alpha_penult,
                seed,
                ..base.clone()
            };
            let rep = train_student(spec, &plan, Some(teacher), Some(labelers), dataset, None)?;
            top1.push(
                rep.test_top1
                    .ok_or_else(|| Error::invalid("the ablation needs at least one epoch"))?,
            );
        }
        rows.push(AlphaRow {
            alpha_inter,
            alpha_penult,
            top1,
        });
    }
    Ok(AlphaReport {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Normalization;

    /// Two classes: bright versus dark images, trivially separable.
    pub(crate) fn toy_dataset(n: usize, size: usize) -> Dataset {
        let make = |count: usize, offset: usize| {
            let mut data = Vec::new();
            let mut labels = Vec::new();
            for i in 0..count {
                let y = (i + offset) % 2;
                let base = if y == 0 { -1.0 } else { 1.0 };
                for p in 0..size * size * 3 {
                    data.push(base + 0.1 * (((i * 31 + p * 17) % 13) as f64 / 13.0 - 0.5));
                }
                labels.push(y);
            }
            Split {
                images: Tensor::new(&[count, size, size, 3], data).unwrap(),
                labels,
            }
        };
        Dataset {
            train: make(n, 0),
            test: make(n / 2, 1),
            normalization: Normalization {
                mean: vec![0.0; 3],
                std: vec![1.0; 3],
            },
            num_classes: 2,
        }
    }

    fn tiny_spec() -> ModelSpec {
        ModelSpec::plain_cnn([8, 8, 3], &[(4, 2), (6, 2), (6, 1)], 2).unwrap()
    }

    fn tiny_plan(epochs: usize) -> TrainPlan {
        TrainPlan {
            epochs,
            milestones: vec![],
            batch_size: 8,
            eval_every: 1,
            k_penult: 4,
            k_inter: 2,
            ..TrainPlan::default()
        }
    }

    #[test]
    fn separable_toy_is_learned() {
        let ds = toy_dataset(64, 8);
        let rep = train_teacher(&tiny_spec(), &tiny_plan(20), &ds, None).unwrap();
        assert_eq!(rep.train_top1, Some(1.0));
    }

    #[test]
    fn zero_epochs_keep_the_initialization() {
        let ds = toy_dataset(16, 8);
        let rep = train_teacher(&tiny_spec(), &tiny_plan(0), &ds, None).unwrap();
        assert_eq!(
            rep.checkpoint.network,
            Network::init(&tiny_spec(), 0).unwrap()
        );
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(Variant::parse("nope").is_err());
    }

    #[test]
    fn matched_targets_leave_only_cross_entropy() {
        let spec = tiny_spec();
        let plan = TrainPlan {
            variant: Variant::LetKd2,
            ..tiny_plan(1)
        };
        let mut net = build_student(&spec, &plan, 4).unwrap();
        let ds = toy_dataset(8, 8);
        let (x, y) = ds.train.batch(&[0, 1, 2, 3], None);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut probe = net.clone();
        let out = probe.forward(&mut tape, xv, Mode::Train, false).unwrap();
        let targets = Targets {
            penult: Some(tape.value(out.kd_penult.unwrap().p_s).clone()),
            inter: Some(tape.value(out.kd_inter.unwrap().p_s).clone()),
            logits: None,
        };
        let mut tape = Tape::new();
        let (_, vars) = record_losses(
            &mut tape,
            &mut net,
            x,
            &y,
            &targets,
            &plan,
            Mode::Train,
            true,
        )
        .unwrap();
        assert_eq!(tape.value(vars.total).item(), tape.value(vars.ce).item());
    }

    fn toy_teacher(ds: &Dataset) -> (Network, TeacherLabelers) {
        let mut t = train_teacher(&tiny_spec(), &tiny_plan(2), ds, None)
            .unwrap()
            .checkpoint
            .network;
        let labelers = build_labelers(&mut t, ds, &tiny_spec(), &tiny_plan(1), 3).unwrap();
        (t, labelers)
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let ds = toy_dataset(32, 8);
        let (t, l) = toy_teacher(&ds);
        let plan = TrainPlan {
            variant: Variant::LetKd2,
            seed: 5,
            ..tiny_plan(2)
        };
        let a = train_student(&tiny_spec(), &plan, Some(&t), Some(&l), &ds, None).unwrap();
        let b = train_student(&tiny_spec(), &plan, Some(&t), Some(&l), &ds, None).unwrap();
        assert_eq!(a, b);
        let c = train_student(
            &tiny_spec(),
            &TrainPlan { seed: 6, ..plan },
            Some(&t),
            Some(&l),
            &ds,
            None,
        )
        .unwrap();
        assert_ne!(a.checkpoint.network, c.checkpoint.network);
    }

    #[test]
    fn cached_targets_match_online_targets() {
        let ds = toy_dataset(24, 8);
        let (t, l) = toy_teacher(&ds);
        for variant in [Variant::LetKd2, Variant::VanillaKd] {
            let plan = TrainPlan {
                variant,
                flip: true,
                label_cache: false,
                ..tiny_plan(1)
            };
            let mut online = label_provider(&plan, Some(&t), Some(&l), &tiny_spec(), &ds).unwrap();
            let cached_plan = TrainPlan {
                label_cache: true,
                ..plan
            };
            let mut cached =
                label_provider(&cached_plan, Some(&t), Some(&l), &tiny_spec(), &ds).unwrap();
            assert!(matches!(cached, LabelProvider::Cached(_)));
            let idx = [3, 0, 7, 11, 5];
            let flips = [true, false, false, true, true];
            let (x, y) = ds.train.batch(&idx, Some(&flips));
            let a = online
                .targets(SplitId::Train, &idx, Some(&flips), &x, &y)
                .unwrap();
            let b = cached
                .targets(SplitId::Train, &idx, Some(&flips), &x, &y)
                .unwrap();
            assert_eq!(a, b);
            let (x, y) = ds.test.batch(&idx, None);
            let a = online.targets(SplitId::Test, &idx, None, &x, &y).unwrap();
            let b = cached.targets(SplitId::Test, &idx, None, &x, &y).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn residual_with_zero_alpha_follows_the_loss_only_trajectory() {
        let ds = toy_dataset(32, 8);
        let (t, l) = toy_teacher(&ds);
        let run = |variant, alpha_penult| {
            let plan = TrainPlan {
                variant,
                alpha_penult,
                ..tiny_plan(2)
            };
            train_student(&tiny_spec(), &plan, Some(&t), Some(&l), &ds, None).unwrap()
        };
        let a = run(Variant::LetKd1, 0.0);
        let b = run(Variant::QuestStyle, 1.0);
        assert_eq!(a.history, b.history);
        let (na, nb) = (&a.checkpoint.network, &b.checkpoint.network);
        assert_eq!(na.convs, nb.convs);
        assert_eq!(na.fc_w, nb.fc_w);
        assert_eq!(
            na.kd_penult.as_ref().unwrap().omega,
            nb.kd_penult.as_ref().unwrap().omega
        );
    }

    #[test]
    fn kd_variants_require_a_teacher() {
        let ds = toy_dataset(8, 8);
        let plan = TrainPlan {
            variant: Variant::LetKd1,
            ..tiny_plan(1)
        };
        assert!(train_student(&tiny_spec(), &plan, None, None, &ds, None).is_err());
    }

    #[test]
    fn lda_classifier_on_clustered_features() {
        let feats = Tensor::new(
            &[6, 2],
            vec![0., 0., 0.1, 0., 0., 0.1, 5., 5., 5.1, 5., 5., 5.1],
        )
        .unwrap();
        let y = [0, 0, 0, 1, 1, 1];
        assert_eq!(
            lda_classifier_accuracy(&feats, &y, &feats, &y, 2).unwrap(),
            1.0
        );
    }
}
