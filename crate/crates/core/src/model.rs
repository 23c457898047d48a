//! Small plain CNNs with optional KD layers.
//!
//! A network is a list of conv-BN-ReLU groups, global average pooling, and a
//! linear classifier. Two attachment points are marked: the intermediate one
//! after the first group of the final stage (the last run of groups sharing a
//! resolution), and the penultimate one after the last group.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::kd_layer::{KdForward, KdLayerParams};
use crate::ops::{Mode, RunningStats};
use crate::seed::sub_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdSite {
    Intermediate,
    Penultimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Conv { out: usize, stride: usize },
    BatchNorm,
    Relu,
    Kd(KdSite),
    GlobalPool,
    Linear { out: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    /// `height × width × channels` of one input image.
    pub input: [usize; 3],
    pub layers: Vec<Layer>,
    pub num_classes: usize,
}

impl ModelSpec {
    /// Conv-BN-ReLU groups given as `(width, stride)`, then pooling and a
    /// linear classifier, with both KD markers placed.
    pub fn plain_cnn(
        input: [usize; 3],
        groups: &[(usize, usize)],
        num_classes: usize,
    ) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::invalid("a network needs at least one conv group"));
        }
        let last_stage_start = groups.iter().rposition(|&(_, s)| s != 1).unwrap_or(0);
        let mut layers = Vec::new();
        for (i, &(out, stride)) in groups.iter().enumerate() {
            layers.extend([Layer::Conv { out, stride }, Layer::BatchNorm, Layer::Relu]);
            if i == last_stage_start && i + 1 < groups.len() {
                layers.push(Layer::Kd(KdSite::Intermediate));
            }
        }
        layers.extend([
            Layer::Kd(KdSite::Penultimate),
            Layer::GlobalPool,
            Layer::Linear { out: num_classes },
        ]);
        let spec = ModelSpec {
            input,
            layers,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The 4-conv student: 8, 16, 32 channels at stride 2, then 32 at stride 1.
    pub fn student(num_classes: usize) -> Self {
        Self::plain_cnn(
            [32, 32, 3],
            &[(8, 2), (16, 2), (32, 2), (32, 1)],
            num_classes,
        )
        .expect("valid spec")
    }

    /// The 8-conv teacher: two groups per resolution, 12/24/48 channels, plus
    /// two more 48-channel groups in the final stage.
    pub fn teacher(num_classes: usize) -> Self {
        Self::plain_cnn(
            [32, 32, 3],
            &[
                (12, 2),
                (12, 1),
                (24, 2),
                (24, 1),
                (48, 2),
                (48, 1),
                (48, 1),
                (48, 1),
            ],
            num_classes,
        )
        .expect("valid spec")
    }

    /// One-line textual form, stored in checkpoints and compared on load.
    pub fn describe(&self) -> String {
        let layers: Vec<String> = self
            .layers
            .iter()
            .map(|l| match *l {
                Layer::Conv { out, stride } => format!("conv{out}s{stride}"),
                Layer::BatchNorm => "bn".into(),
                Layer::Relu => "relu".into(),
                Layer::Kd(KdSite::Intermediate) => "kd_inter".into(),
                Layer::Kd(KdSite::Penultimate) => "kd_penult".into(),
                Layer::GlobalPool => "gap".into(),
                Layer::Linear { out } => format!("fc{out}"),
            })
            .collect();
        let [h, w, c] = self.input;
        format!("{h}x{w}x{c}:{}:C{}", layers.join(","), self.num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        let count = |site| {
            self.layers
                .iter()
                .filter(|&&l| l == Layer::Kd(site))
                .count()
        };
        if count(KdSite::Penultimate) != 1 {
            return Err(Error::invalid(
                "a model needs exactly one penultimate attachment point",
            ));
        }
        if count(KdSite::Intermediate) > 1 {
            return Err(Error::invalid(
                "a model has at most one intermediate attachment point",
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("a classifier needs at least 2 classes"));
        }
        self.shapes().map(|_| ())
    }

    /// Per-image `h × w × c` after every layer.
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut cur = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            cur = match *layer {
                Layer::Conv { out, stride } => {
                    let ext = |n: usize| {
                        if n + 2 < 3 {
                            Err(Error::invalid("conv output extent below 1"))
                        } else {
                            Ok((n + 2 - 3) / stride + 1)
                        }
                    };
                    if out == 0 || !(1..=2).contains(&stride) {
                        return Err(Error::invalid(format!("invalid conv layer {layer:?}")));
                    }
                    [ext(cur[0])?, ext(cur[1])?, out]
                }
                Layer::GlobalPool => [1, 1, cur[2]],
                Layer::Linear { out } => [1, 1, out],
                _ => cur,
            };
            out.push(cur);
        }
        if cur[2] != self.num_classes {
            return Err(Error::invalid(
                "the final layer must produce one logit per class",
            ));
        }
        Ok(out)
    }

    /// `h × w × c` of the feature map at a KD site.
    pub fn site_shape(&self, site: KdSite) -> Option<[usize; 3]> {
        let shapes = self.shapes().ok()?;
        let i = self.layers.iter().position(|&l| l == Layer::Kd(site))?;
        Some(shapes[i])
    }

    /// `h × w × c` of the output of the last conv layer.
    pub fn last_conv_shape(&self) -> Option<[usize; 3]> {
        let shapes = self.shapes().ok()?;
        let i = self
            .layers
            .iter()
            .rposition(|l| matches!(l, Layer::Conv { .. }))?;
        Some(shapes[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    /// `out × in × 3 × 3`.
    pub w: Tensor,
    pub stride: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: RunningStats,
}

/// Parameters and state of a [`ModelSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: ModelSpec,
    pub convs: Vec<ConvBlock>,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
    pub kd_inter: Option<KdLayerParams>,
    pub kd_penult: Option<KdLayerParams>,
}

/// Handles recorded by [`Network::forward`].
#[derive(Debug, Clone)]
pub struct NetForward {
    pub logits: Var,
    /// Feature maps entering each KD site.
    pub inter_x: Option<Var>,
    pub penult_x: Var,
    /// Feature maps leaving each KD site (equal to the input without a layer).
    pub inter_x_hat: Option<Var>,
    pub penult_x_hat: Var,
    /// Output of the last conv layer, before its batch norm.
    pub last_conv_pre_bn: Var,
    pub kd_inter: Option<KdForward>,
    pub kd_penult: Option<KdForward>,
    /// Parameter handles in [`Network::param_names`] order (empty when frozen).
    pub params: Vec<Var>,
}

impl Network {
    /// Kaiming fan-in normal init for convs and the classifier, zero biases,
    /// unit BN scale. Each tensor draws from its own seed stream.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.shapes()?;
        let mut convs = Vec::new();
        let mut in_c = spec.input[2];
        let mut fc = None;
        for (i, layer) in spec.layers.iter().enumerate() {
            match *layer {
                Layer::Conv { out, stride } => {
                    let idx = convs.len();
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(sub_seed(seed, &format!("conv{idx}.w")));
                    let std = (2.0 / (in_c * 9) as f64).sqrt();
                    convs.push(ConvBlock {
                        w: Tensor::randn(&[out, in_c, 3, 3], std, &mut rng),
                        stride,
                        gamma: Tensor::ones(&[out]),
                        beta: Tensor::zeros(&[out]),
                        stats: RunningStats::new(out),
                    });
                }
                Layer::Linear { out } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "fc.w"));
                    let std = (1.0 / in_c as f64).sqrt();
                    fc = Some((
                        Tensor::randn(&[out, in_c], std, &mut rng),
                        Tensor::zeros(&[out]),
                    ));
                }
                _ => {}
            }
            in_c = shapes[i][2];
        }
        let (fc_w, fc_b) = fc.ok_or_else(|| Error::invalid("a model needs a linear classifier"))?;
        Ok(Network {
            spec: spec.clone(),
            convs,
            fc_w,
            fc_b,
            kd_inter: None,
            kd_penult: None,
        })
    }

    pub fn kd_slot(&self, site: KdSite) -> Option<&KdLayerParams> {
        match site {
            KdSite::Intermediate => self.kd_inter.as_ref(),
            KdSite::Penultimate => self.kd_penult.as_ref(),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.convs.len() {
            names.extend([
                format!("conv{i}.w"),
                format!("conv{i}.gamma"),
                format!("conv{i}.beta"),
            ]);
        }
        names.extend(["fc.w".to_string(), "fc.b".to_string()]);
        for (prefix, kd) in [("kd_inter", &self.kd_inter), ("kd_penult", &self.kd_penult)] {
            if let Some(kd) = kd {
                names.extend(
                    kd.param_names()
                        .into_iter()
                        .map(|n| format!("{prefix}.{n}")),
                );
            }
        }
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.extend([&c.w, &c.gamma, &c.beta]);
        }
        out.extend([&self.fc_w, &self.fc_b]);
        for kd in [&self.kd_inter, &self.kd_penult].into_iter().flatten() {
            out.extend(kd.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.extend([&mut c.w, &mut c.gamma, &mut c.beta]);
        }
        out.extend([&mut self.fc_w, &mut self.fc_b]);
        for kd in [&mut self.kd_inter, &mut self.kd_penult]
            .into_iter()
            .flatten()
        {
            out.extend(kd.params_mut());
        }
        out
    }

    /// Named BN running statistics, for checkpoints.
    pub fn running_stats(&self) -> Vec<(String, &RunningStats)> {
        let mut out: Vec<(String, &RunningStats)> = self
            .convs
            .iter()
            .enumerate()
            .map(|(i, c)| (format!("conv{i}.bn"), &c.stats))
            .collect();
        for (prefix, kd) in [("kd_inter", &self.kd_inter), ("kd_penult", &self.kd_penult)] {
            if let Some(kd) = kd {
                out.push((format!("{prefix}.bn"), &kd.bn_stats));
            }
        }
        out
    }

    pub fn running_stats_mut(&mut self) -> Vec<&mut RunningStats> {
        let mut out: Vec<&mut RunningStats> = self.convs.iter_mut().map(|c| &mut c.stats).collect();
        for kd in [&mut self.kd_inter, &mut self.kd_penult]
            .into_iter()
            .flatten()
        {
            out.push(&mut kd.bn_stats);
        }
        out
    }

    /// Re-projects KD kernels onto the unit sphere; call after every update.
    pub fn renormalize(&mut self) {
        for kd in [&mut self.kd_inter, &mut self.kd_penult]
            .into_iter()
            .flatten()
        {
            kd.renormalize();
        }
    }

    /// Records the network on `tape` for a `N × h × w × c` batch. With
    /// `trainable = false` parameters enter as constants.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        trainable: bool,
    ) -> Result<NetForward> {
        let params: Vec<Var> = self
            .params()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let n_conv = 3 * self.convs.len();
        let n_inter = self.kd_inter.as_ref().map_or(0, |k| k.param_names().len());
        let (fc_w, fc_b) = (params[n_conv], params[n_conv + 1]);
        let inter_vars = &params[n_conv + 2..n_conv + 2 + n_inter];
        let penult_vars = &params[n_conv + 2 + n_inter..];

        let mut h = x;
        let mut conv = 0usize;
        let mut last_pre_bn = None;
        let (mut inter_x, mut inter_x_hat, mut kd_inter) = (None, None, None);
        let (mut penult, mut kd_penult) = (None, None);
        for layer in self.spec.layers.clone() {
            match layer {
                Layer::Conv { stride, .. } => {
                    conv += 1;
                    h = tape.conv3x3(h, params[3 * (conv - 1)], stride, 1)?;
                    last_pre_bn = Some(h);
                }
                Layer::BatchNorm => {
                    let c = conv
                        .checked_sub(1)
                        .ok_or_else(|| Error::invalid("batch norm before any conv"))?;
                    let (g, b) = (params[3 * c + 1], params[3 * c + 2]);
                    h = tape.batch_norm(h, g, b, &mut self.convs[c].stats, mode)?;
                }
                Layer::Relu => h = tape.relu(h),
                Layer::Kd(KdSite::Intermediate) => {
                    inter_x = Some(h);
                    if let Some(kd) = &mut self.kd_inter {
                        let out = kd.forward_with(tape, h, inter_vars, mode)?;
                        h = out.x_hat;
                        kd_inter = Some(out);
                    }
                    inter_x_hat = Some(h);
                }
                Layer::Kd(KdSite::Penultimate) => {
                    let x_in = h;
                    if let Some(kd) = &mut self.kd_penult {
                        let out = kd.forward_with(tape, h, penult_vars, mode)?;
                        h = out.x_hat;
                        kd_penult = Some(out);
                    }
                    penult = Some((x_in, h));
                }
                Layer::GlobalPool => h = tape.global_avg_pool(h)?,
                Layer::Linear { .. } => h = tape.linear_map_1x1(h, fc_w, Some(fc_b))?,
            }
        }
        let (penult_x, penult_x_hat) =
            penult.ok_or_else(|| Error::invalid("missing penultimate marker"))?;
        Ok(NetForward {
            logits: h,
            inter_x,
            penult_x,
            inter_x_hat,
            penult_x_hat,
            last_conv_pre_bn: last_pre_bn
                .ok_or_else(|| Error::invalid("model has no conv layer"))?,
            kd_inter,
            kd_penult,
            params: if trainable { params } else { Vec::new() },
        })
    }

    /// Eval-mode logits for a batch, without recording gradients.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv, Mode::Eval, false)?;
        Ok(tape.value(out.logits).clone())
    }
}
