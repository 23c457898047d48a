//! Checkpoint and labeler bundles.
//!
//! A bundle is a directory holding `tensors.bin`, a concatenation of
//! [`TensorContainer`]s, and `manifest.txt`, a plain-text index:
//!
//! ```text
//! letkd-manifest 1
//! meta <key> <value>
//! tensor <name> <dtype> <d0,d1,…> <byte offset> <byte length> <crc32>
//! ```
//!
//! Bundles are written to a temporary sibling directory and renamed into
//! place. Loading verifies every checksum, so a damaged payload is reported
//! by tensor name.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::container::{write_atomic, DType, TensorContainer};
use crate::error::{Error, Result};
use crate::kd_layer::{init_kd_layer, AssignMode};
use crate::lda::LdaModel;
use crate::model::{KdSite, ModelSpec, Network};
use crate::ops::RunningStats;
use crate::optim::OptimizerState;
use crate::penultimate::{LabelSource, PenultimateLabeler};
use crate::subclass::{FitReport, SubclassModel};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";
pub const PAYLOAD: &str = "tensors.bin";
const HEADER: &str = "letkd-manifest 1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bundle {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, TensorContainer)>,
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace()) {
        return Err(Error::Format(format!(
            "{kind} {s:?} must be a non-empty token without whitespace"
        )));
    }
    Ok(())
}

impl Bundle {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors
            .push((name.into(), TensorContainer::from_tensor(t)));
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("bundle is missing meta key {key:?}")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| Error::Format(format!("meta key {key:?} has unparsable value {v:?}")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("bundle is missing tensor {name:?}")))?
            .1
            .to_tensor()
    }

    /// Copies tensor `name` into `dst`, which fixes the expected shape.
    fn fill(&self, name: &str, dst: &mut Tensor) -> Result<()> {
        let t = self.tensor(name)?;
        if t.shape() != dst.shape() {
            return Err(Error::Format(format!(
                "tensor {name:?} has shape {:?}, the model expects {:?}",
                t.shape(),
                dst.shape()
            )));
        }
        *dst = t;
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut manifest = String::from(HEADER);
        manifest.push('\n');
        for (k, v) in &self.meta {
            check_token("meta key", k)?;
            if v.contains('\n') {
                return Err(Error::Format(format!("meta value for {k:?} spans lines")));
            }
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        let mut payload = Vec::new();
        for (name, c) in &self.tensors {
            check_token("tensor name", name)?;
            let bytes = c.encode();
            let dims: Vec<String> = c.dims.iter().map(usize::to_string).collect();
            manifest.push_str(&format!(
                "tensor {name} {} {} {} {} {:08x}\n",
                c.dtype().name(),
                if dims.is_empty() {
                    "-".to_string()
                } else {
                    dims.join(",")
                },
                payload.len(),
                bytes.len(),
                crc32fast::hash(&bytes)
            ));
            payload.extend(bytes);
        }

        let parent = dir
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("bundle");
        let tmp = parent.join(format!(".{name}.tmp{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        write_atomic(&tmp.join(PAYLOAD), &payload)?;
        write_atomic(&tmp.join(MANIFEST), manifest.as_bytes())?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let manifest = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let ppath = dir.join(PAYLOAD);
        let payload = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
        let mut lines = manifest.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::Format(format!(
                "{} has an unknown header",
                mpath.display()
            )));
        }
        let mut bundle = Bundle::default();
        for line in lines {
            let bad = || Error::Format(format!("malformed manifest line {line:?}"));
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').ok_or_else(bad)?;
                bundle.meta.insert(k.to_string(), v.to_string());
                continue;
            }
            let f: Vec<&str> = line
                .strip_prefix("tensor ")
                .ok_or_else(bad)?
                .split(' ')
                .collect();
            let [name, dtype, dims, off, len, crc] = f[..] else {
                return Err(bad());
            };
            let dtype = DType::from_name(dtype)?;
            let dims: Vec<usize> = if dims == "-" {
                Vec::new()
            } else {
                dims.split(',')
                    .map(|d| d.parse().map_err(|_| bad()))
                    .collect::<Result<_>>()?
            };
            let off: usize = off.parse().map_err(|_| bad())?;
            let len: usize = len.parse().map_err(|_| bad())?;
            let crc = u32::from_str_radix(crc, 16).map_err(|_| bad())?;
            let bytes = payload
                .get(off..off + len)
                .ok_or_else(|| Error::Format(format!("tensor {name:?}: payload truncated")))?;
            if crc32fast::hash(bytes) != crc {
                return Err(Error::Format(format!("tensor {name:?}: checksum mismatch")));
            }
            let c = TensorContainer::decode(bytes)
                .map_err(|e| Error::Format(format!("tensor {name:?}: {e}")))?;
            if c.dtype() != dtype || c.dims != dims {
                return Err(Error::Format(format!(
                    "tensor {name:?} disagrees with its manifest entry"
                )));
            }
            bundle.tensors.push((name.to_string(), c));
        }
        Ok(bundle)
    }
}

fn mode_string(mode: AssignMode) -> String {
    match mode {
        AssignMode::BnRelu => "bn_relu".into(),
        AssignMode::ExplicitSoftmax { mu, eps } => format!("explicit:{mu:?}:{eps:?}"),
    }
}

fn parse_mode(s: &str) -> Result<AssignMode> {
    if s == "bn_relu" {
        return Ok(AssignMode::BnRelu);
    }
    let bad = || Error::Format(format!("unknown assignment mode {s:?}"));
    let rest = s.strip_prefix("explicit:").ok_or_else(bad)?;
    let (mu, eps) = rest.split_once(':').ok_or_else(bad)?;
    Ok(AssignMode::ExplicitSoftmax {
        mu: mu.parse().map_err(|_| bad())?,
        eps: eps.parse().map_err(|_| bad())?,
    })
}

fn push_stats(b: &mut Bundle, name: &str, s: &RunningStats) {
    b.push(format!("{name}.mean"), &s.mean);
    b.push(format!("{name}.var"), &s.var);
    b.set(&format!("{name}.initialized"), s.initialized);
}

fn fill_stats(b: &Bundle, name: &str, s: &mut RunningStats) -> Result<()> {
    b.fill(&format!("{name}.mean"), &mut s.mean)?;
    b.fill(&format!("{name}.var"), &mut s.var)?;
    s.initialized = b.parse(&format!("{name}.initialized"))?;
    Ok(())
}

/// A network, optionally its optimizer state, and free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub optimizer: Option<OptimizerState>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn to_bundle(&self) -> Bundle {
        let net = &self.network;
        let mut b = Bundle {
            meta: self
                .meta
                .iter()
                .map(|(k, v)| (format!("user.{k}"), v.clone()))
                .collect(),
            tensors: Vec::new(),
        };
        b.set("spec", net.spec.describe());
        for (prefix, kd) in [("kd_inter", &net.kd_inter), ("kd_penult", &net.kd_penult)] {
            if let Some(kd) = kd {
                b.set(&format!("{prefix}.templates"), kd.templates());
                b.set(&format!("{prefix}.alpha"), format!("{:?}", kd.alpha));
                b.set(&format!("{prefix}.mode"), mode_string(kd.mode));
                b.set(
                    &format!("{prefix}.pred_temperature"),
                    format!("{:?}", kd.pred_temperature),
                );
                b.set(&format!("{prefix}.embedding"), kd.nu.is_some());
            }
        }
        let names = net.param_names();
        for (name, t) in names.iter().zip(net.params()) {
            b.push(name.clone(), t);
        }
        for (name, s) in net.running_stats() {
            push_stats(&mut b, &name, s);
        }
        if let Some(opt) = &self.optimizer {
            b.set("opt.lr", format!("{:?}", opt.lr));
            b.set("opt.momentum", format!("{:?}", opt.momentum));
            b.set("opt.nesterov", opt.nesterov);
            b.set("opt.weight_decay", format!("{:?}", opt.weight_decay));
            for (name, v) in names.iter().zip(&opt.velocity) {
                b.push(format!("opt.v.{name}"), v);
            }
        }
        b
    }

    /// Rebuilds a checkpoint, checking every tensor against `spec`.
    pub fn from_bundle(b: &Bundle, spec: &ModelSpec) -> Result<Self> {
        let stored = b.get("spec")?;
        if stored != spec.describe() {
            return Err(Error::Format(format!(
                "checkpoint was written for {stored}, expected {}",
                spec.describe()
            )));
        }
        let mut net = Network::init(spec, 0)?;
        for (prefix, site) in [
            ("kd_inter", KdSite::Intermediate),
            ("kd_penult", KdSite::Penultimate),
        ] {
            if b.meta.contains_key(&format!("{prefix}.templates")) {
                let d = spec.site_shape(site).ok_or_else(|| {
                    Error::Format(format!("{prefix} present but the model has no such site"))
                })?[2];
                let mut kd = init_kd_layer(
                    d,
                    b.parse(&format!("{prefix}.templates"))?,
                    b.parse(&format!("{prefix}.alpha"))?,
                    parse_mode(b.get(&format!("{prefix}.mode"))?)?,
                    0,
                )?;
                kd.pred_temperature = b.parse(&format!("{prefix}.pred_temperature"))?;
                if !b.parse::<bool>(&format!("{prefix}.embedding"))? {
                    kd = kd.without_embedding();
                }
                match site {
                    KdSite::Intermediate => net.kd_inter = Some(kd),
                    KdSite::Penultimate => net.kd_penult = Some(kd),
                }
            }
        }
        let names = net.param_names();
        for (name, t) in names.iter().zip(net.params_mut()) {
            b.fill(name, t)?;
        }
        let stat_names: Vec<String> = net.running_stats().into_iter().map(|(n, _)| n).collect();
        for (name, s) in stat_names.iter().zip(net.running_stats_mut()) {
            fill_stats(b, name, s)?;
        }
        let optimizer = if b.meta.contains_key("opt.lr") {
            let mut opt = OptimizerState::new(
                b.parse("opt.lr")?,
                b.parse("opt.momentum")?,
                b.parse("opt.nesterov")?,
                b.parse("opt.weight_decay")?,
            );
            if b.tensors.iter().any(|(n, _)| n.starts_with("opt.v.")) {
                for (name, p) in names.iter().zip(net.params()) {
                    let mut v = Tensor::zeros(p.shape());
                    b.fill(&format!("opt.v.{name}"), &mut v)?;
                    opt.velocity.push(v);
                }
            }
            Some(opt)
        } else {
            None
        };
        let meta = b
            .meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("user.").map(|k| (k.to_string(), v.clone())))
            .collect();
        Ok(Checkpoint {
            network: net,
            optimizer,
            meta,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_bundle().save(dir)
    }

    pub fn load(dir: &Path, spec: &ModelSpec) -> Result<Self> {
        Self::from_bundle(&Bundle::load(dir)?, spec)
    }
}

/// Intermediate-layer supervision: the LDA map and the sub-class model.
#[derive(Debug, Clone, PartialEq)]
pub struct IntermediateLabeler {
    pub lda: LdaModel,
    pub subclass: SubclassModel,
}

/// Frozen teacher supervision for both attachment points.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherLabelers {
    pub penultimate: PenultimateLabeler,
    pub intermediate: Option<IntermediateLabeler>,
}

impl TeacherLabelers {
    pub fn to_bundle(&self) -> Bundle {
        let mut b = Bundle::default();
        let p = &self.penultimate;
        b.set("penult.tau", format!("{:?}", p.tau));
        b.set(
            "penult.source",
            match p.source {
                LabelSource::KMeans => "kmeans",
                LabelSource::Teacher3x3 => "teacher_3x3",
            },
        );
        if p.source == LabelSource::KMeans {
            b.push("penult.centers", &p.centers);
        }
        if let Some(inter) = &self.intermediate {
            let s = &inter.subclass;
            b.set("inter.classes", s.num_classes);
            b.set("inter.k_inter", s.k_inter);
            b.set("inter.shrinkage", format!("{:?}", inter.lda.shrinkage));
            let join = |v: &[usize]| {
                if v.is_empty() {
                    "-".to_string()
                } else {
                    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
                }
            };
            b.set("inter.empty_rows", join(&s.report.empty_rows));
            b.set("inter.row_counts", join(&s.report.row_counts));
            b.push("inter.lda_w", &inter.lda.w);
            b.push("inter.lda_b", &inter.lda.b);
            b.push("inter.prototypes", &s.prototypes);
            b.push("inter.s_t", &s.s_t);
        }
        b
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        let tau: f64 = b.parse("penult.tau")?;
        let penultimate = match b.get("penult.source")? {
            "kmeans" => PenultimateLabeler::from_centers(b.tensor("penult.centers")?, tau)?,
            "teacher_3x3" => PenultimateLabeler::teacher_3x3(tau)?,
            other => {
                return Err(Error::Format(format!(
                    "unknown penultimate source {other:?}"
                )))
            }
        };
        let intermediate = if b.meta.contains_key("inter.classes") {
            let list = |key: &str| -> Result<Vec<usize>> {
                let v = b.get(key)?;
                if v == "-" {
                    return Ok(Vec::new());
                }
                v.split(',')
                    .map(|x| {
                        x.parse()
                            .map_err(|_| Error::Format(format!("bad list in {key:?}")))
                    })
                    .collect()
            };
            let subclass = SubclassModel {
                prototypes: b.tensor("inter.prototypes")?,
                s_t: b.tensor("inter.s_t")?,
                num_classes: b.parse("inter.classes")?,
                k_inter: b.parse("inter.k_inter")?,
                report: FitReport {
                    empty_rows: list("inter.empty_rows")?,
                    row_counts: list("inter.row_counts")?,
                },
            };
            let m = subclass.entities();
            if subclass.s_t.shape() != [m, m] || subclass.prototypes.rank() != 3 {
                return Err(Error::Format(
                    "sub-class tensors disagree with C and K_inter".into(),
                ));
            }
            let lda = LdaModel {
                w: b.tensor("inter.lda_w")?,
                b: b.tensor("inter.lda_b")?,
                shrinkage: b.parse("inter.shrinkage")?,
            };
            if lda.w.rank() != 2
                || lda.b.shape() != [lda.output_dim()]
                || lda.output_dim() != subclass.prototypes.last_dim()
            {
                return Err(Error::Format(
                    "LDA tensors disagree with the prototypes".into(),
                ));
            }
            Some(IntermediateLabeler { lda, subclass })
        } else {
            None
        };
        Ok(TeacherLabelers {
            penultimate,
            intermediate,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_bundle().save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_bundle(&Bundle::load(dir)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn student_with_kd() -> Checkpoint {
        let spec = ModelSpec::student(10);
        let mut net = Network::init(&spec, 3).unwrap();
        let d = spec.site_shape(KdSite::Penultimate).unwrap()[2];
        net.kd_penult = Some(init_kd_layer(d, 6, 1.0, AssignMode::BnRelu, 4).unwrap());
        net.kd_inter = Some(
            init_kd_layer(d, 5, 0.5, AssignMode::explicit_default(), 5)
                .unwrap()
                .without_embedding(),
        );
        let mut opt = OptimizerState::new(0.05, 0.9, true, 5e-4);
        opt.velocity = net.params().iter().map(|p| p.map(|v| v * 0.5)).collect();
        let mut meta = BTreeMap::new();
        meta.insert("top1".to_string(), "0.5".to_string());
        Checkpoint {
            network: net,
            optimizer: Some(opt),
            meta,
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ck = student_with_kd();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        ck.save(&a).unwrap();
        let back = Checkpoint::load(&a, &ModelSpec::student(10)).unwrap();
        assert_eq!(back, ck);
        back.save(&b).unwrap();
        for f in [MANIFEST, PAYLOAD] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        }
    }

    #[test]
    fn corrupted_byte_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let ck = student_with_kd();
        ck.save(dir.path()).unwrap();
        let b = Bundle::load(dir.path()).unwrap();
        let manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        let line = manifest
            .lines()
            .find(|l| l.starts_with("tensor fc.w "))
            .unwrap();
        let off: usize = line.split(' ').nth(4).unwrap().parse().unwrap();
        let mut payload = fs::read(dir.path().join(PAYLOAD)).unwrap();
        payload[off + 40] ^= 0x10;
        fs::write(dir.path().join(PAYLOAD), &payload).unwrap();
        let err = Bundle::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("fc.w"), "{err}");
        assert!(!b.tensors.is_empty());
    }

    #[test]
    fn spec_mismatch_and_truncation_fail() {
        let dir = tempfile::tempdir().unwrap();
        student_with_kd().save(dir.path()).unwrap();
        assert!(Checkpoint::load(dir.path(), &ModelSpec::teacher(10)).is_err());
        let mut payload = fs::read(dir.path().join(PAYLOAD)).unwrap();
        payload.truncate(payload.len() - 3);
        fs::write(dir.path().join(PAYLOAD), &payload).unwrap();
        assert!(Bundle::load(dir.path()).is_err());
    }

    #[test]
    fn labeler_bundle_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let centers = Tensor::new(&[2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let labelers = TeacherLabelers {
            penultimate: PenultimateLabeler::from_centers(centers, 0.7).unwrap(),
            intermediate: Some(IntermediateLabeler {
                lda: LdaModel {
                    w: Tensor::new(&[1, 2], vec![0.5, -0.25]).unwrap(),
                    b: Tensor::from_vec(vec![0.1]),
                    shrinkage: 0.1,
                },
                subclass: SubclassModel {
                    prototypes: Tensor::new(&[2, 1, 1], vec![-1.0, 1.0]).unwrap(),
                    s_t: Tensor::new(&[2, 2], vec![0.75, 0.25, 0.0, 1.0]).unwrap(),
                    num_classes: 2,
                    k_inter: 1,
                    report: FitReport {
                        empty_rows: vec![1],
                        row_counts: vec![4, 0],
                    },
                },
            }),
        };
        labelers.save(dir.path()).unwrap();
        assert_eq!(TeacherLabelers::load(dir.path()).unwrap(), labelers);
        let plain = TeacherLabelers {
            penultimate: PenultimateLabeler::teacher_3x3(2.0).unwrap(),
            intermediate: None,
        };
        plain.save(dir.path()).unwrap();
        assert_eq!(TeacherLabelers::load(dir.path()).unwrap(), plain);
    }
}
