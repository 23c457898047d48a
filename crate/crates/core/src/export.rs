//! Per-pixel assignment IDs for a batch, as a plain table.
//!
//! Teacher IDs are the nearest K-means center (or strongest 3×3 kernel) at
//! the penultimate site and the nearest sub-class prototype in LDA space at
//! the intermediate site. Student IDs are the argmax of the KD layer's
//! prediction `p_S` at the same pixel.

use std::fmt::Write as _;

use crate::autograd::Tape;
use crate::checkpoint::TeacherLabelers;
use crate::error::{Error, Result};
use crate::kmeans::nearest;
use crate::model::{KdSite, ModelSpec, Network};
use crate::ops::Mode;
use crate::penultimate::{align_spatial, LabelSource};
use crate::tensor::Tensor;

pub const HEADER: &str = "image,row,col,label,teacher_id,student_id";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentRow {
    pub image: usize,
    pub row: usize,
    pub col: usize,
    pub label: usize,
    pub teacher_id: usize,
    pub student_id: Option<usize>,
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, j| if v[j] > v[b] { j } else { b })
}

fn missing(site: KdSite) -> Error {
    Error::invalid(format!("no {site:?} attachment point"))
}

/// Teacher and (optionally) student IDs for every pixel of the site map.
///
/// `images` holds the dataset indices of the batch rows.
#[allow(clippy::too_many_arguments)]
pub fn export_assignments(
    teacher: &mut Network,
    labelers: &TeacherLabelers,
    student_spec: &ModelSpec,
    student: Option<&mut Network>,
    site: KdSite,
    x: &Tensor,
    labels: &[usize],
    images: &[usize],
) -> Result<Vec<AssignmentRow>> {
    let [h, w, _] = student_spec.site_shape(site).ok_or_else(|| missing(site))?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = teacher.forward(&mut tape, xv, Mode::Eval, false)?;
    let teacher_ids: Vec<usize> = match site {
        KdSite::Penultimate => {
            let l = &labelers.penultimate;
            let src = match l.source {
                LabelSource::KMeans => out.penult_x,
                LabelSource::Teacher3x3 => out.last_conv_pre_bn,
            };
            let map = align_spatial(tape.value(src), h, w)?;
            let d = map.last_dim();
            map.data()
                .chunks(d)
                .map(|px| match l.source {
                    LabelSource::KMeans => nearest(px, &l.centers).0,
                    LabelSource::Teacher3x3 => argmax(px),
                })
                .collect()
        }
        KdSite::Intermediate => {
            let inter = labelers
                .intermediate
                .as_ref()
                .ok_or_else(|| Error::invalid("the labelers have no intermediate model"))?;
            let v = out.inter_x.ok_or_else(|| missing(site))?;
            let z = inter.lda.apply_map(&align_spatial(tape.value(v), h, w)?)?;
            z.data()
                .chunks(z.last_dim())
                .map(|row| inter.subclass.h2(row))
                .collect()
        }
    };
    let student_ids: Option<Vec<usize>> = match student {
        Some(net) => {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let out = net.forward(&mut tape, xv, Mode::Eval, false)?;
            let kd = match site {
                KdSite::Penultimate => out.kd_penult,
                KdSite::Intermediate => out.kd_inter,
            }
            .ok_or_else(|| Error::invalid(format!("the student has no {site:?} KD layer")))?;
            let p = tape.value(kd.p_s);
            Some(p.data().chunks(p.last_dim()).map(argmax).collect())
        }
        None => None,
    };
    let mut rows = Vec::with_capacity(teacher_ids.len());
    for (i, &t) in teacher_ids.iter().enumerate() {
        let (b, rest) = (i / (h * w), i % (h * w));
        rows.push(AssignmentRow {
            image: images[b],
            row: rest / w,
            col: rest % w,
            label: labels[b],
            teacher_id: t,
            student_id: student_ids.as_ref().map(|s| s[i]),
        });
    }
    Ok(rows)
}

/// Comma-separated table with a header; missing student IDs print as `-`.
pub fn to_table(rows: &[AssignmentRow]) -> String {
    let mut s = format!("{HEADER}\n");
    for r in rows {
        let student = r.student_id.map_or("-".to_string(), |v| v.to_string());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{student}",
            r.image, r.row, r.col, r.label, r.teacher_id
        );
    }
    s
}
