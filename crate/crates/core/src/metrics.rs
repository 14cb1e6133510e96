//! Region similarity J, boundary accuracy F and their mean, following the
//! DAVIS evaluation conventions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoders::ObjectMask;
use crate::error::{Error, Result};

fn check_sizes(a: &ObjectMask, b: &ObjectMask) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::input(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// IoU of two binary masks; 1 when both are empty.
pub fn iou(pred: &[bool], gt: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn region_j(pred: &ObjectMask, gt: &ObjectMask, object: u8) -> Result<f64> {
    check_sizes(pred, gt)?;
    Ok(iou(&pred.binary(object), &gt.binary(object)))
}

/// Mask pixels with at least one 4-neighbour outside the mask (pixels beyond
/// the frame count as outside).
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let at = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize];
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            mask[i] && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1))
        })
        .collect()
}

/// Dilation by a Euclidean disk of radius `r`.
pub fn dilate(mask: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let ri = r as isize;
    let offsets: Vec<(isize, isize)> = (-ri..=ri)
        .flat_map(|dy| (-ri..=ri).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| dy * dy + dx * dx <= ri * ri)
        .collect();
    let mut out = vec![false; h * w];
    for i in 0..h * w {
        if !mask[i] {
            continue;
        }
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for &(dy, dx) in &offsets {
            let (yy, xx) = (y + dy, x + dx);
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                out[yy as usize * w + xx as usize] = true;
            }
        }
    }
    out
}

/// Match tolerance in pixels for an `h × w` frame: 0.8% of the diagonal,
/// rounded up.
pub fn tolerance_radius(h: usize, w: usize) -> usize {
    (0.008 * ((h * h + w * w) as f64).sqrt()).ceil() as usize
}

/// Boundary F-measure of binary masks with an explicit tolerance radius.
pub fn boundary_f_with_radius(pred: &[bool], gt: &[bool], h: usize, w: usize, r: usize) -> f64 {
    let (bp, bg) = (boundary(pred, h, w), boundary(gt, h, w));
    let (np, ng) = (bp.iter().filter(|&&b| b).count(), bg.iter().filter(|&&b| b).count());
    let (precision, recall) = match (np, ng) {
        (0, 0) => (1.0, 1.0),
        (0, _) => (1.0, 0.0),
        (_, 0) => (0.0, 1.0),
        _ => {
            let (dp, dg) = (dilate(&bp, h, w, r), dilate(&bg, h, w, r));
            let matched_p = bp.iter().zip(&dg).filter(|(&b, &d)| b && d).count();
            let matched_g = bg.iter().zip(&dp).filter(|(&b, &d)| b && d).count();
            (matched_p as f64 / np as f64, matched_g as f64 / ng as f64)
        }
    };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn boundary_f(pred: &ObjectMask, gt: &ObjectMask, object: u8) -> Result<f64> {
    check_sizes(pred, gt)?;
    let (h, w) = (gt.height(), gt.width());
    Ok(boundary_f_with_radius(
        &pred.binary(object),
        &gt.binary(object),
        h,
        w,
        tolerance_radius(h, w),
    ))
}

/// Scores of one object over the evaluated frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectScores {
    pub object: u8,
    pub j_mean: f64,
    pub f_mean: f64,
    /// `(frame, J, F)` per evaluated frame.
    pub frames: Vec<(usize, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequence: String,
    pub objects: Vec<ObjectScores>,
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf: f64,
}

/// Frames scored for a sequence of length `t`: the annotated first frame and,
/// when there are at least three frames, the last frame are excluded.
pub fn evaluated_frames(t: usize) -> std::ops::Range<usize> {
    if t >= 3 {
        1..t - 1
    } else {
        1..t
    }
}

/// Score predictions against ground truth for every object of the first
/// ground-truth frame.
pub fn evaluate(sequence: &str, preds: &[ObjectMask], gts: &[ObjectMask]) -> Result<EvalReport> {
    if preds.len() != gts.len() || gts.is_empty() {
        return Err(Error::input(format!(
            "need one prediction per ground-truth frame ({} vs {})",
            preds.len(),
            gts.len()
        )));
    }
    let frames = evaluated_frames(gts.len());
    let mut objects = Vec::new();
    for id in gts[0].object_ids() {
        let mut series = Vec::new();
        for t in frames.clone() {
            series.push((t, region_j(&preds[t], &gts[t], id)?, boundary_f(&preds[t], &gts[t], id)?));
        }
        let n = series.len().max(1) as f64;
        let (j, f) = if series.is_empty() {
            (1.0, 1.0)
        } else {
            (
                series.iter().map(|s| s.1).sum::<f64>() / n,
                series.iter().map(|s| s.2).sum::<f64>() / n,
            )
        };
        objects.push(ObjectScores {
            object: id,
            j_mean: j,
            f_mean: f,
            frames: series,
        });
    }
    let n = objects.len().max(1) as f64;
    let (j_mean, f_mean) = if objects.is_empty() {
        (1.0, 1.0)
    } else {
        (
            objects.iter().map(|o| o.j_mean).sum::<f64>() / n,
            objects.iter().map(|o| o.f_mean).sum::<f64>() / n,
        )
    };
    Ok(EvalReport {
        sequence: sequence.to_string(),
        objects,
        j_mean,
        f_mean,
        jf: (j_mean + f_mean) / 2.0,
    })
}

/// `(J, F, J&F)` averaged over every object of every report.
pub fn mean_over_objects(reports: &[EvalReport]) -> (f64, f64, f64) {
    let objects: Vec<&ObjectScores> = reports.iter().flat_map(|r| &r.objects).collect();
    if objects.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    let n = objects.len() as f64;
    let j = objects.iter().map(|o| o.j_mean).sum::<f64>() / n;
    let f = objects.iter().map(|o| o.f_mean).sum::<f64>() / n;
    (j, f, (j + f) / 2.0)
}

impl EvalReport {
    /// Aligned plain-text table, one row per object plus a summary row.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>6} {:>8} {:>8} {:>8}", "sequence", "object", "J", "F", "J&F");
        for o in &self.objects {
            let _ = writeln!(
                s,
                "{:<16} {:>6} {:>8.4} {:>8.4} {:>8.4}",
                self.sequence,
                o.object,
                o.j_mean,
                o.f_mean,
                (o.j_mean + o.f_mean) / 2.0
            );
        }
        let _ = writeln!(
            s,
            "{:<16} {:>6} {:>8.4} {:>8.4} {:>8.4}",
            self.sequence, "mean", self.j_mean, self.f_mean, self.jf
        );
        s
    }
}
