//! Tracking evaluation: per-frame overlap and center error, one-pass
//! precision/success curves, and long-term precision/recall/F-score over a
//! confidence sweep.

use std::fs;
use std::path::Path;

use crate::error::{DatasetError, Error, Result};

/// Per-frame outcome. Boxes are `(x, y, w, h)` in pixels; `pred == None`
/// means the tracker reported the target lost, `gt == None` that the target
/// is absent from the frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameResult {
    pub pred: Option<[f64; 4]>,
    pub gt: Option<[f64; 4]>,
    pub confidence: Option<f64>,
}

/// Summary metrics; all values lie in [0, 1].
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub precision_at_20: f64,
    pub success_auc: f64,
    pub f_score: f64,
    pub pr: f64,
    pub re: f64,
    /// Fraction of frames with center error ≤ t, for t = 0..=50 px.
    pub precision_curve: Vec<f64>,
    /// Fraction of frames with IoU > t, for t = 0.00, 0.02, ..., 1.00.
    pub success_curve: Vec<f64>,
}

/// Intersection over union of two `(x, y, w, h)` boxes; 0 when the union
/// has no area.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = ((a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0])).max(0.0);
    let ih = ((a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union > 0.0 {
        // Rounding in the corner arithmetic can push a perfect overlap a few
        // ulps past 1, which would break the strict success threshold at 1.0.
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

fn center_error(a: [f64; 4], b: [f64; 4]) -> f64 {
    let dx = (a[0] + a[2] / 2.0) - (b[0] + b[2] / 2.0);
    let dy = (a[1] + a[3] / 2.0) - (b[1] + b[3] / 2.0);
    (dx * dx + dy * dy).sqrt()
}

fn gt_frames(results: &[FrameResult]) -> Result<Vec<&FrameResult>> {
    let frames: Vec<&FrameResult> = results.iter().filter(|r| r.gt.is_some()).collect();
    if frames.is_empty() {
        return Err(Error::InvalidArgument(
            "no frames with ground truth present".into(),
        ));
    }
    Ok(frames)
}

/// Precision curve over center-error thresholds 0..=50 px. Frames without a
/// prediction count as failures at every threshold.
pub fn precision_plot(results: &[FrameResult]) -> Result<Vec<f64>> {
    let frames = gt_frames(results)?;
    let errors: Vec<f64> = frames
        .iter()
        .map(|r| match r.pred {
            Some(p) => center_error(p, r.gt.expect("filtered")),
            None => f64::INFINITY,
        })
        .collect();
    Ok((0..=50)
        .map(|t| {
            errors.iter().filter(|&&e| e <= t as f64).count() as f64 / errors.len() as f64
        })
        .collect())
}

/// The 51 IoU thresholds of the success plot: 0.00, 0.02, ..., 1.00.
pub fn success_thresholds() -> Vec<f64> {
    (0..=50).map(|i| i as f64 * 0.02).collect()
}

/// Success curve (fraction of frames with IoU strictly above each
/// threshold) and its AUC, the mean over the 51 thresholds.
pub fn success_plot(results: &[FrameResult]) -> Result<(Vec<f64>, f64)> {
    let frames = gt_frames(results)?;
    let overlaps: Vec<f64> = frames
        .iter()
        .map(|r| match r.pred {
            Some(p) => iou(p, r.gt.expect("filtered")),
            None => 0.0,
        })
        .collect();
    let curve: Vec<f64> = success_thresholds()
        .iter()
        .map(|&t| overlaps.iter().filter(|&&o| o > t).count() as f64 / overlaps.len() as f64)
        .collect();
    let auc = curve.iter().sum::<f64>() / curve.len() as f64;
    Ok((curve, auc))
}

/// Harmonic mean of precision and recall; 0 when both vanish.
pub fn f_score(pr: f64, re: f64) -> f64 {
    if pr + re > 0.0 {
        2.0 * re * pr / (re + pr)
    } else {
        0.0
    }
}

/// Long-term operating point: precision, recall, F and the confidence
/// threshold that maximizes F.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrReF {
    pub pr: f64,
    pub re: f64,
    pub f: f64,
    pub threshold: f64,
}

/// Sweep confidence thresholds; at each, precision is the mean IoU over
/// frames where the tracker reports the target and recall the mean IoU over
/// frames where the target exists. Returns the F-maximizing point.
pub fn pr_re_f(results: &[FrameResult], thresholds: &[f64]) -> Result<PrReF> {
    if results.iter().any(|r| r.pred.is_some() && r.confidence.is_none()) {
        return Err(Error::InvalidArgument(
            "pr_re_f requires a confidence for every reported frame".into(),
        ));
    }
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("no confidence thresholds given".into()));
    }
    let n_gt = results.iter().filter(|r| r.gt.is_some()).count();
    let mut best = PrReF { pr: 0.0, re: 0.0, f: -1.0, threshold: 0.0 };
    for &tau in thresholds {
        let mut reported = 0usize;
        let mut pr_sum = 0.0;
        let mut re_sum = 0.0;
        for r in results {
            let is_reported = matches!((r.pred, r.confidence), (Some(_), Some(c)) if c >= tau);
            if is_reported {
                reported += 1;
                let overlap = match r.gt {
                    Some(gt) => iou(r.pred.expect("reported"), gt),
                    None => 0.0,
                };
                pr_sum += overlap;
                if r.gt.is_some() {
                    re_sum += overlap;
                }
            }
        }
        let pr = if reported > 0 { pr_sum / reported as f64 } else { 0.0 };
        let re = if n_gt > 0 { re_sum / n_gt as f64 } else { 0.0 };
        let f = f_score(pr, re);
        if f > best.f {
            best = PrReF { pr, re, f, threshold: tau };
        }
    }
    Ok(best)
}

/// Full report; the confidence sweep uses the unique confidences present
/// (plus 0), or a single all-reported point when none are given.
pub fn evaluate(results: &[FrameResult]) -> Result<EvalReport> {
    let precision_curve = precision_plot(results)?;
    let (success_curve, success_auc) = success_plot(results)?;
    let mut thresholds: Vec<f64> = results.iter().filter_map(|r| r.confidence).collect();
    thresholds.push(0.0);
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("finite confidences"));
    thresholds.dedup();
    let have_conf = results.iter().any(|r| r.confidence.is_some());
    let point = if have_conf {
        pr_re_f(results, &thresholds)?
    } else {
        let with_conf: Vec<FrameResult> = results
            .iter()
            .map(|r| FrameResult { confidence: r.pred.map(|_| 1.0), ..*r })
            .collect();
        pr_re_f(&with_conf, &[0.0])?
    };
    Ok(EvalReport {
        precision_at_20: precision_curve[20],
        success_auc,
        f_score: point.f,
        pr: point.pr,
        re: point.re,
        precision_curve,
        success_curve,
    })
}

// ── result files ────────────────────────────────────────────────────

/// One line per frame: `x,y,w,h` or the literal `absent`.
pub fn write_boxes(boxes: &[Option<[f64; 4]>], path: &Path) -> Result<()> {
    let mut text = String::new();
    for b in boxes {
        match b {
            Some([x, y, w, h]) => text.push_str(&format!("{x},{y},{w},{h}\n")),
            None => text.push_str("absent\n"),
        }
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_boxes(path: &Path) -> Result<Vec<Option<[f64; 4]>>> {
    let text = fs::read_to_string(path).map_err(|_| DatasetError::MissingFile(path.into()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            if line.trim() == "absent" {
                return Ok(None);
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| {
                    Error::from(DatasetError::MalformedImage {
                        path: path.into(),
                        reason: format!("bad result line `{line}`"),
                    })
                })?;
            if vals.len() != 4 {
                return Err(Error::InvalidArgument(format!(
                    "result line `{line}` has {} fields",
                    vals.len()
                )));
            }
            Ok(Some([vals[0], vals[1], vals[2], vals[3]]))
        })
        .collect()
}

/// One confidence per line, aligned with the box file.
pub fn write_confidences(conf: &[f64], path: &Path) -> Result<()> {
    let text: String = conf.iter().map(|c| format!("{c}\n")).collect();
    fs::write(path, text)?;
    Ok(())
}

pub fn read_confidences(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|_| DatasetError::MissingFile(path.into()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad confidence `{l}`")))
        })
        .collect()
}
