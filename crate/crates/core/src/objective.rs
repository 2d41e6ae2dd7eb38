//! Training objective: penalty-reduced focal loss over the classification
//! map plus generalized-IoU and L1 terms on the box regressed at the
//! ground-truth peak cell.

use crate::error::{Error, Result};
use crate::foundation::{box_at_cell_t, HeadMaps};
use crate::tensor::{Tape, Tensor, Var};

/// Regression term weights (`total = cls + λ_iou·iou + λ_l1·l1`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_iou: f64,
    pub lambda_l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_iou: 2.0,
            lambda_l1: 5.0,
        }
    }
}

/// Ground-truth supervision for one sample: the normalized box and a
/// Gaussian-splatted heatmap with an exact 1 at the center cell.
#[derive(Clone, Debug)]
pub struct GtTarget {
    pub box_cxcywh: [f64; 4],
    /// `[1, S, S]`, values in [0, 1], exactly one cell equal to 1.
    pub cls_target: Tensor,
    /// (row, col) of the peak cell.
    pub peak: (usize, usize),
}

impl GtTarget {
    pub fn new(box_cxcywh: [f64; 4], grid: usize) -> Result<Self> {
        let [cx, cy, w, h] = box_cxcywh;
        if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) || w < 0.0 || h < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "ground-truth box out of range: {box_cxcywh:?}"
            )));
        }
        let s = grid as f64;
        let j = ((cx * s) as usize).min(grid - 1);
        let i = ((cy * s) as usize).min(grid - 1);
        let radius = gaussian_radius(h * s, w * s, 0.7).max(0.0).floor() as i64;
        let sigma = (2.0 * radius as f64 + 1.0) / 6.0;
        let mut map = Tensor::zeros(&[1, grid, grid]);
        for di in -radius..=radius {
            for dj in -radius..=radius {
                let (ii, jj) = (i as i64 + di, j as i64 + dj);
                if ii < 0 || jj < 0 || ii >= grid as i64 || jj >= grid as i64 {
                    continue;
                }
                let v = (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp();
                let cell = &mut map.data_mut()[(ii as usize) * grid + jj as usize];
                *cell = cell.max(v);
            }
        }
        map.data_mut()[i * grid + j] = 1.0;
        Ok(GtTarget {
            box_cxcywh,
            cls_target: map,
            peak: (i, j),
        })
    }
}

/// Largest center displacement (in cells) keeping IoU with a (h, w) box
/// above `min_overlap`; the smallest root over the three overlap cases.
pub fn gaussian_radius(h: f64, w: f64, min_overlap: f64) -> f64 {
    let o = min_overlap;
    let r1 = {
        let (b, c) = (h + w, w * h * (1.0 - o) / (1.0 + o));
        (b - (b * b - 4.0 * c).max(0.0).sqrt()) / 2.0
    };
    let r2 = {
        let (a, b, c) = (4.0, 2.0 * (h + w), (1.0 - o) * w * h);
        (b - (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a)
    };
    let r3 = {
        let (a, b, c) = (4.0 * o, 2.0 * o * (h + w), (o - 1.0) * w * h);
        (-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a)
    };
    r1.min(r2).min(r3)
}

const CLS_CLAMP: f64 = 1e-6;

/// Penalty-reduced focal loss on the tape. At peak cells (target exactly 1):
/// `−(1−p)²·ln p`; elsewhere `−(1−y)⁴·p²·ln(1−p)`; summed and divided by the
/// number of peaks.
pub fn focal_loss_t(tape: &mut Tape, cls: Var, target: &Tensor) -> Result<Var> {
    if tape.shape(cls) != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "focal_loss",
            lhs: tape.shape(cls).to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    if !target.data().iter().all(|&y| (0.0..=1.0).contains(&y)) {
        return Err(Error::InvalidArgument(
            "focal target values must lie in [0, 1]".into(),
        ));
    }
    let n_peaks = target.data().iter().filter(|&&y| y == 1.0).count();
    if n_peaks == 0 {
        return Err(Error::InvalidArgument("focal target has no peak cell".into()));
    }
    let peak_mask = Tensor::new(
        target.shape().to_vec(),
        target.data().iter().map(|&y| f64::from(y == 1.0)).collect(),
    )?;
    let neg_weight = Tensor::new(
        target.shape().to_vec(),
        target
            .data()
            .iter()
            .map(|&y| if y == 1.0 { 0.0 } else { (1.0 - y).powi(4) })
            .collect(),
    )?;

    let p = tape.clamp(cls, CLS_CLAMP, 1.0 - CLS_CLAMP);
    let one_minus_p = tape.affine(p, -1.0, 1.0);

    let pos_mask = tape.constant(&peak_mask);
    let ln_p = tape.ln(p);
    let om_sq = tape.mul(one_minus_p, one_minus_p)?;
    let pos = tape.mul(om_sq, ln_p)?;
    let pos = tape.mul(pos, pos_mask)?;

    let neg_mask = tape.constant(&neg_weight);
    let ln_om = tape.ln(one_minus_p);
    let p_sq = tape.mul(p, p)?;
    let neg = tape.mul(p_sq, ln_om)?;
    let neg = tape.mul(neg, neg_mask)?;

    let both = tape.add(pos, neg)?;
    let total = tape.sum(both);
    Ok(tape.affine(total, -1.0 / n_peaks as f64, 0.0))
}

/// Value-level focal loss (same computation as the tape path).
pub fn focal_loss(cls_map: &Tensor, cls_target: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let cls = tape.constant(cls_map);
    let loss = focal_loss_t(&mut tape, cls, cls_target)?;
    Ok(tape.data(loss)[0])
}

/// Generalized-IoU loss on corner-form boxes `[x1, y1, x2, y2]`:
/// `1 − IoU + (hull − union)/hull`. Degenerate boxes never produce NaN.
pub fn giou_loss(a: [f64; 4], b: [f64; 4]) -> f64 {
    let inter_w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let inter_h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = inter_w * inter_h;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    let giou = if hull > 0.0 { iou - (hull - union) / hull } else { iou };
    1.0 - giou
}

/// Mean absolute difference over the 4 coordinates.
pub fn l1_loss(a: [f64; 4], b: [f64; 4]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 4.0
}

/// Split a `[4]` (cx, cy, w, h) variable into corner-form scalar parts.
fn corners_t(tape: &mut Tape, b: Var) -> Result<[Var; 4]> {
    let cx = tape.slice_rows(b, 0, 1)?;
    let cy = tape.slice_rows(b, 1, 1)?;
    let w = tape.slice_rows(b, 2, 1)?;
    let h = tape.slice_rows(b, 3, 1)?;
    let hw = tape.affine(w, 0.5, 0.0);
    let hh = tape.affine(h, 0.5, 0.0);
    let x1 = tape.sub(cx, hw)?;
    let x2 = tape.add(cx, hw)?;
    let y1 = tape.sub(cy, hh)?;
    let y2 = tape.add(cy, hh)?;
    Ok([x1, y1, x2, y2])
}

/// GIoU loss between two (cx, cy, w, h) variables, on the tape.
pub fn giou_loss_t(tape: &mut Tape, box_a: Var, box_b: Var) -> Result<Var> {
    let a = corners_t(tape, box_a)?;
    let b = corners_t(tape, box_b)?;
    let xi1 = tape.max(a[0], b[0])?;
    let yi1 = tape.max(a[1], b[1])?;
    let xi2 = tape.min(a[2], b[2])?;
    let yi2 = tape.min(a[3], b[3])?;
    let iw_raw = tape.sub(xi2, xi1)?;
    let ih_raw = tape.sub(yi2, yi1)?;
    let iw = tape.relu(iw_raw);
    let ih = tape.relu(ih_raw);
    let inter = tape.mul(iw, ih)?;

    let wa = tape.sub(a[2], a[0])?;
    let ha = tape.sub(a[3], a[1])?;
    let wb = tape.sub(b[2], b[0])?;
    let hb = tape.sub(b[3], b[1])?;
    let area_a = tape.mul(wa, ha)?;
    let area_b = tape.mul(wb, hb)?;
    let areas = tape.add(area_a, area_b)?;
    let union = tape.sub(areas, inter)?;
    let iou = tape.div(inter, union)?;

    let xh1 = tape.min(a[0], b[0])?;
    let yh1 = tape.min(a[1], b[1])?;
    let xh2 = tape.max(a[2], b[2])?;
    let yh2 = tape.max(a[3], b[3])?;
    let hull_w = tape.sub(xh2, xh1)?;
    let hull_h = tape.sub(yh2, yh1)?;
    let hull = tape.mul(hull_w, hull_h)?;
    let excess = tape.sub(hull, union)?;
    let penalty = tape.div(excess, hull)?;
    let giou = tape.sub(iou, penalty)?;
    Ok(tape.affine(giou, -1.0, 1.0))
}

/// L1 loss between two (cx, cy, w, h) variables.
pub fn l1_loss_t(tape: &mut Tape, box_a: Var, box_b: Var) -> Result<Var> {
    let diff = tape.sub(box_a, box_b)?;
    let ad = tape.abs(diff);
    Ok(tape.mean(ad))
}

/// Loss terms of one sample; `total` carries gradients to all three.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub cls: Var,
    pub iou: Var,
    pub l1: Var,
}

/// Full objective over head maps. Classification is supervised everywhere;
/// regression reads the maps at the ground-truth peak cell.
pub fn total_loss_t(
    tape: &mut Tape,
    maps: &HeadMaps,
    gt: &GtTarget,
    weights: &LossWeights,
) -> Result<LossParts> {
    let cls = focal_loss_t(tape, maps.cls, &gt.cls_target)?;
    let pred_box = box_at_cell_t(tape, maps, gt.peak)?;
    let gt_box = tape.constant(&Tensor::new(vec![4], gt.box_cxcywh.to_vec())?);
    let iou = giou_loss_t(tape, pred_box, gt_box)?;
    let l1 = l1_loss_t(tape, pred_box, gt_box)?;
    let iou_w = tape.affine(iou, weights.lambda_iou, 0.0);
    let l1_w = tape.affine(l1, weights.lambda_l1, 0.0);
    let reg = tape.add(iou_w, l1_w)?;
    let total = tape.add(cls, reg)?;
    Ok(LossParts { total, cls, iou, l1 })
}

/// Value-level objective over plain maps; returns (total, cls, iou, l1).
pub fn total_loss(
    cls_map: &Tensor,
    offset_map: &Tensor,
    size_map: &Tensor,
    gt: &GtTarget,
    weights: &LossWeights,
) -> Result<(f64, f64, f64, f64)> {
    let grid = cls_map.shape()[1];
    let mut tape = Tape::new();
    let maps = HeadMaps {
        cls: tape.constant(cls_map),
        offset: tape.constant(offset_map),
        size: tape.constant(size_map),
        grid,
    };
    let parts = total_loss_t(&mut tape, &maps, gt, weights)?;
    Ok((
        tape.data(parts.total)[0],
        tape.data(parts.cls)[0],
        tape.data(parts.iou)[0],
        tape.data(parts.l1)[0],
    ))
}
