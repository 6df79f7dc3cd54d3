//! Task-aligned target assignment and the composite detection loss
//! (complete-IoU box term, BCE classification, distribution focal term).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::detector::{decode_cell, softmax, Anchor, RawPredictions};
use crate::error::{Error, Result};
use crate::eval::{iou, GtBox};
use crate::nn::sigmoid;
use crate::tensor::Scalar;

/// Gap kept below the last DFL bin when clamping target distances.
pub const DFL_CLAMP_MARGIN: f64 = 0.01;
/// A cell is a candidate when its center lies at least this far inside a box.
pub const INSIDE_EPS: f64 = 1e-9;
const NORM_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssignConfig {
    pub alpha: f64,
    pub beta: f64,
    pub topk: usize,
}

impl Default for AssignConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 6.0,
            topk: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub box_gain: f64,
    pub cls_gain: f64,
    pub dfl_gain: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            box_gain: 7.5,
            cls_gain: 0.5,
            dfl_gain: 1.5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub box_loss: f64,
    pub cls_loss: f64,
    pub dfl_loss: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.box_loss, self.cls_loss, self.dfl_loss, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Complete IoU of two `xyxy` boxes:
/// `IoU - rho^2 / c^2 - alpha * v`, with `v = 4/pi^2 (atan(w_b/h_b) - atan(w_a/h_a))^2`
/// and `alpha = v / (v - IoU + 1)`. Coincident degenerate boxes give 0.
pub fn ciou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    ciou_with_grad(a, b).0
}

/// [`ciou`] and its gradient with respect to the four coordinates of `a`.
/// The trade-off factor `alpha` is differentiated as well.
pub fn ciou_with_grad(a: &[f64; 4], b: &[f64; 4]) -> (f64, [f64; 4]) {
    let (wa, ha) = (a[2] - a[0], a[3] - a[1]);
    let (wb, hb) = (b[2] - b[0], b[3] - b[1]);

    // enclosing box
    let (ex1, ex2) = (a[0].min(b[0]), a[2].max(b[2]));
    let (ey1, ey2) = (a[1].min(b[1]), a[3].max(b[3]));
    let (cw, ch) = (ex2 - ex1, ey2 - ey1);
    let c2 = cw * cw + ch * ch;
    if c2 <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let dc2 = [
        if a[0] < b[0] { -2.0 * cw } else { 0.0 },
        if a[1] < b[1] { -2.0 * ch } else { 0.0 },
        if a[2] > b[2] { 2.0 * cw } else { 0.0 },
        if a[3] > b[3] { 2.0 * ch } else { 0.0 },
    ];

    // IoU
    let iw = a[2].min(b[2]) - a[0].max(b[0]);
    let ih = a[3].min(b[3]) - a[1].max(b[1]);
    let (iw, ih, overlap) = if iw > 0.0 && ih > 0.0 { (iw, ih, true) } else { (0.0, 0.0, false) };
    let inter = iw * ih;
    let union = wa * ha + wb * hb - inter;
    let mut iou_v = 0.0;
    let mut diou = [0.0; 4];
    if union > 0.0 {
        iou_v = inter / union;
        let dinter = if overlap {
            [
                if a[0] > b[0] { -ih } else { 0.0 },
                if a[1] > b[1] { -iw } else { 0.0 },
                if a[2] < b[2] { ih } else { 0.0 },
                if a[3] < b[3] { iw } else { 0.0 },
            ]
        } else {
            [0.0; 4]
        };
        let darea = [-ha, -wa, ha, wa];
        for k in 0..4 {
            let du = darea[k] - dinter[k];
            diou[k] = (dinter[k] * union - inter * du) / (union * union);
        }
    }

    // center distance
    let dx = (a[0] + a[2] - b[0] - b[2]) / 2.0;
    let dy = (a[1] + a[3] - b[1] - b[3]) / 2.0;
    let rho2 = dx * dx + dy * dy;
    let drho2 = [dx, dy, dx, dy];
    let dist = rho2 / c2;
    let ddist: Vec<f64> = (0..4).map(|k| (drho2[k] * c2 - rho2 * dc2[k]) / (c2 * c2)).collect();

    // aspect consistency
    let k4 = 4.0 / (PI * PI);
    let (ta, tb) = (wa.atan2(ha), wb.atan2(hb));
    let v = k4 * (tb - ta).powi(2);
    let mut aspect = 0.0;
    let mut daspect = [0.0; 4];
    if v > 0.0 {
        let r2 = wa * wa + ha * ha;
        // d(ta)/d(wa) = ha / r2, d(ta)/d(ha) = -wa / r2
        let dta = [-ha / r2, wa / r2, ha / r2, -wa / r2];
        let den = v - iou_v + 1.0;
        aspect = v * v / den;
        for k in 0..4 {
            let dv = -2.0 * k4 * (tb - ta) * dta[k];
            daspect[k] = (2.0 * v * dv * den - v * v * (dv - diou[k])) / (den * den);
        }
    }

    let value = iou_v - dist - aspect;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        grad[k] = diou[k] - ddist[k] - daspect[k];
    }
    (value, grad)
}

/// Targets for every (image, cell) pair, flattened as `n * num_anchors + a`
/// with anchors in [`RawPredictions::anchors`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub batch: usize,
    pub anchors: Vec<Anchor>,
    /// Grid `(h, w)` of each scale.
    pub grids: Vec<(usize, usize)>,
    /// Index into the image's ground-truth list, `None` for negatives.
    pub gt_index: Vec<Option<usize>>,
    /// Soft classification target on the matched class.
    pub target_score: Vec<f64>,
    pub target_class: Vec<usize>,
    pub target_box: Vec<[f64; 4]>,
    /// l, t, r, b distances in stride units, clamped to `[0, reg_max - 1.01]`.
    pub target_dist: Vec<[f64; 4]>,
}

impl Assignment {
    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn num_positives(&self) -> usize {
        self.gt_index.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_positive(&self, n: usize, a: usize) -> bool {
        self.gt_index[n * self.num_anchors() + a].is_some()
    }

    /// `(N, H, W)` positive mask of one scale, row-major.
    pub fn positive_mask(&self, scale: usize) -> Vec<bool> {
        let na = self.num_anchors();
        let mut out = Vec::new();
        for n in 0..self.batch {
            for (a, anc) in self.anchors.iter().enumerate() {
                if anc.scale == scale {
                    out.push(self.gt_index[n * na + a].is_some());
                }
            }
        }
        out
    }

    pub fn target_score_sum(&self) -> f64 {
        self.target_score.iter().sum()
    }
}

fn inside(a: &Anchor, b: &[f64; 4]) -> bool {
    let m = (a.cx - b[0]).min(a.cy - b[1]).min(b[2] - a.cx).min(b[3] - a.cy);
    m > INSIDE_EPS
}

fn check_inputs<T: Scalar>(raw: &RawPredictions<T>, gts: &[Vec<GtBox>]) -> Result<()> {
    if gts.len() != raw.batch() {
        return Err(Error::Invalid(format!(
            "{} ground-truth lists for a batch of {}",
            gts.len(),
            raw.batch()
        )));
    }
    if let Some(g) = gts.iter().flatten().find(|g| g.class_id >= raw.num_classes) {
        return Err(Error::Invalid(format!(
            "ground-truth class {} out of range (num_classes = {})",
            g.class_id, raw.num_classes
        )));
    }
    if !raw.all_finite() {
        return Err(Error::NonFinite("raw predictions".into()));
    }
    Ok(())
}

/// Task-aligned assignment. For each ground truth, the cells whose centers
/// lie strictly inside it are ranked by `p^alpha * IoU^beta` (`p` the sigmoid
/// of the box's class logit, IoU of the decoded box; ties by cell index) and
/// the best `topk` are claimed. A cell claimed by several boxes keeps the one
/// its decoded box overlaps most (ties: lower box index).
pub fn assign_targets<T: Scalar>(raw: &RawPredictions<T>, gts: &[Vec<GtBox>], cfg: &AssignConfig) -> Result<Assignment> {
    check_inputs(raw, gts)?;
    let anchors = raw.anchors();
    let na = anchors.len();
    let total = raw.batch() * na;
    let reg_hi = raw.reg_max as f64 - 1.0 - DFL_CLAMP_MARGIN;
    let mut out = Assignment {
        batch: raw.batch(),
        grids: raw.scales.iter().map(|s| (s.cls.h(), s.cls.w())).collect(),
        anchors,
        gt_index: vec![None; total],
        target_score: vec![0.0; total],
        target_class: vec![0; total],
        target_box: vec![[0.0; 4]; total],
        target_dist: vec![[0.0; 4]; total],
    };

    for (n, boxes) in gts.iter().enumerate() {
        if boxes.is_empty() {
            continue;
        }
        let decoded: Vec<[f64; 4]> = out.anchors.iter().map(|a| decode_cell(raw, n, a)).collect();
        // best claim per cell: (gt, iou, align)
        let mut claim: Vec<Option<(usize, f64, f64)>> = vec![None; na];
        for (g, gt) in boxes.iter().enumerate() {
            let mut cands: Vec<(usize, f64, f64)> = out
                .anchors
                .iter()
                .enumerate()
                .filter(|(_, a)| inside(a, &gt.bbox))
                .map(|(i, a)| {
                    let p = sigmoid(raw.cls_logit(n, a, gt.class_id));
                    let ov = iou(&decoded[i], &gt.bbox);
                    (i, ov, p.powf(cfg.alpha) * ov.powf(cfg.beta))
                })
                .collect();
            cands.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)));
            for &(i, ov, al) in cands.iter().take(cfg.topk) {
                match claim[i] {
                    Some((_, prev, _)) if prev >= ov => {}
                    _ => claim[i] = Some((g, ov, al)),
                }
            }
        }
        let mut max_align = vec![0.0f64; boxes.len()];
        let mut max_iou = vec![0.0f64; boxes.len()];
        for &(g, ov, al) in claim.iter().flatten() {
            max_align[g] = max_align[g].max(al);
            max_iou[g] = max_iou[g].max(ov);
        }
        for (i, c) in claim.iter().enumerate() {
            let Some((g, _, al)) = *c else { continue };
            let a = &out.anchors[i];
            let b = boxes[g].bbox;
            let k = n * na + i;
            out.gt_index[k] = Some(g);
            out.target_class[k] = boxes[g].class_id;
            out.target_score[k] = al * max_iou[g] / (max_align[g] + NORM_EPS);
            out.target_box[k] = b;
            let d = [a.cx - b[0], a.cy - b[1], b[2] - a.cx, b[3] - a.cy];
            out.target_dist[k] = d.map(|v| (v / a.stride).clamp(0.0, reg_hi));
        }
    }
    Ok(out)
}

fn bce_with_logits(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

/// Two-bin interpolated negative log-likelihood of `target` under
/// `softmax(logits)`, and its gradient with respect to the logits.
pub fn dfl_side(logits: &[f64], target: f64) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let lo = (target.floor() as usize).min(logits.len() - 2);
    let hi = lo + 1;
    let wl = hi as f64 - target;
    let wr = 1.0 - wl;
    let loss = -(wl * p[lo].ln() + wr * p[hi].ln());
    let mut g = p;
    g[lo] -= wl;
    g[hi] -= wr;
    (loss, g)
}

/// Loss of `raw` against `assign`. Box and DFL terms are means over positive
/// cells; the classification term is the summed BCE over every cell and
/// class divided by `max(sum of target scores, 1)`.
pub fn detection_loss<T: Scalar>(raw: &RawPredictions<T>, assign: &Assignment, cfg: &LossConfig) -> Result<LossBreakdown> {
    loss_impl(raw, assign, cfg, None)
}

/// [`detection_loss`] together with the gradient of `total` with respect to
/// every raw logit.
pub fn detection_loss_with_grad<T: Scalar>(
    raw: &RawPredictions<T>,
    assign: &Assignment,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, RawPredictions<T>)> {
    let mut grad = raw.zeros_like();
    let l = loss_impl(raw, assign, cfg, Some(&mut grad))?;
    Ok((l, grad))
}

fn loss_impl<T: Scalar>(
    raw: &RawPredictions<T>,
    assign: &Assignment,
    cfg: &LossConfig,
    mut grad: Option<&mut RawPredictions<T>>,
) -> Result<LossBreakdown> {
    if !raw.all_finite() {
        return Err(Error::NonFinite("raw predictions".into()));
    }
    let na = assign.num_anchors();
    if assign.batch != raw.batch() || na != raw.anchors().len() {
        return Err(Error::Shape("assignment does not match the raw predictions".into()));
    }
    let num_pos = assign.num_positives();
    let pos_scale = if num_pos > 0 { 1.0 / num_pos as f64 } else { 0.0 };
    let cls_norm = assign.target_score_sum().max(1.0);

    let (mut box_sum, mut dfl_sum, mut cls_sum) = (0.0, 0.0, 0.0);
    for n in 0..assign.batch {
        for (ai, a) in assign.anchors.iter().enumerate() {
            let k = n * na + ai;
            let pos = assign.gt_index[k].is_some();
            for c in 0..raw.num_classes {
                let z = raw.cls_logit(n, a, c);
                let t = if pos && assign.target_class[k] == c {
                    assign.target_score[k]
                } else {
                    0.0
                };
                cls_sum += bce_with_logits(z, t);
                if let Some(g) = grad.as_deref_mut() {
                    g.add_cls_grad(n, a, c, cfg.cls_gain * (sigmoid(z) - t) / cls_norm);
                }
            }
            if !pos {
                continue;
            }
            let pred = decode_cell(raw, n, a);
            let (ci, dci) = ciou_with_grad(&pred, &assign.target_box[k]);
            box_sum += 1.0 - ci;
            for side in 0..4 {
                let logits = raw.side_logits(n, a, side);
                let (l, gl) = dfl_side(&logits, assign.target_dist[k][side]);
                dfl_sum += l / 4.0;
                if let Some(g) = grad.as_deref_mut() {
                    // d(box coord)/d(side distance in px) is -1 for l,t and +1 for r,b
                    let sign = if side < 2 { -1.0 } else { 1.0 };
                    let d_dist = -cfg.box_gain * pos_scale * dci[side] * sign * a.stride;
                    let p = softmax(&logits);
                    let e: f64 = p.iter().enumerate().map(|(j, pj)| j as f64 * pj).sum();
                    let side_grad: Vec<f64> = (0..p.len())
                        .map(|j| d_dist * p[j] * (j as f64 - e) + cfg.dfl_gain * pos_scale * gl[j] / 4.0)
                        .collect();
                    g.add_side_grad(n, a, side, &side_grad);
                }
            }
        }
    }
    let box_loss = box_sum * pos_scale;
    let dfl_loss = dfl_sum * pos_scale;
    let cls_loss = cls_sum / cls_norm;
    let out = LossBreakdown {
        box_loss,
        cls_loss,
        dfl_loss,
        total: cfg.box_gain * box_loss + cfg.cls_gain * cls_loss + cfg.dfl_gain * dfl_loss,
    };
    if !out.is_finite() {
        return Err(Error::NonFinite("detection loss".into()));
    }
    Ok(out)
}

/// Assigns and evaluates the loss in one call.
pub fn compute_loss<T: Scalar>(
    raw: &RawPredictions<T>,
    gts: &[Vec<GtBox>],
    assign_cfg: &AssignConfig,
    loss_cfg: &LossConfig,
) -> Result<(LossBreakdown, RawPredictions<T>)> {
    let a = assign_targets(raw, gts, assign_cfg)?;
    detection_loss_with_grad(raw, &a, loss_cfg)
}
