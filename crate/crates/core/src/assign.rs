//! Anchor-point grids, positive/ignore anchor assignment and the masked
//! detection loss with its analytic gradient.
//!
//! Anchors matched to IGNORE boxes get `r = 1` and drop out of every loss
//! term, so the model is pushed neither toward nor away from them.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{iou_xywh, DetBox};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridLevel {
    pub stride: f64,
    pub grid_h: usize,
    pub grid_w: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub stride: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Multi-level anchor points, enumerated level by level in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorGrid {
    pub levels: Vec<GridLevel>,
}

impl AnchorGrid {
    pub fn new(levels: Vec<GridLevel>) -> Result<Self> {
        if levels.is_empty() || levels.iter().any(|l| l.grid_h == 0 || l.grid_w == 0 || l.stride.is_nan() || l.stride <= 0.0) {
            return Err(invalid("anchor grid needs at least one non-empty level"));
        }
        if levels.windows(2).any(|w| w[1].stride <= w[0].stride) {
            return Err(invalid("anchor grid strides must strictly increase"));
        }
        Ok(AnchorGrid { levels })
    }

    /// Levels covering a `height x width` image, `ceil(size / stride)` cells each.
    pub fn for_image(strides: &[u32], height: usize, width: usize) -> Result<Self> {
        let levels = strides
            .iter()
            .map(|&s| GridLevel {
                stride: s as f64,
                grid_h: height.div_ceil(s.max(1) as usize),
                grid_w: width.div_ceil(s.max(1) as usize),
            })
            .collect();
        AnchorGrid::new(levels)
    }

    pub fn len(&self) -> usize {
        self.levels.iter().map(|l| l.grid_h * l.grid_w).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn anchors(&self) -> Vec<Anchor> {
        let mut out = Vec::with_capacity(self.len());
        for (level, l) in self.levels.iter().enumerate() {
            for row in 0..l.grid_h {
                for col in 0..l.grid_w {
                    out.push(Anchor {
                        level,
                        row,
                        col,
                        stride: l.stride,
                        cx: (col as f64 + 0.5) * l.stride,
                        cy: (row as f64 + 0.5) * l.stride,
                    });
                }
            }
        }
        out
    }
}

/// Per-anchor head outputs. `p_iou` is row-major `(anchors, classes)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorPrediction {
    pub num_classes: usize,
    pub p_obj: Vec<f64>,
    pub p_iou: Vec<f64>,
    /// `(dx, dy, dw, dh)` per anchor.
    pub delta: Vec<[f64; 4]>,
}

impl AnchorPrediction {
    /// Constant scores and zero offsets.
    pub fn uniform(num_anchors: usize, num_classes: usize, p: f64) -> Self {
        AnchorPrediction {
            num_classes,
            p_obj: vec![p; num_anchors],
            p_iou: vec![p; num_anchors * num_classes],
            delta: vec![[0.0; 4]; num_anchors],
        }
    }

    pub fn len(&self) -> usize {
        self.p_obj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_obj.is_empty()
    }

    fn check(&self, grid: &AnchorGrid) -> Result<()> {
        let n = grid.len();
        if self.p_obj.len() != n || self.delta.len() != n || self.p_iou.len() != n * self.num_classes {
            return Err(invalid(format!(
                "prediction shape ({} obj, {} iou, {} delta) does not fit {n} anchors x {} classes",
                self.p_obj.len(),
                self.p_iou.len(),
                self.delta.len(),
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Decode offsets at an anchor into `[x, y, w, h]`: center moves by
/// `(dx, dy) * stride`, size is `exp(dw, dh) * stride`.
pub fn decode(anchor: &Anchor, delta: [f64; 4]) -> [f64; 4] {
    let cx = anchor.cx + delta[0] * anchor.stride;
    let cy = anchor.cy + delta[1] * anchor.stride;
    let w = delta[2].exp() * anchor.stride;
    let h = delta[3].exp() * anchor.stride;
    [cx - 0.5 * w, cy - 0.5 * h, w, h]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignStrategy {
    /// Dynamic k from prediction IoUs when predictions are given.
    DynamicK,
    /// Always the `top_k` candidates nearest the box center.
    Center,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssignParams {
    pub strategy: AssignStrategy,
    /// Center-prior radius in strides.
    pub center_radius: f64,
    pub top_k: usize,
}

impl Default for AssignParams {
    fn default() -> Self {
        AssignParams { strategy: AssignStrategy::DynamicK, center_radius: 2.5, top_k: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Keep,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorTarget {
    pub kind: TargetKind,
    /// Index into the KEEP or IGNORE box list, per `kind`.
    pub box_index: usize,
    pub class_id: u32,
    pub bbox: [f64; 4],
}

/// `o[i]`: anchor is a positive. `r[i]`: anchor is masked out of the loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorAssignment {
    pub o: Vec<bool>,
    pub r: Vec<bool>,
    pub matched: Vec<Option<AnchorTarget>>,
}

impl AnchorAssignment {
    pub fn background(n: usize) -> Self {
        AnchorAssignment { o: vec![false; n], r: vec![false; n], matched: vec![None; n] }
    }

    pub fn len(&self) -> usize {
        self.o.len()
    }

    pub fn is_empty(&self) -> bool {
        self.o.is_empty()
    }

    pub fn num_positive(&self) -> usize {
        self.o.iter().filter(|&&o| o).count()
    }

    pub fn num_ignored(&self) -> usize {
        self.r.iter().filter(|&&r| r).count()
    }
}

fn xywh(b: &DetBox) -> [f64; 4] {
    [b.x, b.y, b.w, b.h]
}

fn candidates(anchors: &[Anchor], b: &DetBox, radius: f64) -> Vec<usize> {
    let (bcx, bcy) = b.center();
    anchors
        .iter()
        .enumerate()
        .filter(|(_, a)| {
            let inside = a.cx > b.x && a.cx < b.x + b.w && a.cy > b.y && a.cy < b.y + b.h;
            let near = (a.cx - bcx).hypot(a.cy - bcy) < radius * a.stride;
            inside || near
        })
        .map(|(i, _)| i)
        .collect()
}

fn center_distance(a: &Anchor, b: &DetBox) -> f64 {
    let (bcx, bcy) = b.center();
    (a.cx - bcx).hypot(a.cy - bcy)
}

/// Assign anchors to KEEP boxes (positives) and IGNORE boxes (masked).
///
/// Candidates of a box are anchors whose center lies inside it or within
/// `center_radius` strides of its center. Each KEEP box takes `k` of its
/// candidates: with predictions, `k = clamp(round(sum of top-10 IoUs), 1,
/// #candidates)` chosen by IoU; without, the `top_k` nearest. An anchor
/// claimed twice goes to the box it overlaps best (smaller box on a tie).
/// Remaining candidates of IGNORE boxes get `r = 1`.
pub fn assign(
    grid: &AnchorGrid,
    keep_boxes: &[DetBox],
    ignore_boxes: &[DetBox],
    predictions: Option<&AnchorPrediction>,
    params: &AssignParams,
) -> Result<AnchorAssignment> {
    if grid.is_empty() {
        return Err(invalid("empty anchor grid"));
    }
    if let Some(p) = predictions {
        p.check(grid)?;
    }
    if let Some(b) = keep_boxes.iter().chain(ignore_boxes).find(|b| !b.is_valid_geometry()) {
        return Err(invalid(format!("degenerate box in assignment: {b:?}")));
    }
    let anchors = grid.anchors();
    let n = anchors.len();
    let use_preds = match (params.strategy, predictions) {
        (AssignStrategy::DynamicK, Some(p)) => Some(p),
        _ => None,
    };
    let quality = |i: usize, b: &DetBox| -> f64 {
        let delta = use_preds.map_or([0.0; 4], |p| p.delta[i]);
        iou_xywh(decode(&anchors[i], delta), xywh(b))
    };

    // (quality, box area, box index) of the current claim per anchor.
    let mut claim: Vec<Option<(f64, f64, usize)>> = vec![None; n];
    for (j, b) in keep_boxes.iter().enumerate() {
        let cands = candidates(&anchors, b, params.center_radius);
        if cands.is_empty() {
            continue;
        }
        let selected: Vec<usize> = if use_preds.is_some() {
            let mut scored: Vec<(usize, f64)> = cands.iter().map(|&i| (i, quality(i, b))).collect();
            scored.sort_by(|x, y| {
                y.1.total_cmp(&x.1)
                    .then(center_distance(&anchors[x.0], b).total_cmp(&center_distance(&anchors[y.0], b)))
                    .then(x.0.cmp(&y.0))
            });
            let top_sum: f64 = scored.iter().take(10).map(|s| s.1).sum();
            let k = (top_sum.round() as usize).clamp(1, scored.len());
            scored.into_iter().take(k).map(|s| s.0).collect()
        } else {
            let mut by_dist = cands;
            by_dist.sort_by(|&x, &y| center_distance(&anchors[x], b).total_cmp(&center_distance(&anchors[y], b)).then(x.cmp(&y)));
            by_dist.truncate(params.top_k.max(1));
            by_dist
        };
        for i in selected {
            let mine = (quality(i, b), b.area(), j);
            let better = match claim[i] {
                None => true,
                Some((q, area, _)) => mine.0 > q || (mine.0 == q && mine.1 < area),
            };
            if better {
                claim[i] = Some(mine);
            }
        }
    }

    let mut out = AnchorAssignment::background(n);
    for (i, c) in claim.iter().enumerate() {
        if let Some((_, _, j)) = *c {
            let b = &keep_boxes[j];
            out.o[i] = true;
            out.matched[i] = Some(AnchorTarget { kind: TargetKind::Keep, box_index: j, class_id: b.class_id, bbox: xywh(b) });
        }
    }

    for (j, b) in ignore_boxes.iter().enumerate() {
        for i in candidates(&anchors, b, params.center_radius) {
            if out.o[i] {
                continue;
            }
            let replace = match out.matched[i] {
                None => true,
                Some(prev) => b.area() < prev.bbox[2] * prev.bbox[3],
            };
            out.r[i] = true;
            if replace {
                out.matched[i] = Some(AnchorTarget { kind: TargetKind::Ignore, box_index: j, class_id: b.class_id, bbox: xywh(b) });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub obj: f64,
    pub cls: f64,
    pub bbox: f64,
}

/// Gradient of the total loss, shaped like [`AnchorPrediction`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossGradient {
    pub p_obj: Vec<f64>,
    pub p_iou: Vec<f64>,
    pub delta: Vec<[f64; 4]>,
}

impl LossGradient {
    /// Concatenation `p_obj ++ p_iou ++ delta`, the order used by
    /// [`AnchorPrediction`] perturbation helpers.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.p_obj.clone();
        v.extend_from_slice(&self.p_iou);
        v.extend(self.delta.iter().flatten());
        v
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn bce(p: f64, target: f64) -> f64 {
    let p = clamp_prob(p);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// d bce / d p; zero where the clamp is active.
fn bce_dp(p: f64, target: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    (p - target) / (p * (1.0 - p))
}

/// d bce / d target.
fn bce_dtarget(p: f64) -> f64 {
    let p = clamp_prob(p);
    (1.0 - p).ln() - p.ln()
}

/// IoU of `pred` against `target` (both `[x, y, w, h]`) and its gradient
/// with respect to `pred`'s `(cx, cy, w, h)`.
fn iou_with_grad(pred: [f64; 4], target: [f64; 4]) -> (f64, [f64; 4]) {
    let (px1, py1, px2, py2) = (pred[0], pred[1], pred[0] + pred[2], pred[1] + pred[3]);
    let (tx1, ty1, tx2, ty2) = (target[0], target[1], target[0] + target[2], target[1] + target[3]);
    let iw = px2.min(tx2) - px1.max(tx1);
    let ih = py2.min(ty2) - py1.max(ty1);
    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let area = pred[2] * pred[3];
    let union = area + target[2] * target[3] - inter;
    let iou = inter / union;

    // Partials of the intersection and the predicted area w.r.t. x1, x2, y1, y2.
    let diw_dx1 = if px1 > tx1 { -1.0 } else { 0.0 };
    let diw_dx2 = if px2 < tx2 { 1.0 } else { 0.0 };
    let dih_dy1 = if py1 > ty1 { -1.0 } else { 0.0 };
    let dih_dy2 = if py2 < ty2 { 1.0 } else { 0.0 };
    let d_inter = [diw_dx1 * ih, diw_dx2 * ih, dih_dy1 * iw, dih_dy2 * iw];
    let d_area = [-pred[3], pred[3], -pred[2], pred[2]];
    let mut d = [0.0; 4];
    for k in 0..4 {
        d[k] = (d_inter[k] * (union + inter) - inter * d_area[k]) / (union * union);
    }
    let [dx1, dx2, dy1, dy2] = d;
    (iou, [dx1 + dx2, dy1 + dy2, 0.5 * (dx2 - dx1), 0.5 * (dy2 - dy1)])
}

struct Evaluated {
    loss: LossBreakdown,
    grad: LossGradient,
}

fn evaluate(grid: &AnchorGrid, pred: &AnchorPrediction, assignment: &AnchorAssignment) -> Result<Evaluated> {
    pred.check(grid)?;
    let n = grid.len();
    if assignment.len() != n || assignment.r.len() != n || assignment.matched.len() != n {
        return Err(invalid(format!("assignment covers {} anchors, grid has {n}", assignment.len())));
    }
    let c = pred.num_classes;
    let anchors = grid.anchors();
    let mut grad = LossGradient { p_obj: vec![0.0; n], p_iou: vec![0.0; n * c], delta: vec![[0.0; 4]; n] };

    let obj_idx: Vec<usize> = (0..n).filter(|&i| !assignment.r[i]).collect();
    let pos_idx: Vec<usize> = (0..n).filter(|&i| assignment.o[i] && !assignment.r[i]).collect();

    let mut obj = 0.0;
    if !obj_idx.is_empty() {
        let scale = 1.0 / obj_idx.len() as f64;
        for &i in &obj_idx {
            let target = if assignment.o[i] { 1.0 } else { 0.0 };
            obj += bce(pred.p_obj[i], target);
            grad.p_obj[i] = bce_dp(pred.p_obj[i], target) * scale;
        }
        obj *= scale;
    }

    let (mut cls, mut bbox) = (0.0, 0.0);
    if !pos_idx.is_empty() {
        let scale = 1.0 / pos_idx.len() as f64;
        for &i in &pos_idx {
            let target = assignment.matched[i].ok_or_else(|| invalid(format!("positive anchor {i} has no matched box")))?;
            let cls_id = target.class_id as usize;
            if cls_id >= c {
                return Err(invalid(format!("matched class {cls_id} beyond {c} classes")));
            }
            let decoded = decode(&anchors[i], pred.delta[i]);
            let (iou, d_iou) = iou_with_grad(decoded, target.bbox);
            let mut d_iou_total = -scale;
            for k in 0..c {
                let p = pred.p_iou[i * c + k];
                let y = if k == cls_id { iou } else { 0.0 };
                cls += bce(p, y);
                grad.p_iou[i * c + k] = bce_dp(p, y) * scale;
                if k == cls_id {
                    d_iou_total += bce_dtarget(p) * scale;
                }
            }
            bbox += 1.0 - iou;
            let stride = anchors[i].stride;
            grad.delta[i] = [
                d_iou_total * d_iou[0] * stride,
                d_iou_total * d_iou[1] * stride,
                d_iou_total * d_iou[2] * decoded[2],
                d_iou_total * d_iou[3] * decoded[3],
            ];
        }
        cls *= scale;
        bbox *= scale;
    }
    Ok(Evaluated { loss: LossBreakdown { total: obj + cls + bbox, obj, cls, bbox }, grad })
}

/// Masked loss: BCE objectness over anchors with `r = 0`, per-class BCE
/// with an IoU-valued target and `1 - IoU` box loss over positives. Each
/// term is a mean over its participating anchors.
pub fn detection_loss(grid: &AnchorGrid, pred: &AnchorPrediction, assignment: &AnchorAssignment) -> Result<LossBreakdown> {
    evaluate(grid, pred, assignment).map(|e| e.loss)
}

/// Analytic gradient of [`detection_loss`]'s total. Masked anchors get
/// exactly zero in every component.
pub fn loss_gradient(grid: &AnchorGrid, pred: &AnchorPrediction, assignment: &AnchorAssignment) -> Result<LossGradient> {
    evaluate(grid, pred, assignment).map(|e| e.grad)
}

/// Loss and gradient in one pass.
pub fn loss_and_gradient(grid: &AnchorGrid, pred: &AnchorPrediction, assignment: &AnchorAssignment) -> Result<(LossBreakdown, LossGradient)> {
    evaluate(grid, pred, assignment).map(|e| (e.loss, e.grad))
}
