//! Axis-aligned boxes, IoU and class-aware NMS.
//!
//! Coordinates are continuous and unclamped: flips and motion prediction
//! routinely move boxes partly outside the sensor.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// A detection or label box: top-left corner, size, class, timestep and
/// detector scores (objectness and per-class IoU predictions).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: u32,
    pub t_step: usize,
    pub p_obj: f64,
    pub p_iou: Vec<f64>,
}

impl DetBox {
    /// Box with full confidence on its own class; convenient for ground truth.
    pub fn certain(x: f64, y: f64, w: f64, h: f64, class_id: u32, t_step: usize, num_classes: usize) -> Self {
        let mut p_iou = vec![0.0; num_classes];
        if let Some(p) = p_iou.get_mut(class_id as usize) {
            *p = 1.0;
        }
        DetBox { x, y, w, h, class_id, t_step, p_obj: 1.0, p_iou }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn max_iou_score(&self) -> f64 {
        self.p_iou.iter().copied().fold(0.0, f64::max)
    }

    /// Ranking score used by NMS: `p_obj * max(p_iou)`.
    pub fn score(&self) -> BoxScore {
        BoxScore(self.p_obj * self.max_iou_score())
    }

    pub fn is_valid_geometry(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    /// Full validation against a class count.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !self.is_valid_geometry() {
            return Err(invalid(format!("degenerate box {}x{} at ({}, {})", self.w, self.h, self.x, self.y)));
        }
        if (self.class_id as usize) >= num_classes {
            return Err(invalid(format!("class {} out of range for {} classes", self.class_id, num_classes)));
        }
        let in_unit = |p: f64| (0.0..=1.0).contains(&p);
        if !in_unit(self.p_obj) || !self.p_iou.iter().all(|&p| in_unit(p)) {
            return Err(invalid("scores must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        DetBox { x: self.x + dx, y: self.y + dy, ..self.clone() }
    }
}

/// `p_obj * max(p_iou)`, in [0, 1] for valid boxes.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct BoxScore(pub f64);

impl BoxScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Intersection over union. Errors on boxes without positive extent.
pub fn iou(a: &DetBox, b: &DetBox) -> Result<f64> {
    if !a.is_valid_geometry() || !b.is_valid_geometry() {
        return Err(invalid("iou requires boxes with positive width and height"));
    }
    Ok(iou_xywh([a.x, a.y, a.w, a.h], [b.x, b.y, b.w, b.h]))
}

/// IoU on raw `[x, y, w, h]` arrays. Callers guarantee positive sizes.
pub fn iou_xywh(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0]);
    let ih = (a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1]);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub(crate) fn iou_unchecked(a: &DetBox, b: &DetBox) -> f64 {
    iou_xywh([a.x, a.y, a.w, a.h], [b.x, b.y, b.w, b.h])
}

/// Indices of `scores` sorted descending, ties kept in input order.
pub(crate) fn order_by_score_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    order
}

/// Greedy NMS over boxes of a single timestep.
///
/// Boxes are visited by descending [`BoxScore`]; a box is dropped when its
/// IoU with an already kept box exceeds `tau_nms`. With `class_aware` only
/// boxes of the same class suppress each other. The output is ordered by
/// descending score.
pub fn nms(boxes: &[DetBox], tau_nms: f64, class_aware: bool) -> Result<Vec<DetBox>> {
    Ok(nms_indices(boxes, tau_nms, class_aware)?
        .into_iter()
        .map(|i| boxes[i].clone())
        .collect())
}

/// Same as [`nms`] but returns indices into `boxes`.
pub fn nms_indices(boxes: &[DetBox], tau_nms: f64, class_aware: bool) -> Result<Vec<usize>> {
    if !(tau_nms > 0.0 && tau_nms < 1.0) {
        return Err(invalid(format!("nms threshold {tau_nms} outside (0, 1)")));
    }
    if let Some(b) = boxes.iter().find(|b| !b.is_valid_geometry()) {
        return Err(invalid(format!("degenerate box in nms input: {b:?}")));
    }
    if let Some(first) = boxes.first() {
        if boxes.iter().any(|b| b.t_step != first.t_step) {
            return Err(invalid("nms input spans several timesteps"));
        }
    }
    let scores: Vec<f64> = boxes.iter().map(|b| b.score().value()).collect();
    let mut kept: Vec<usize> = Vec::new();
    for i in order_by_score_desc(&scores) {
        let suppressed = kept.iter().any(|&k| {
            (!class_aware || boxes[k].class_id == boxes[i].class_id) && iou_unchecked(&boxes[k], &boxes[i]) > tau_nms
        });
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept)
}
