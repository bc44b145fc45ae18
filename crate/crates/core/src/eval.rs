//! Pseudo-label precision/recall, COCO-style mAP and the round-stopping rule.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{iou_unchecked, DetBox};
use crate::pipeline::{LabelSource, PseudoLabelSet};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchResult {
    /// `(pred index, gt index)` in acceptance order.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

/// Greedy one-to-one matching of same-class pairs with IoU strictly above
/// `tau_match`, highest IoU first (ties: lower pred index, then gt index).
pub fn match_boxes(pred: &[DetBox], gt: &[DetBox], tau_match: f64) -> MatchResult {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, p) in pred.iter().enumerate() {
        for (gi, g) in gt.iter().enumerate() {
            if p.class_id == g.class_id {
                let v = iou_unchecked(p, g);
                if v > tau_match {
                    pairs.push((v, pi, gi));
                }
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut out = MatchResult::default();
    for (_, pi, gi) in pairs {
        if !pred_used[pi] && !gt_used[gi] {
            pred_used[pi] = true;
            gt_used[gi] = true;
            out.pairs.push((pi, gi));
        }
    }
    out.unmatched_pred = (0..pred.len()).filter(|&i| !pred_used[i]).collect();
    out.unmatched_gt = (0..gt.len()).filter(|&i| !gt_used[i]).collect();
    out
}

/// TP/FP/FN counters; merging is associative and commutative.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn merge(self, other: Counts) -> Counts {
        Counts { tp: self.tp + other.tp, fp: self.fp + other.fp, fn_: self.fn_ + other.fn_ }
    }

    /// 0/0 is defined as 1.
    pub fn precision(&self) -> f64 {
        ratio_or_one(self.tp, self.tp + self.fp)
    }

    /// 0/0 is defined as 1.
    pub fn recall(&self) -> f64 {
        ratio_or_one(self.tp, self.tp + self.fn_)
    }
}

fn ratio_or_one(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrCurvePoint {
    /// Minimum box score admitted.
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub class_id: u32,
}

/// Which annotated timesteps take part in pseudo-label evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameMode {
    /// Annotated timesteps whose labels were withheld from training.
    SkippedFrames,
    /// Annotated timesteps whose labels were used.
    LabeledFrames,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrReport {
    pub per_class: BTreeMap<u32, PrCurvePoint>,
    pub counts: BTreeMap<u32, Counts>,
    pub overall: Counts,
    pub frames: usize,
}

impl PrReport {
    pub fn precision(&self) -> f64 {
        self.overall.precision()
    }

    pub fn recall(&self) -> f64 {
        self.overall.recall()
    }
}

fn participating(gt: &BTreeMap<usize, Vec<DetBox>>, labeled: &BTreeSet<usize>, mode: FrameMode, num_steps: usize) -> Vec<usize> {
    gt.keys()
        .copied()
        .filter(|t| *t < num_steps)
        .filter(|t| match mode {
            FrameMode::SkippedFrames => !labeled.contains(t),
            FrameMode::LabeledFrames => labeled.contains(t),
        })
        .collect()
}

/// Count KEEP labels (score at least `min_score`) against annotations.
fn pr_counts(
    pseudo: &PseudoLabelSet,
    gt: &BTreeMap<usize, Vec<DetBox>>,
    frames: &[usize],
    tau_match: f64,
    min_score: f64,
) -> BTreeMap<u32, Counts> {
    let mut counts: BTreeMap<u32, Counts> = BTreeMap::new();
    for &t in frames {
        let preds: Vec<DetBox> = pseudo.labels[t]
            .iter()
            .filter(|l| l.is_keep() && l.source != LabelSource::Gt && l.bbox.score().value() >= min_score)
            .map(|l| l.bbox.clone())
            .collect();
        let gts = &gt[&t];
        let m = match_boxes(&preds, gts, tau_match);
        for &(pi, _) in &m.pairs {
            counts.entry(preds[pi].class_id).or_default().tp += 1;
        }
        for &pi in &m.unmatched_pred {
            counts.entry(preds[pi].class_id).or_default().fp += 1;
        }
        for &gi in &m.unmatched_gt {
            counts.entry(gts[gi].class_id).or_default().fn_ += 1;
        }
    }
    counts
}

/// Precision and recall of KEEP labels against the annotations of the
/// participating timesteps. IGNORE labels and spliced-in ground truth are
/// not scored.
pub fn pseudo_label_pr(
    pseudo: &PseudoLabelSet,
    gt: &BTreeMap<usize, Vec<DetBox>>,
    labeled: &BTreeSet<usize>,
    mode: FrameMode,
    tau_match: f64,
) -> Result<PrReport> {
    let frames = participating(gt, labeled, mode, pseudo.num_steps());
    if frames.is_empty() {
        return Err(Error::EmptyResult(format!("no annotated timesteps for {mode:?}")));
    }
    let counts = pr_counts(pseudo, gt, &frames, tau_match, f64::NEG_INFINITY);
    let per_class = counts
        .iter()
        .map(|(&c, k)| (c, PrCurvePoint { threshold: 0.0, precision: k.precision(), recall: k.recall(), class_id: c }))
        .collect();
    let overall = counts.values().fold(Counts::default(), |a, &b| a.merge(b));
    Ok(PrReport { per_class, counts, overall, frames: frames.len() })
}

/// Per-class precision/recall as the minimum KEEP score sweeps `thresholds`.
pub fn pr_curve(
    pseudo: &PseudoLabelSet,
    gt: &BTreeMap<usize, Vec<DetBox>>,
    labeled: &BTreeSet<usize>,
    mode: FrameMode,
    tau_match: f64,
    thresholds: &[f64],
) -> Result<Vec<PrCurvePoint>> {
    let frames = participating(gt, labeled, mode, pseudo.num_steps());
    if frames.is_empty() {
        return Err(Error::EmptyResult(format!("no annotated timesteps for {mode:?}")));
    }
    let mut out = Vec::new();
    for &s in thresholds {
        for (c, k) in pr_counts(pseudo, gt, &frames, tau_match, s) {
            out.push(PrCurvePoint { threshold: s, precision: k.precision(), recall: k.recall(), class_id: c });
        }
    }
    Ok(out)
}

/// Ground truth smaller than this is excluded from mAP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalFilter {
    pub min_diagonal: f64,
    pub min_side: f64,
}

impl EvalFilter {
    /// Defaults for 304x240 sensors. Configurable; not tied to any published value.
    pub fn gen1() -> Self {
        EvalFilter { min_diagonal: 30.0, min_side: 10.0 }
    }

    /// Defaults for 1280x720 sensors.
    pub fn mpx() -> Self {
        EvalFilter { min_diagonal: 60.0, min_side: 20.0 }
    }

    pub fn none() -> Self {
        EvalFilter { min_diagonal: 0.0, min_side: 0.0 }
    }

    pub fn rejects(&self, b: &DetBox) -> bool {
        b.w.hypot(b.h) < self.min_diagonal || b.w.min(b.h) < self.min_side
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouSet {
    /// 0.50:0.05:0.95
    Coco,
    Single(f64),
}

impl IouSet {
    pub fn thresholds(&self) -> Vec<f64> {
        match *self {
            IouSet::Coco => (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            IouSet::Single(t) => vec![t],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub per_class: BTreeMap<u32, f64>,
    pub map: f64,
}

struct Scored<'a> {
    score: f64,
    frame: usize,
    bbox: &'a DetBox,
}

/// Outcome of one prediction at one IoU threshold.
#[derive(Clone, Copy, PartialEq)]
enum Outcome {
    Tp,
    Fp,
    Ignored,
}

/// AP of one class at one IoU threshold; `None` without countable ground truth.
fn average_precision(preds: &[Scored], gt: &[Vec<(&DetBox, bool)>], iou_thr: f64) -> Option<f64> {
    let npos = gt.iter().flatten().filter(|(_, ignored)| !ignored).count();
    if npos == 0 {
        return None;
    }
    let mut taken: Vec<Vec<bool>> = gt.iter().map(|f| vec![false; f.len()]).collect();
    let mut outcomes = Vec::with_capacity(preds.len());
    for p in preds {
        let frame = &gt[p.frame];
        let mut best: Option<(usize, f64)> = None;
        for pass_ignored in [false, true] {
            for (gi, (g, ignored)) in frame.iter().enumerate() {
                if *ignored != pass_ignored || taken[p.frame][gi] {
                    continue;
                }
                let v = iou_unchecked(p.bbox, g);
                if v >= iou_thr && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            if best.is_some() {
                break;
            }
        }
        outcomes.push(match best {
            Some((gi, _)) => {
                taken[p.frame][gi] = true;
                if frame[gi].1 {
                    Outcome::Ignored
                } else {
                    Outcome::Tp
                }
            }
            None => Outcome::Fp,
        });
    }

    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Tp => tp += 1,
            Outcome::Fp => fp += 1,
            Outcome::Ignored => continue,
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let sum: f64 = (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            recall.iter().position(|&rc| rc >= r).map_or(0.0, |i| precision[i])
        })
        .sum();
    Some(sum / 101.0)
}

/// COCO-style mAP: 101-point interpolated AP averaged over the IoU set, then
/// over classes that have countable ground truth. Ground truth rejected by
/// `filter` is ignored, and predictions matched to it count neither way.
pub fn mean_ap(pred_per_frame: &[Vec<DetBox>], gt_per_frame: &[Vec<DetBox>], filter: &EvalFilter, iou_set: IouSet) -> Result<ApReport> {
    if let Some(b) = pred_per_frame.iter().chain(gt_per_frame).flatten().find(|b| !b.is_valid_geometry()) {
        return Err(invalid(format!("degenerate box in evaluation: {b:?}")));
    }
    let frames = pred_per_frame.len().max(gt_per_frame.len());
    let classes: BTreeSet<u32> = gt_per_frame.iter().flatten().filter(|b| !filter.rejects(b)).map(|b| b.class_id).collect();
    if classes.is_empty() {
        return Err(Error::UndefinedMetric("no ground truth to evaluate against".into()));
    }
    let mut per_class = BTreeMap::new();
    for &c in &classes {
        let gt: Vec<Vec<(&DetBox, bool)>> = (0..frames)
            .map(|t| {
                gt_per_frame
                    .get(t)
                    .map(|f| f.iter().filter(|b| b.class_id == c).map(|b| (b, filter.rejects(b))).collect())
                    .unwrap_or_default()
            })
            .collect();
        let mut preds: Vec<Scored> = pred_per_frame
            .iter()
            .enumerate()
            .flat_map(|(t, f)| f.iter().filter(|b| b.class_id == c).map(move |b| Scored { score: b.score().value(), frame: t, bbox: b }))
            .collect();
        preds.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.frame.cmp(&b.frame))
                .then(a.bbox.x.total_cmp(&b.bbox.x))
                .then(a.bbox.y.total_cmp(&b.bbox.y))
                .then(a.bbox.w.total_cmp(&b.bbox.w))
                .then(a.bbox.h.total_cmp(&b.bbox.h))
        });
        let thresholds = iou_set.thresholds();
        let aps: Vec<f64> = thresholds.iter().filter_map(|&thr| average_precision(&preds, &gt, thr)).collect();
        per_class.insert(c, aps.iter().sum::<f64>() / aps.len() as f64);
    }
    let map = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(ApReport { per_class, map })
}

/// Round (1-based) to keep: the last one before pseudo-label precision
/// first strictly drops, or the final round if it never does.
pub fn stopping_decision(precision_per_round: &[f64]) -> Result<usize> {
    if precision_per_round.is_empty() {
        return Err(invalid("need precision for at least one round"));
    }
    Ok(precision_per_round
        .windows(2)
        .position(|w| w[1] < w[0])
        .map_or(precision_per_round.len(), |i| i + 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
}

/// Serialized metrics document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: BTreeMap<String, ClassMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    pub config: serde_json::Value,
}
