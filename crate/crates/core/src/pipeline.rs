//! Pseudo-label forging: class-wise hard filtering, forward and backward
//! tracking, inpainting of long tracks and soft-certainty tagging.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{iou_unchecked, order_by_score_desc, DetBox};
use crate::tracker::{inpainted_boxes, track_sequence, Track, TrackedBox, TrackerParams};
use crate::tta::{tta_merge, TtaVariant};

/// Per-class hard and soft score thresholds plus the minimum track length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub tau_hard: Vec<f64>,
    pub tau_soft: Vec<f64>,
    pub t_trk: usize,
}

impl ThresholdConfig {
    pub fn new(tau_hard: Vec<f64>, tau_soft: Vec<f64>, t_trk: usize) -> Result<Self> {
        let cfg = ThresholdConfig { tau_hard, tau_soft, t_trk };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau_hard.len() != self.tau_soft.len() || self.tau_hard.is_empty() {
            return Err(Error::InvalidConfig("need one hard and one soft threshold per class".into()));
        }
        if self.t_trk == 0 {
            return Err(Error::InvalidConfig("t_trk must be at least 1".into()));
        }
        for (c, (&hard, &soft)) in self.tau_hard.iter().zip(&self.tau_soft).enumerate() {
            if !(hard > 0.0 && hard < 1.0) || !(soft > 0.0 && soft < 1.0) {
                return Err(Error::InvalidConfig(format!("class {c}: thresholds ({hard}, {soft}) must lie in (0, 1)")));
            }
            if soft < hard {
                return Err(Error::InvalidThresholds(format!("class {c}: tau_soft {soft} < tau_hard {hard}")));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.tau_hard.len()
    }

    fn hard(&self, class_id: u32) -> f64 {
        self.tau_hard.get(class_id as usize).copied().unwrap_or(f64::INFINITY)
    }

    fn soft(&self, class_id: u32) -> f64 {
        self.tau_soft.get(class_id as usize).copied().unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hard: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft: Option<f64>,
}

/// (scale of the car threshold, soft offset) per class name.
fn class_rule(name: &str) -> Option<(f64, f64)> {
    match name {
        "car" => Some((1.0, 0.1)),
        "pedestrian" | "two-wheeler" | "two_wheeler" => Some((0.5, 0.05)),
        _ => None,
    }
}

/// Per-class thresholds from the car hard threshold: cars use
/// `(h, h + 0.1)`, pedestrians and two-wheelers `(h / 2, h / 2 + 0.05)`.
/// An override of only the hard value re-derives the soft one from it.
pub fn derive_thresholds(
    tau_hard_car: f64,
    classes: &[String],
    overrides: &BTreeMap<String, ThresholdOverride>,
    t_trk: usize,
) -> Result<ThresholdConfig> {
    if !(tau_hard_car > 0.0 && tau_hard_car < 1.0) {
        return Err(Error::InvalidConfig(format!("tau_hard_car {tau_hard_car} outside (0, 1)")));
    }
    if let Some(name) = overrides.keys().find(|k| !classes.contains(k)) {
        return Err(Error::InvalidConfig(format!("threshold override for unknown class {name:?}")));
    }
    let mut hard = Vec::with_capacity(classes.len());
    let mut soft = Vec::with_capacity(classes.len());
    for name in classes {
        let (scale, offset) = class_rule(name).ok_or_else(|| Error::InvalidConfig(format!("no threshold rule for class {name:?}")))?;
        let o = overrides.get(name).copied().unwrap_or_default();
        let h = o.hard.unwrap_or(tau_hard_car * scale);
        let s = o.soft.unwrap_or(h + offset);
        if s >= 1.0 {
            return Err(Error::InvalidConfig(format!("class {name:?}: tau_soft {s} reaches 1")));
        }
        hard.push(h);
        soft.push(s);
    }
    ThresholdConfig::new(hard, soft, t_trk)
}

/// Keep boxes with `p_obj >= tau_hard` and `max(p_iou) >= tau_hard` for
/// their class.
pub fn hard_filter(boxes: &[DetBox], cfg: &ThresholdConfig) -> Vec<DetBox> {
    boxes.iter().filter(|b| passes_hard(b, cfg)).cloned().collect()
}

fn passes_hard(b: &DetBox, cfg: &ThresholdConfig) -> bool {
    let tau = cfg.hard(b.class_id);
    b.p_obj >= tau && b.max_iou_score() >= tau
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftRule {
    /// Uncertain when both scores fall below `tau_soft`.
    And,
    /// Uncertain when either score falls below `tau_soft`.
    Or,
}

pub fn soft_uncertain(b: &DetBox, cfg: &ThresholdConfig) -> bool {
    soft_uncertain_with(b, cfg, SoftRule::And)
}

pub fn soft_uncertain_with(b: &DetBox, cfg: &ThresholdConfig, rule: SoftRule) -> bool {
    let tau = cfg.soft(b.class_id);
    let (obj_low, iou_low) = (b.p_obj < tau, b.max_iou_score() < tau);
    match rule {
        SoftRule::And => obj_low && iou_low,
        SoftRule::Or => obj_low || iou_low,
    }
}

/// Which tracks get gap boxes synthesized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InpaintRule {
    /// Tracks with at least `t_trk` matches in the pass that built them.
    Directional,
    /// Tracks owning at least one box that survived the bidirectional check.
    Survivor,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Certainty {
    Keep,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Detected,
    Inpainted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Det,
    Gt,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub bbox: DetBox,
    pub certainty: Certainty,
    pub provenance: Provenance,
    pub source: LabelSource,
    pub track_len_fwd: usize,
    pub track_len_bwd: usize,
}

impl PseudoLabel {
    pub fn is_keep(&self) -> bool {
        self.certainty == Certainty::Keep
    }

    fn ground_truth(bbox: DetBox) -> Self {
        PseudoLabel {
            bbox,
            certainty: Certainty::Keep,
            provenance: Provenance::Detected,
            source: LabelSource::Gt,
            track_len_fwd: 0,
            track_len_bwd: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub sequence_id: String,
    /// `labels[t]` holds the labels of timestep `t`.
    pub labels: Vec<Vec<PseudoLabel>>,
    pub round: u32,
    pub config_digest: String,
}

impl PseudoLabelSet {
    pub fn num_steps(&self) -> usize {
        self.labels.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PseudoLabel> {
        self.labels.iter().flatten()
    }

    pub fn keep_count(&self) -> usize {
        self.iter().filter(|l| l.is_keep()).count()
    }

    /// KEEP boxes per timestep.
    pub fn keep_boxes(&self) -> Vec<Vec<DetBox>> {
        self.labels
            .iter()
            .map(|f| f.iter().filter(|l| l.is_keep()).map(|l| l.bbox.clone()).collect())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForgeOptions {
    pub soft_rule: SoftRule,
    pub inpaint_rule: InpaintRule,
    /// When false only the forward track length decides.
    pub bidirectional: bool,
    pub tau_nms: f64,
    pub class_aware: bool,
}

impl Default for ForgeOptions {
    fn default() -> Self {
        ForgeOptions {
            soft_rule: SoftRule::And,
            inpaint_rule: InpaintRule::Directional,
            bidirectional: true,
            tau_nms: 0.45,
            class_aware: true,
        }
    }
}

/// Everything one forging round needs, stamped with the config digest.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgeSettings {
    pub thresholds: ThresholdConfig,
    pub tracker: TrackerParams,
    pub options: ForgeOptions,
    pub digest: String,
}

impl ForgeSettings {
    pub fn new(thresholds: ThresholdConfig, tracker: TrackerParams, options: ForgeOptions) -> Self {
        ForgeSettings { thresholds, tracker, options, digest: String::new() }
    }
}

fn check_frames(frames: &[Vec<DetBox>]) -> Result<()> {
    for (t, frame) in frames.iter().enumerate() {
        if let Some(b) = frame.iter().find(|b| b.t_step != t) {
            return Err(invalid(format!("frame {t} holds a box stamped t={}", b.t_step)));
        }
    }
    Ok(())
}

/// A detected box is IGNORE when its track is shorter than `t_trk` in both
/// directions, or when it is soft-uncertain.
pub fn certainty_for(track_len_fwd: usize, track_len_bwd: usize, t_trk: usize, soft_uncertain: bool) -> Certainty {
    let short = track_len_fwd < t_trk && track_len_bwd < t_trk;
    if short || soft_uncertain {
        Certainty::Ignore
    } else {
        Certainty::Keep
    }
}

fn reversed_frames(frames: &[Vec<DetBox>]) -> Vec<Vec<DetBox>> {
    let last = frames.len().saturating_sub(1);
    frames
        .iter()
        .rev()
        .map(|f| f.iter().map(|b| DetBox { t_step: last - b.t_step, ..b.clone() }).collect())
        .collect()
}

/// Track lengths indexed like `frames`.
fn lengths_by_position(frames: &[Vec<DetBox>], boxes: &[TrackedBox], reversed: bool) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = frames.iter().map(|f| vec![0; f.len()]).collect();
    let last = frames.len().saturating_sub(1);
    for tb in boxes {
        let t = if reversed { last - tb.bbox.t_step } else { tb.bbox.t_step };
        out[t][tb.source.expect("tracked input box")] = tb.track_len;
    }
    out
}

/// Turn TTA-merged detections of one sequence into certainty-tagged labels.
///
/// Boxes pass the class-wise hard filter, then are tracked forward and on the
/// time-reversed sequence. A box is IGNORE when its track is shorter than
/// `t_trk` in both passes, or when it is soft-uncertain. Long tracks get
/// their gaps filled with INPAINTED boxes, always IGNORE.
pub fn forge(
    sequence_id: &str,
    frames: &[Vec<DetBox>],
    thresholds: &ThresholdConfig,
    tracker: &TrackerParams,
    options: &ForgeOptions,
) -> Result<PseudoLabelSet> {
    thresholds.validate()?;
    check_frames(frames)?;
    let t_trk = thresholds.t_trk;
    let last = frames.len().saturating_sub(1);
    let filtered: Vec<Vec<DetBox>> = frames.iter().map(|f| hard_filter(f, thresholds)).collect();

    let fwd = track_sequence(&filtered, tracker)?;
    let len_fwd = lengths_by_position(&filtered, &fwd.boxes, false);
    let (bwd_tracks, len_bwd) = if options.bidirectional {
        let bwd = track_sequence(&reversed_frames(&filtered), tracker)?;
        let lens = lengths_by_position(&filtered, &bwd.boxes, true);
        (bwd.tracks, lens)
    } else {
        (Vec::new(), filtered.iter().map(|f| vec![0; f.len()]).collect())
    };

    let mut labels: Vec<Vec<PseudoLabel>> = Vec::with_capacity(filtered.len());
    for (t, frame) in filtered.iter().enumerate() {
        let row = frame
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let (lf, lb) = (len_fwd[t][i], len_bwd[t][i]);
                let uncertain = soft_uncertain_with(b, thresholds, options.soft_rule);
                PseudoLabel {
                    bbox: b.clone(),
                    certainty: certainty_for(lf, lb, t_trk, uncertain),
                    provenance: Provenance::Detected,
                    source: LabelSource::Pseudo,
                    track_len_fwd: lf,
                    track_len_bwd: lb,
                }
            })
            .collect();
        labels.push(row);
    }

    // Inpainting candidates, forward pass first.
    let eligible = |tracks: &[Track], reversed: bool| -> Vec<Track> {
        tracks
            .iter()
            .filter(|tr| match options.inpaint_rule {
                InpaintRule::Directional => tr.n >= t_trk,
                InpaintRule::Survivor => tr.matched_entries().any(|h| {
                    let t = if reversed { last - h.t_step } else { h.t_step };
                    let i = h.source.expect("matched entry has a source");
                    len_fwd[t][i] >= t_trk || len_bwd[t][i] >= t_trk
                }),
                InpaintRule::Off => false,
            })
            .cloned()
            .collect()
    };
    let mut candidates: Vec<Vec<PseudoLabel>> = vec![Vec::new(); filtered.len()];
    for tb in inpainted_boxes(&eligible(&fwd.tracks, false), 1) {
        candidates[tb.bbox.t_step].push(inpainted_label(tb.bbox, tb.track_len, 0));
    }
    for tb in inpainted_boxes(&eligible(&bwd_tracks, true), 1) {
        let bbox = DetBox { t_step: last - tb.bbox.t_step, ..tb.bbox };
        candidates[bbox.t_step].push(inpainted_label(bbox, 0, tb.track_len));
    }
    for (t, cands) in candidates.into_iter().enumerate() {
        let scores: Vec<f64> = cands.iter().map(|c| c.bbox.score().value()).collect();
        let mut fwd_first: Vec<usize> = order_by_score_desc(&scores);
        fwd_first.sort_by_key(|&i| cands[i].track_len_fwd == 0);
        for i in fwd_first {
            let c = &cands[i];
            let overlaps = labels[t].iter().any(|l| {
                (!options.class_aware || l.bbox.class_id == c.bbox.class_id) && iou_unchecked(&l.bbox, &c.bbox) > options.tau_nms
            });
            if !overlaps {
                labels[t].push(c.clone());
            }
        }
    }

    Ok(PseudoLabelSet { sequence_id: sequence_id.to_string(), labels, round: 1, config_digest: String::new() })
}

fn inpainted_label(bbox: DetBox, track_len_fwd: usize, track_len_bwd: usize) -> PseudoLabel {
    PseudoLabel {
        bbox,
        certainty: Certainty::Ignore,
        provenance: Provenance::Inpainted,
        source: LabelSource::Pseudo,
        track_len_fwd,
        track_len_bwd,
    }
}

/// Baseline: every hard-filtered box becomes a KEEP label.
pub fn hard_filter_only(sequence_id: &str, frames: &[Vec<DetBox>], thresholds: &ThresholdConfig) -> Result<PseudoLabelSet> {
    check_frames(frames)?;
    let labels = frames
        .iter()
        .map(|f| {
            hard_filter(f, thresholds)
                .into_iter()
                .map(|b| PseudoLabel {
                    bbox: b,
                    certainty: Certainty::Keep,
                    provenance: Provenance::Detected,
                    source: LabelSource::Pseudo,
                    track_len_fwd: 0,
                    track_len_bwd: 0,
                })
                .collect()
        })
        .collect();
    Ok(PseudoLabelSet { sequence_id: sequence_id.to_string(), labels, round: 1, config_digest: String::new() })
}

/// Detector outputs and annotations of one sequence for a labeling round.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDetections {
    pub id: String,
    pub num_steps: usize,
    pub width: f64,
    /// Raw outputs of each TTA run, in that run's flipped frame.
    pub variants: Vec<(TtaVariant, Vec<DetBox>)>,
    /// Ground-truth boxes at the labeled timesteps. Empty for unlabeled
    /// sequences.
    pub gt: BTreeMap<usize, Vec<DetBox>>,
}

/// Per-timestep TTA-merged detections of a sequence.
pub fn tta_merge_frames(seq: &SequenceDetections, options: &ForgeOptions) -> Result<Vec<Vec<DetBox>>> {
    if seq.variants.is_empty() {
        return Ok(vec![Vec::new(); seq.num_steps]);
    }
    tta_merge(&seq.variants, options.tau_nms, options.class_aware)
}

/// TTA-merge and forge one sequence, then let ground truth replace
/// overlapping pseudo labels at labeled timesteps.
pub fn forge_sequence(seq: &SequenceDetections, settings: &ForgeSettings, round: u32) -> Result<PseudoLabelSet> {
    if round == 0 {
        return Err(invalid("rounds are numbered from 1"));
    }
    if let Some((v, _)) = seq.variants.iter().find(|(v, _)| v.num_timesteps != seq.num_steps) {
        return Err(invalid(format!(
            "sequence {}: {} detections span {} steps, metadata says {}",
            seq.id,
            v.name(),
            v.num_timesteps,
            seq.num_steps
        )));
    }
    if let Some(&t) = seq.gt.keys().find(|&&t| t >= seq.num_steps) {
        return Err(invalid(format!("sequence {}: label at t={t} beyond {} steps", seq.id, seq.num_steps)));
    }
    let opts = &settings.options;
    let merged = tta_merge_frames(seq, opts)?;
    let mut set = forge(&seq.id, &merged, &settings.thresholds, &settings.tracker, opts)?;
    for (&t, gt_boxes) in &seq.gt {
        let pseudo = std::mem::take(&mut set.labels[t]);
        let mut frame: Vec<PseudoLabel> = gt_boxes.iter().cloned().map(PseudoLabel::ground_truth).collect();
        frame.extend(pseudo.into_iter().filter(|p| {
            !gt_boxes.iter().any(|g| {
                (!opts.class_aware || g.class_id == p.bbox.class_id) && iou_unchecked(g, &p.bbox) > opts.tau_nms
            })
        }));
        set.labels[t] = frame;
    }
    set.round = round;
    set.config_digest = settings.digest.clone();
    Ok(set)
}

/// One offline labeling round over many sequences.
pub fn run_round(sequences: &[SequenceDetections], settings: &ForgeSettings, round: u32) -> Result<BTreeMap<String, PseudoLabelSet>> {
    sequences
        .iter()
        .map(|s| forge_sequence(s, settings, round).map(|set| (s.id.clone(), set)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn gen1() -> ThresholdConfig {
        derive_thresholds(0.6, &names(&["car", "pedestrian"]), &BTreeMap::new(), 6).unwrap()
    }

    fn scored(class_id: u32, p_obj: f64, p_iou: f64) -> DetBox {
        let mut b = DetBox::certain(0.0, 0.0, 10.0, 10.0, class_id, 0, 2);
        b.p_obj = p_obj;
        b.p_iou = vec![0.0; 2];
        b.p_iou[class_id as usize] = p_iou;
        b
    }

    #[test]
    fn thresholds_from_car_value() {
        let cfg = derive_thresholds(0.6, &names(&["car", "pedestrian", "two-wheeler"]), &BTreeMap::new(), 6).unwrap();
        assert_eq!(cfg.tau_hard, vec![0.6, 0.3, 0.3]);
        assert_eq!(cfg.tau_soft, vec![0.7, 0.35, 0.35]);
        let cfg = derive_thresholds(0.8, &names(&["car"]), &BTreeMap::new(), 6).unwrap();
        assert_eq!((cfg.tau_hard[0], cfg.tau_soft[0]), (0.8, 0.9));
    }

    #[test]
    fn hard_override_rederives_soft() {
        let mut ov = BTreeMap::new();
        ov.insert("pedestrian".to_string(), ThresholdOverride { hard: Some(0.5), soft: None });
        let cfg = derive_thresholds(0.6, &names(&["car", "pedestrian"]), &ov, 6).unwrap();
        assert_eq!((cfg.tau_hard[1], cfg.tau_soft[1]), (0.5, 0.55));
    }

    #[test]
    fn threshold_errors() {
        assert_eq!(derive_thresholds(0.95, &names(&["car"]), &BTreeMap::new(), 6).unwrap_err().code(), "invalid-config");
        assert!(derive_thresholds(0.0, &names(&["car"]), &BTreeMap::new(), 6).is_err());
        assert!(derive_thresholds(0.6, &names(&["bus"]), &BTreeMap::new(), 6).is_err());
        let mut ov = BTreeMap::new();
        ov.insert("car".to_string(), ThresholdOverride { hard: Some(0.6), soft: Some(0.5) });
        assert_eq!(derive_thresholds(0.6, &names(&["car"]), &ov, 6).unwrap_err().code(), "invalid-thresholds");
    }

    #[test]
    fn hard_filter_examples() {
        let cfg = gen1();
        assert_eq!(hard_filter(&[scored(0, 0.65, 0.62)], &cfg).len(), 1);
        assert!(hard_filter(&[scored(0, 0.65, 0.55)], &cfg).is_empty());
        assert_eq!(hard_filter(&[scored(1, 0.31, 0.32)], &cfg).len(), 1);
    }

    #[test]
    fn soft_examples() {
        let cfg = gen1();
        assert!(soft_uncertain(&scored(0, 0.65, 0.68), &cfg));
        assert!(!soft_uncertain(&scored(0, 0.65, 0.9), &cfg));
        assert!(!soft_uncertain(&scored(0, 0.95, 0.95), &cfg));
        assert!(soft_uncertain_with(&scored(0, 0.65, 0.9), &cfg, SoftRule::Or));
    }

    fn moving(t: usize, x: f64) -> DetBox {
        let mut b = scored(0, 0.9, 0.9);
        b.x = x;
        b.t_step = t;
        b
    }

    #[test]
    fn isolated_box_is_ignored() {
        let frames = vec![vec![], vec![moving(1, 50.0)], vec![]];
        let set = forge("s", &frames, &gen1(), &TrackerParams::default(), &ForgeOptions::default()).unwrap();
        let l = &set.labels[1][0];
        assert_eq!((l.certainty, l.track_len_fwd, l.track_len_bwd), (Certainty::Ignore, 1, 1));
    }

    #[test]
    fn long_track_is_kept_and_gap_inpainted() {
        let frames: Vec<Vec<DetBox>> = (0..10)
            .map(|t| if t == 4 { vec![] } else { vec![moving(t, t as f64)] })
            .collect();
        let set = forge("s", &frames, &gen1(), &TrackerParams::default(), &ForgeOptions::default()).unwrap();
        assert!(set.labels.iter().enumerate().filter(|(t, _)| *t != 4).all(|(_, f)| f[0].is_keep()));
        assert_eq!(set.labels[4].len(), 1);
        let inp = &set.labels[4][0];
        assert_eq!((inp.provenance, inp.certainty), (Provenance::Inpainted, Certainty::Ignore));
        assert_eq!(inp.bbox.x, 4.0);
    }

    #[test]
    fn inpainting_can_be_disabled() {
        let frames: Vec<Vec<DetBox>> = (0..10)
            .map(|t| if t == 4 { vec![] } else { vec![moving(t, t as f64)] })
            .collect();
        let opts = ForgeOptions { inpaint_rule: InpaintRule::Off, ..Default::default() };
        let set = forge("s", &frames, &gen1(), &TrackerParams::default(), &opts).unwrap();
        assert!(set.labels[4].is_empty());
    }

    #[test]
    fn forge_rejects_misindexed_frames() {
        let frames = vec![vec![moving(3, 0.0)]];
        assert!(forge("s", &frames, &gen1(), &TrackerParams::default(), &ForgeOptions::default()).is_err());
    }

    fn settings() -> ForgeSettings {
        ForgeSettings::new(gen1(), TrackerParams::default(), ForgeOptions::default())
    }

    #[test]
    fn ground_truth_overrides_pseudo() {
        let dets: Vec<DetBox> = (0..8).map(|t| moving(t, 20.0)).collect();
        let mut gt_box = DetBox::certain(21.0, 0.0, 10.0, 10.0, 0, 3, 2);
        gt_box.y = 0.5;
        let seq = SequenceDetections {
            id: "a".into(),
            num_steps: 8,
            width: 304.0,
            variants: vec![(TtaVariant::identity(8, 304.0), dets)],
            gt: BTreeMap::from([(3, vec![gt_box.clone()])]),
        };
        let out = run_round(&[seq], &settings(), 2).unwrap();
        let set = &out["a"];
        assert_eq!(set.round, 2);
        assert_eq!(set.labels[3].len(), 1);
        assert_eq!(set.labels[3][0].source, LabelSource::Gt);
        assert_eq!(set.labels[3][0].bbox, gt_box);
        assert_eq!(set.labels[2][0].source, LabelSource::Pseudo);
    }

    #[test]
    fn unlabeled_sequence_is_pure_pseudo() {
        let dets: Vec<DetBox> = (0..8).map(|t| moving(t, 20.0)).collect();
        let seq = SequenceDetections {
            id: "b".into(),
            num_steps: 8,
            width: 304.0,
            variants: vec![(TtaVariant::identity(8, 304.0), dets)],
            gt: BTreeMap::new(),
        };
        let set = forge_sequence(&seq, &settings(), 1).unwrap();
        assert!(set.iter().all(|l| l.source == LabelSource::Pseudo));
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let seq = SequenceDetections {
            id: "c".into(),
            num_steps: 8,
            width: 304.0,
            variants: vec![(TtaVariant::identity(9, 304.0), vec![])],
            gt: BTreeMap::new(),
        };
        assert_eq!(forge_sequence(&seq, &settings(), 1).unwrap_err().code(), "invalid-input");
    }
}
