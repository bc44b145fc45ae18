//! Tracking-by-detection with linear motion, greedy IoU association and an
//! exponentially decaying liveness score.
//!
//! A track's length `n` counts successful matches only; unmatched steps do
//! not add to it. Tracks whose score drops below `tau_del` are deleted and
//! their ids are never reused.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{iou_unchecked, DetBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerParams {
    pub tau_iou: f64,
    pub tau_del: f64,
    pub decay: f64,
    pub init_q: f64,
}

impl Default for TrackerParams {
    fn default() -> Self {
        TrackerParams { tau_iou: 0.45, tau_del: 0.55, decay: 0.9, init_q: 0.9 }
    }
}

impl TrackerParams {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.tau_del) || !open_unit(self.decay) {
            return Err(Error::InvalidConfig(format!(
                "tracker needs 0 < tau_del < 1 and 0 < decay < 1, got tau_del={} decay={}",
                self.tau_del, self.decay
            )));
        }
        if !(0.0..1.0).contains(&self.tau_iou) || !(self.init_q > 0.0 && self.init_q <= 1.0) {
            return Err(Error::InvalidConfig("tracker tau_iou must be in [0, 1) and init_q in (0, 1]".into()));
        }
        Ok(())
    }
}

/// One timestep of a track's life.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub t_step: usize,
    /// The matched detection, or the motion prediction when unmatched.
    pub bbox: DetBox,
    pub matched: bool,
    /// Index of the matched box within its input frame.
    pub source: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: u64,
    /// Last matched box.
    pub last_box: DetBox,
    /// Center velocity in pixels per timestep.
    pub velocity: (f64, f64),
    pub n: usize,
    pub q: f64,
    pub last_match_t: usize,
    pub class_id: u32,
    pub history: Vec<HistoryEntry>,
}

impl Track {
    fn spawn(id: u64, b: &DetBox, source: usize, init_q: f64) -> Self {
        Track {
            id,
            last_box: b.clone(),
            velocity: (0.0, 0.0),
            n: 1,
            q: init_q,
            last_match_t: b.t_step,
            class_id: b.class_id,
            history: vec![HistoryEntry { t_step: b.t_step, bbox: b.clone(), matched: true, source: Some(source) }],
        }
    }

    pub fn last_step(&self) -> usize {
        self.history.last().map_or(self.last_match_t, |h| h.t_step)
    }

    pub fn matched_entries(&self) -> impl Iterator<Item = &HistoryEntry> {
        self.history.iter().filter(|h| h.matched)
    }
}

/// Linear-motion prediction of a track's box at `t_step`: the last matched
/// box shifted by velocity times the steps elapsed since that match, size
/// unchanged.
pub fn predict(track: &Track, t_step: usize) -> DetBox {
    let dt = t_step.saturating_sub(track.last_match_t) as f64;
    let mut b = track.last_box.translated(track.velocity.0 * dt, track.velocity.1 * dt);
    b.t_step = t_step;
    b
}

/// Greedy one-to-one association. All pairs with equal class and IoU above
/// `tau_iou` are visited by descending IoU (ties: lower track id, then lower
/// box index); a pair is accepted when both sides are still free.
///
/// `predicted` holds `(track id, predicted box)`. Returns `(track index,
/// box index)` pairs in acceptance order.
pub fn greedy_match(predicted: &[(u64, DetBox)], boxes: &[DetBox], tau_iou: f64) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (ti, (_, p)) in predicted.iter().enumerate() {
        for (bi, b) in boxes.iter().enumerate() {
            if p.class_id != b.class_id {
                continue;
            }
            let v = iou_unchecked(p, b);
            if v > tau_iou {
                pairs.push((v, ti, bi));
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(predicted[a.1].0.cmp(&predicted[b.1].0))
            .then(a.2.cmp(&b.2))
    });
    let mut track_used = vec![false; predicted.len()];
    let mut box_used = vec![false; boxes.len()];
    let mut out = Vec::new();
    for (_, ti, bi) in pairs {
        if !track_used[ti] && !box_used[bi] {
            track_used[ti] = true;
            box_used[bi] = true;
            out.push((ti, bi));
        }
    }
    out
}

/// Online tracker for one sequence.
#[derive(Debug, Clone)]
pub struct Tracker {
    params: TrackerParams,
    alive: Vec<Track>,
    finished: Vec<Track>,
    next_id: u64,
    last_t: Option<usize>,
}

impl Tracker {
    pub fn new(params: TrackerParams) -> Result<Self> {
        params.validate()?;
        Ok(Tracker { params, alive: Vec::new(), finished: Vec::new(), next_id: 0, last_t: None })
    }

    pub fn params(&self) -> &TrackerParams {
        &self.params
    }

    pub fn alive(&self) -> &[Track] {
        &self.alive
    }

    pub fn finished(&self) -> &[Track] {
        &self.finished
    }

    /// Advance to `t_step` with that timestep's detections.
    pub fn step(&mut self, boxes: &[DetBox], t_step: usize) -> Result<()> {
        if let Some(b) = boxes.iter().find(|b| b.t_step != t_step) {
            return Err(invalid(format!("box at t={} passed to tracker step t={t_step}", b.t_step)));
        }
        if let Some(b) = boxes.iter().find(|b| !b.is_valid_geometry()) {
            return Err(invalid(format!("degenerate box passed to tracker: {b:?}")));
        }
        if self.last_t.is_some_and(|last| t_step <= last) {
            return Err(invalid(format!("tracker steps must increase, got t={t_step} after {:?}", self.last_t)));
        }
        self.last_t = Some(t_step);

        let predicted: Vec<(u64, DetBox)> = self.alive.iter().map(|tr| (tr.id, predict(tr, t_step))).collect();
        let matches = greedy_match(&predicted, boxes, self.params.tau_iou);

        let mut track_match: Vec<Option<usize>> = vec![None; self.alive.len()];
        let mut box_matched = vec![false; boxes.len()];
        for &(ti, bi) in &matches {
            track_match[ti] = Some(bi);
            box_matched[bi] = true;
        }

        for (ti, track) in self.alive.iter_mut().enumerate() {
            match track_match[ti] {
                Some(bi) => {
                    let b = &boxes[bi];
                    let dt = (t_step - track.last_match_t) as f64;
                    let (cx0, cy0) = track.last_box.center();
                    let (cx1, cy1) = b.center();
                    track.velocity = ((cx1 - cx0) / dt, (cy1 - cy0) / dt);
                    track.last_box = b.clone();
                    track.last_match_t = t_step;
                    track.n += 1;
                    track.q = 1.0;
                    track.history.push(HistoryEntry { t_step, bbox: b.clone(), matched: true, source: Some(bi) });
                }
                None => {
                    track.q *= self.params.decay;
                    let (_, p) = &predicted[ti];
                    track.history.push(HistoryEntry { t_step, bbox: p.clone(), matched: false, source: None });
                }
            }
        }

        for (bi, b) in boxes.iter().enumerate() {
            if !box_matched[bi] {
                self.alive.push(Track::spawn(self.next_id, b, bi, self.params.init_q));
                self.next_id += 1;
            }
        }

        let tau_del = self.params.tau_del;
        let (dead, alive): (Vec<Track>, Vec<Track>) = self.alive.drain(..).partition(|t| t.q < tau_del);
        self.alive = alive;
        self.finished.extend(dead);
        Ok(())
    }

    /// All tracks ever created, ordered by id.
    pub fn into_tracks(mut self) -> Vec<Track> {
        self.finished.append(&mut self.alive);
        self.finished.sort_by_key(|t| t.id);
        self.finished
    }
}

/// A detection annotated with the track it ended up in.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackedBox {
    pub bbox: DetBox,
    pub track_id: u64,
    /// Final match count of the track.
    pub track_len: usize,
    pub inpainted: bool,
    /// Position of the box within its input frame; `None` when inpainted.
    pub source: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrackingResult {
    /// Input boxes, frame by frame in input order.
    pub boxes: Vec<TrackedBox>,
    pub tracks: Vec<Track>,
}

/// Run the tracker over a whole sequence. `frames[t]` holds the boxes of
/// timestep `t`, and every box must carry that `t_step`.
pub fn track_sequence(frames: &[Vec<DetBox>], params: &TrackerParams) -> Result<TrackingResult> {
    let mut tracker = Tracker::new(*params)?;
    for (t, frame) in frames.iter().enumerate() {
        tracker.step(frame, t)?;
    }
    let tracks = tracker.into_tracks();

    let mut owner: Vec<Vec<Option<(u64, usize)>>> = frames.iter().map(|f| vec![None; f.len()]).collect();
    for track in &tracks {
        for h in track.matched_entries() {
            if let Some(src) = h.source {
                owner[h.t_step][src] = Some((track.id, track.n));
            }
        }
    }
    let mut boxes = Vec::with_capacity(owner.iter().map(Vec::len).sum());
    for (t, frame) in frames.iter().enumerate() {
        for (i, b) in frame.iter().enumerate() {
            let (track_id, track_len) = owner[t][i].expect("every box is matched or spawns a track");
            boxes.push(TrackedBox { bbox: b.clone(), track_id, track_len, inpainted: false, source: Some(i) });
        }
    }
    Ok(TrackingResult { boxes, tracks })
}

/// Synthesized boxes for the unmatched timesteps strictly inside each track
/// with at least `min_len` matches. Geometry is interpolated linearly
/// between the surrounding matched boxes; scores are copied from the nearer
/// of the two (the earlier one on a tie).
pub fn inpainted_boxes(tracks: &[Track], min_len: usize) -> Vec<TrackedBox> {
    let mut out = Vec::new();
    for track in tracks.iter().filter(|t| t.n >= min_len.max(1)) {
        let matched: Vec<&HistoryEntry> = track.matched_entries().collect();
        for pair in matched.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let span = (b.t_step - a.t_step) as f64;
            for t in a.t_step + 1..b.t_step {
                let alpha = (t - a.t_step) as f64 / span;
                let lerp = |u: f64, v: f64| u + (v - u) * alpha;
                let nearest = if t - a.t_step <= b.t_step - t { &a.bbox } else { &b.bbox };
                let bbox = DetBox {
                    x: lerp(a.bbox.x, b.bbox.x),
                    y: lerp(a.bbox.y, b.bbox.y),
                    w: lerp(a.bbox.w, b.bbox.w),
                    h: lerp(a.bbox.h, b.bbox.h),
                    class_id: track.class_id,
                    t_step: t,
                    p_obj: nearest.p_obj,
                    p_iou: nearest.p_iou.clone(),
                };
                out.push(TrackedBox { bbox, track_id: track.id, track_len: track.n, inpainted: true, source: None });
            }
        }
    }
    out.sort_by_key(|b| (b.bbox.t_step, b.track_id));
    out
}

/// `tracked` plus the inpainted boxes of long tracks, ordered by timestep
/// (inputs before inpainted boxes within a timestep).
pub fn inpaint(tracked: &[TrackedBox], tracks: &[Track], min_len: usize) -> Vec<TrackedBox> {
    let mut all: Vec<TrackedBox> = tracked.to_vec();
    all.extend(inpainted_boxes(tracks, min_len));
    all.sort_by_key(|b| (b.bbox.t_step, b.inpainted));
    all
}
