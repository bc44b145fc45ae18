//! WebAssembly entry points for the static demo page in `www/`.
//!
//! Every export returns a JSON string; errors come back as
//! `{"error": code, "message": ...}` so the page needs no exception path.

use std::collections::BTreeSet;

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use evlabel::config::PipelineConfig;
use evlabel::eval::{pseudo_label_pr, FrameMode};
use evlabel::evrep::build_histograms;
use evlabel::pipeline::{forge_sequence, hard_filter_only, tta_merge_frames, Certainty, PseudoLabelSet, Provenance, SequenceDetections};
use evlabel::synth;
use evlabel::tracker::{Tracker, TrackerParams};
use evlabel::{DetBox, Error, Result};

fn to_json(r: Result<Value>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e.code(), "message": e.to_string() }).to_string(),
    }
}

fn box_json(b: &DetBox) -> Value {
    json!({ "x": b.x, "y": b.y, "w": b.w, "h": b.h, "cls": b.class_id, "score": b.score().value() })
}

/// Names of the built-in synthetic scenarios.
#[wasm_bindgen]
pub fn scenarios() -> String {
    let names: Vec<String> = synth::scenario_library().into_iter().map(|s| s.name).collect();
    json!(names).to_string()
}

/// Forge pseudo labels for a synthetic scenario and compare against plain
/// hard-threshold filtering.
#[wasm_bindgen]
pub fn forge_scenario(name: &str, seed: u32, tau_hard_car: f64, use_tta: bool, bidirectional: bool) -> String {
    to_json(forge_scenario_value(name, seed as u64, tau_hard_car, use_tta, bidirectional))
}

pub fn forge_scenario_value(name: &str, seed: u64, tau_hard_car: f64, use_tta: bool, bidirectional: bool) -> Result<Value> {
    let s = synth::scenario(name)?.with_seed(seed);
    let mut cfg = PipelineConfig::default();
    cfg.thresholds.tau_hard_car = tau_hard_car;
    cfg.tracker.bidirectional = bidirectional;
    let settings = cfg.forge_settings()?;
    let out = synth::generate(&s)?;
    let mut variants = synth::generate_variants(&s, &synth::all_variants(&s))?;
    if !use_tta {
        variants.truncate(1);
    }
    let seq = SequenceDetections {
        id: s.name.clone(),
        num_steps: s.duration_steps,
        width: s.width as f64,
        variants,
        gt: Default::default(),
    };
    let merged = tta_merge_frames(&seq, &settings.options)?;
    let forged = forge_sequence(&seq, &settings, 1)?;
    let naive = hard_filter_only(&s.name, &merged, &settings.thresholds)?;

    let gt_map = out.gt.iter().cloned().enumerate().collect();
    let pr = |set: &PseudoLabelSet| -> Result<Value> {
        let r = pseudo_label_pr(set, &gt_map, &BTreeSet::new(), FrameMode::SkippedFrames, cfg.eval.tau_match)?;
        Ok(json!({ "precision": r.precision(), "recall": r.recall(), "tp": r.overall.tp, "fp": r.overall.fp, "fn": r.overall.fn_ }))
    };
    let frames: Vec<Value> = (0..s.duration_steps)
        .map(|t| {
            let labels: Vec<Value> = forged.labels[t]
                .iter()
                .map(|l| {
                    let mut v = box_json(&l.bbox);
                    v["keep"] = json!(l.certainty == Certainty::Keep);
                    v["inpainted"] = json!(l.provenance == Provenance::Inpainted);
                    v["tlen_f"] = json!(l.track_len_fwd);
                    v["tlen_b"] = json!(l.track_len_bwd);
                    v
                })
                .collect();
            json!({
                "gt": out.gt[t].iter().map(box_json).collect::<Vec<_>>(),
                "raw": merged[t].iter().map(box_json).collect::<Vec<_>>(),
                "labels": labels,
            })
        })
        .collect();
    Ok(json!({
        "name": s.name,
        "width": s.width,
        "height": s.height,
        "num_steps": s.duration_steps,
        "classes": cfg.classes()?,
        "thresholds": { "hard": settings.thresholds.tau_hard, "soft": settings.thresholds.tau_soft, "t_trk": settings.thresholds.t_trk },
        "forge": pr(&forged)?,
        "naive": pr(&naive)?,
        "frames": frames,
    }))
}

/// Score of an unmatched track step by step until deletion, from a fresh
/// track and from one that was just matched.
#[wasm_bindgen]
pub fn tracker_decay(decay: f64, init_q: f64, tau_del: f64) -> String {
    to_json(tracker_decay_value(decay, init_q, tau_del))
}

pub fn tracker_decay_value(decay: f64, init_q: f64, tau_del: f64) -> Result<Value> {
    const LIMIT: usize = 200;
    let params = TrackerParams { decay, init_q, tau_del, ..TrackerParams::default() };
    let curve = |matched_again: bool| -> Result<Value> {
        let b = |t| DetBox::certain(0.0, 0.0, 20.0, 20.0, 0, t, 1);
        let mut tr = Tracker::new(params)?;
        tr.step(&[b(0)], 0)?;
        let mut t = 1;
        if matched_again {
            tr.step(&[b(1)], 1)?;
            t = 2;
        }
        let mut q = vec![tr.alive()[0].q];
        let start = t;
        while !tr.alive().is_empty() {
            if t - start >= LIMIT {
                return Err(Error::InvalidInput(format!("track survives more than {LIMIT} unmatched steps")));
            }
            tr.step(&[], t)?;
            t += 1;
            let last = *q.last().unwrap_or(&init_q);
            q.push(tr.alive().first().map_or(last * decay, |x| x.q));
        }
        Ok(json!({ "q": q, "deleted_after": t - start }))
    };
    Ok(json!({ "fresh": curve(false)?, "matched": curve(true)?, "tau_del": tau_del }))
}

/// Event histogram of one timestep of a scenario: per-pixel positive and
/// negative counts summed over temporal bins, plus per-bin totals.
#[wasm_bindgen]
pub fn histogram_frame(name: &str, seed: u32, step: u32, bins: u32, time_flip: bool) -> String {
    to_json(histogram_frame_value(name, seed as u64, step as usize, bins as usize, time_flip))
}

pub fn histogram_frame_value(name: &str, seed: u64, step: usize, bins: usize, time_flip: bool) -> Result<Value> {
    let s = synth::scenario(name)?.with_seed(seed);
    let mut stream = synth::generate(&s)?.events;
    if time_flip {
        stream = evlabel::evrep::time_flip_stream(&stream);
    }
    let hists = build_histograms(&stream, s.window_us, bins, Some(255))?;
    let h = hists.get(step).ok_or_else(|| Error::InvalidInput(format!("step {step} beyond {} windows", hists.len())))?;
    let (rows, cols) = (h.height, h.width);
    let mut pos = vec![0u32; rows * cols];
    let mut neg = vec![0u32; rows * cols];
    let mut per_bin = vec![[0u64; 2]; bins];
    for (b, totals) in per_bin.iter_mut().enumerate() {
        for (p, total) in totals.iter_mut().enumerate() {
            for y in 0..rows {
                for x in 0..cols {
                    let v = h.get(2 * b + p, y, x);
                    *total += v as u64;
                    if p == 1 {
                        pos[y * cols + x] += v;
                    } else {
                        neg[y * cols + x] += v;
                    }
                }
            }
        }
    }
    Ok(json!({ "width": cols, "height": rows, "windows": hists.len(), "pos": pos, "neg": neg, "per_bin": per_bin }))
}
