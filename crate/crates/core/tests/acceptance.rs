//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails or overruns its time budget.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use evlabel::assign::{assign, loss_gradient, AnchorGrid, AssignParams};
use evlabel::config::PipelineConfig;
use evlabel::eval::{mean_ap, pseudo_label_pr, stopping_decision, EvalFilter, FrameMode, IouSet};
use evlabel::evrep::{build_histograms, hflip_stream, time_flip_stream};
use evlabel::geometry::{nms_indices, DetBox};
use evlabel::pipeline::{
    certainty_for, derive_thresholds, forge_sequence, hard_filter_only, soft_uncertain_with, tta_merge_frames, Certainty,
    ThresholdOverride,
};
use evlabel::protocol::{ssod_split, wsod_split, LabelIndex};
use evlabel::rng::SeededRng;
use evlabel::synth::{generate, scenario};
use evlabel::tracker::{greedy_match, Tracker, TrackerParams};
use evlabel::tta::{unflip_boxes, TtaVariant};

type Check = fn() -> Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn tracker_decay() -> Result<String, String> {
    let b = |t| DetBox::certain(10.0, 10.0, 20.0, 20.0, 0, t, 2);
    // Fresh track (q = 0.9), never matched again.
    let mut tr = Tracker::new(TrackerParams::default()).map_err(|e| e.to_string())?;
    tr.step(&[b(0)], 0).unwrap();
    let mut fresh_steps = 0;
    for t in 1..20 {
        tr.step(&[], t).unwrap();
        fresh_steps += 1;
        if tr.alive().is_empty() {
            break;
        }
    }
    // Matched once more (q = 1), then lost.
    let mut tr2 = Tracker::new(TrackerParams::default()).unwrap();
    tr2.step(&[b(0)], 0).unwrap();
    tr2.step(&[b(1)], 1).unwrap();
    ensure!(tr2.alive()[0].q == 1.0, "q not reset on match");
    let mut matched_steps = 0;
    for t in 2..20 {
        tr2.step(&[], t).unwrap();
        matched_steps += 1;
        if tr2.alive().is_empty() {
            break;
        }
    }
    let q_final = tr2.finished()[0].q;
    ensure!(fresh_steps == 5, "fresh track deleted after {fresh_steps} unmatched steps, expected 5");
    ensure!(matched_steps == 6, "matched track deleted after {matched_steps} unmatched steps, expected 6");
    ensure!((q_final - 0.9f64.powi(6)).abs() < 1e-12 && q_final < 0.55, "final q {q_final}");
    ensure!(tr2.finished()[0].n == 2, "n counts matches only");
    Ok(format!("deletion after 6 steps from q=1 (q={q_final:.4}), 5 from q=0.9"))
}

fn threshold_derivation() -> Result<String, String> {
    let none = BTreeMap::new();
    let g = derive_thresholds(0.6, &names(&["car", "pedestrian"]), &none, 6).map_err(|e| e.to_string())?;
    ensure!(g.tau_hard == vec![0.6, 0.3] && g.tau_soft == vec![0.7, 0.35], "gen1: {g:?}");
    let mut over = BTreeMap::new();
    over.insert("pedestrian".to_string(), ThresholdOverride { hard: Some(0.5), soft: None });
    let m = derive_thresholds(0.6, &names(&["car", "pedestrian", "two-wheeler"]), &over, 6).map_err(|e| e.to_string())?;
    ensure!(m.tau_hard == vec![0.6, 0.5, 0.3] && m.tau_soft == vec![0.7, 0.55, 0.35], "1mpx wsod: {m:?}");
    Ok("car (0.6, 0.7); pedestrian/two-wheeler (0.3, 0.35); override pedestrian (0.5, 0.55)".into())
}

fn stopping_rule() -> Result<String, String> {
    let cases: [(&[f64], usize); 3] = [(&[0.65, 0.72, 0.72], 3), (&[0.74, 0.77, 0.74], 2), (&[0.79, 0.81, 0.76], 2)];
    for (seq, want) in cases {
        let got = stopping_decision(seq).map_err(|e| e.to_string())?;
        ensure!(got == want, "{seq:?} -> round {got}, expected {want}");
    }
    Ok("rounds 3, 2, 2".into())
}

fn bidirectional_rule() -> Result<String, String> {
    ensure!(certainty_for(5, 7, 6, false) == Certainty::Keep, "(5,7) should be KEEP");
    ensure!(certainty_for(7, 5, 6, false) == Certainty::Keep, "(7,5) should be KEEP");
    ensure!(certainty_for(5, 5, 6, false) == Certainty::Ignore, "(5,5) should be IGNORE");
    // The rule as applied by a full forge run.
    let cfg = PipelineConfig::default();
    let settings = cfg.forge_settings().map_err(|e| e.to_string())?;
    let s = scenario("urban-01").unwrap();
    let set = forge_sequence(&scenario_sequence(&s, &[0, 1, 2, 3]), &settings, 1).map_err(|e| e.to_string())?;
    let mut checked = 0;
    let mut one_sided = 0;
    for l in set.iter().filter(|l| l.provenance == evlabel::pipeline::Provenance::Detected) {
        let unc = soft_uncertain_with(&l.bbox, &settings.thresholds, settings.options.soft_rule);
        let want = certainty_for(l.track_len_fwd, l.track_len_bwd, 6, unc);
        ensure!(l.certainty == want, "label {l:?} tagged {:?}", l.certainty);
        if (l.track_len_fwd < 6) != (l.track_len_bwd < 6) {
            one_sided += 1;
        }
        checked += 1;
    }
    Ok(format!("(5,7) KEEP, (5,5) IGNORE; rule holds on {checked} forged labels ({one_sided} short in one direction only)"))
}

fn nms_and_matching_oracles() -> Result<String, String> {
    let mut rng = SeededRng::new(0xA11CE);
    for inst in 0..1000 {
        let n = 1 + rng.below(50) as usize;
        let boxes: Vec<DetBox> = (0..n).map(|_| random_box(&mut rng, 0, 2, 150.0)).collect();
        let tau = rng.range(0.1, 0.9);
        let class_aware = inst % 4 != 0;
        let got: BTreeSet<usize> = nms_indices(&boxes, tau, class_aware).unwrap().into_iter().collect();
        let want: BTreeSet<usize> = brute_nms(&boxes, tau, class_aware).into_iter().collect();
        ensure!(got == want, "nms instance {inst}: {got:?} vs {want:?}");
    }
    for inst in 0..1000 {
        let nt = rng.below(26) as usize;
        let nb = rng.below(26) as usize;
        let tracks: Vec<(u64, DetBox)> = (0..nt).map(|i| (1000 - i as u64 * 7, random_box(&mut rng, 0, 2, 120.0))).collect();
        let boxes: Vec<DetBox> = (0..nb).map(|_| random_box(&mut rng, 0, 2, 120.0)).collect();
        let got: BTreeSet<(usize, usize)> = greedy_match(&tracks, &boxes, 0.3).into_iter().collect();
        let want: BTreeSet<(usize, usize)> = reference_greedy(&tracks, &boxes, 0.3).into_iter().collect();
        ensure!(got == want, "greedy instance {inst} differs from brute-force greedy");
    }
    for inst in 0..1000 {
        // Tracks in well separated cells: each detection can only ever
        // match the track of its own cell, where greedy is optimal.
        let cells = 1 + rng.below(25) as usize;
        let mut tracks = Vec::new();
        let mut boxes = Vec::new();
        for c in 0..cells {
            let (ox, oy) = ((c % 5) as f64 * 200.0, (c / 5) as f64 * 200.0);
            let cls = rng.below(2) as u32;
            let tb = DetBox::certain(ox + 50.0, oy + 50.0, rng.range(30.0, 60.0), rng.range(30.0, 60.0), cls, 0, 2);
            for _ in 0..rng.below(3) {
                let mut b = tb.translated(rng.normal() * 6.0, rng.normal() * 6.0);
                if rng.bernoulli(0.2) {
                    b.class_id = 1 - cls;
                }
                boxes.push(b);
            }
            tracks.push((c as u64, tb));
        }
        rng.shuffle(&mut boxes);
        let mut got: Vec<(usize, usize)> = greedy_match(&tracks, &boxes, 0.45);
        got.sort();
        let plain: Vec<DetBox> = tracks.iter().map(|t| t.1.clone()).collect();
        let want = optimal_assignment(&plain, &boxes, 0.45);
        ensure!(got == want, "separated instance {inst}: greedy {got:?} vs optimal {want:?}");
    }
    Ok("1000 NMS, 1000 dense greedy, 1000 separated optimal-assignment instances".into())
}

fn map_oracle() -> Result<String, String> {
    let mut rng = SeededRng::new(77);
    let mut done = 0;
    let mut worst: f64 = 0.0;
    while done < 200 {
        let frames = 1 + rng.below(3) as usize;
        let n_gt = rng.below(9) as usize;
        let mut gt: Vec<Vec<DetBox>> = vec![Vec::new(); frames];
        let mut pred: Vec<Vec<DetBox>> = vec![Vec::new(); frames];
        for _ in 0..n_gt {
            let t = rng.below(frames as u64) as usize;
            let g = random_box(&mut rng, t, 2, 100.0);
            if rng.bernoulli(0.8) {
                let mut p = g.translated(rng.normal() * 3.0, rng.normal() * 3.0);
                p.p_obj = rng.range(0.01, 1.0);
                pred[t].push(p);
            }
            gt[t].push(g);
        }
        let n_fp = rng.below((20 - 2 * n_gt.min(10)) as u64 + 1) as usize;
        for _ in 0..n_fp {
            let t = rng.below(frames as u64) as usize;
            pred[t].push(random_box(&mut rng, t, 2, 100.0));
        }
        let filter = if rng.bernoulli(0.5) { EvalFilter { min_diagonal: 20.0, min_side: 8.0 } } else { EvalFilter::none() };
        let Some(want) = brute_map(&pred, &gt, &filter) else { continue };
        let got = mean_ap(&pred, &gt, &filter, IouSet::Coco).map_err(|e| e.to_string())?.map;
        worst = worst.max((got - want).abs());
        ensure!((got - want).abs() <= 1e-9, "instance {done}: mean_ap {got} vs oracle {want}");
        done += 1;
    }
    Ok(format!("200 instances, max |diff| = {worst:.2e}"))
}

fn gradient_check() -> Result<String, String> {
    let mut worst: f64 = 0.0;
    let mut masked_params = 0usize;
    let mut total_params = 0usize;
    for seed in 0..120u64 {
        let mut rng = SeededRng::new(seed);
        let grid = AnchorGrid::for_image(&[8, 16], 48, 48).unwrap();
        let rand_box = |rng: &mut SeededRng| {
            let w = rng.range(8.0, 30.0);
            let h = rng.range(8.0, 30.0);
            DetBox::certain(rng.range(0.0, 48.0 - w), rng.range(0.0, 48.0 - h), w, h, rng.below(2) as u32, 0, 2)
        };
        let keep: Vec<DetBox> = (0..1 + rng.below(3)).map(|_| rand_box(&mut rng)).collect();
        let ignore: Vec<DetBox> = (0..1 + rng.below(2)).map(|_| rand_box(&mut rng)).collect();
        let pred = random_prediction(&mut rng, grid.len(), 2);
        let asg = assign(&grid, &keep, &ignore, Some(&pred), &AssignParams::default()).map_err(|e| e.to_string())?;
        let grad = loss_gradient(&grid, &pred, &asg).map_err(|e| e.to_string())?.flatten();
        for (i, &g) in grad.iter().enumerate() {
            total_params += 1;
            if asg.r[anchor_of(&pred, i)] {
                masked_params += 1;
                ensure!(g == 0.0, "seed {seed}: masked parameter {i} has gradient {g}");
                continue;
            }
            let fd = central_difference(&grid, &pred, &asg, i, 1e-5);
            let err = relative_error(g, fd);
            worst = worst.max(err);
            ensure!(err < 1e-4, "seed {seed}: parameter {i} analytic {g} vs numeric {fd} (rel {err:.2e})");
        }
    }
    ensure!(masked_params > 0, "no masked anchors generated");
    Ok(format!("120 seeds, {total_params} parameters, max rel err {worst:.2e}, {masked_params} masked gradients exactly 0"))
}

fn flip_involutions() -> Result<String, String> {
    let mut rng = SeededRng::new(4242);
    for inst in 0..1000 {
        let (w, h) = (1 + rng.below(16) as u16, 1 + rng.below(12) as u16);
        let bins = 1 + rng.below(5) as usize;
        let window = bins as u64 * (1 + rng.below(40));
        let windows = 1 + rng.below(6);
        let s = random_stream(&mut rng, w, h, window * windows, 600);
        ensure!(time_flip_stream(&time_flip_stream(&s)) == s, "stream {inst}: time flip is not an involution");
        ensure!(hflip_stream(&hflip_stream(&s)) == s, "stream {inst}: h-flip is not an involution");
        let sat = if rng.bernoulli(0.5) { Some(1 + rng.below(3) as u32) } else { None };
        let base = build_histograms(&s, window, bins, sat).unwrap();
        let tf = build_histograms(&time_flip_stream(&s), window, bins, sat).unwrap();
        let hf = build_histograms(&hflip_stream(&s), window, bins, sat).unwrap();
        let n = base.len();
        for k in 0..n {
            for b in 0..bins {
                for pol in 0..2 {
                    for y in 0..h as usize {
                        for x in 0..w as usize {
                            let v = base[k].get(2 * b + pol, y, x);
                            ensure!(tf[n - 1 - k].get(2 * (bins - 1 - b) + (1 - pol), y, x) == v, "stream {inst}: time-flip commutation fails");
                            ensure!(hf[k].get(2 * b + pol, y, w as usize - 1 - x) == v, "stream {inst}: h-flip commutation fails");
                        }
                    }
                }
            }
        }
    }
    for inst in 0..1000 {
        let steps = 1 + rng.below(50) as usize;
        let width = 64.0 + rng.below(400) as f64;
        let boxes: Vec<DetBox> = (0..20)
            .map(|_| {
                let t = rng.below(steps as u64) as usize;
                let mut b = random_box(&mut rng, t, 3, width - 60.0);
                // quarter-pixel coordinates make mirroring exact in binary floating point
                b.x = (b.x * 4.0).round() / 4.0;
                b.w = (b.w * 4.0).round() / 4.0;
                b
            })
            .collect();
        for v in TtaVariant::all(steps, width) {
            let back = unflip_boxes(&unflip_boxes(&boxes, &v).unwrap(), &v).unwrap();
            ensure!(back == boxes, "box set {inst}: unflip twice differs for {}", v.name());
        }
    }
    Ok("1000 streams (involutions + histogram commutation), 1000 box sets x 4 variants".into())
}

fn synthetic_claims() -> Result<String, String> {
    let settings = PipelineConfig::default().forge_settings().map_err(|e| e.to_string())?;
    let all = [0, 1, 2, 3];
    let pr = |set: &evlabel::pipeline::PseudoLabelSet, gt: &[Vec<DetBox>]| {
        pseudo_label_pr(set, &gt_map(gt), &BTreeSet::new(), FrameMode::SkippedFrames, 0.75).unwrap()
    };

    // Tracking adds precision.
    let s = scenario("fp-storm").unwrap();
    let out = generate(&s).unwrap();
    let seq = scenario_sequence(&s, &all);
    let forged = forge_sequence(&seq, &settings, 1).map_err(|e| e.to_string())?;
    let merged = tta_merge_frames(&seq, &settings.options).map_err(|e| e.to_string())?;
    let naive = hard_filter_only(&s.name, &merged, &settings.thresholds).map_err(|e| e.to_string())?;
    let (f, n) = (pr(&forged, &out.gt), pr(&naive, &out.gt));
    ensure!(f.precision() - n.precision() >= 0.1, "fp-storm precision {:.3} vs naive {:.3}", f.precision(), n.precision());
    ensure!(f.recall() >= n.recall(), "fp-storm recall {:.3} below naive {:.3}", f.recall(), n.recall());

    // TTA adds recall.
    let s2 = scenario("static-car").unwrap();
    let gt2 = generate(&s2).unwrap().gt;
    let with_tta = forge_sequence(&scenario_sequence(&s2, &all), &settings, 1).map_err(|e| e.to_string())?;
    let fwd_only = forge_sequence(&scenario_sequence(&s2, &[0]), &settings, 1).map_err(|e| e.to_string())?;
    let (rt, rf) = (pr(&with_tta, &gt2).recall(), pr(&fwd_only, &gt2).recall());
    ensure!(rt >= rf, "static-car TTA recall {rt:.3} below forward-only {rf:.3}");

    // A fast object visible for four frames never yields KEEP labels.
    let s3 = scenario("fast-crosser").unwrap();
    let gt3 = generate(&s3).unwrap().gt;
    let crosser: Vec<DetBox> = s3.ground_truth().into_iter().flatten().filter(|b| b.w == 50.0 && b.h == 35.0).collect();
    ensure!(crosser.len() == 4, "crosser visible {} frames", crosser.len());
    let forged3 = forge_sequence(&scenario_sequence(&s3, &all), &settings, 1).map_err(|e| e.to_string())?;
    let mut hits = 0;
    for l in forged3.iter() {
        if crosser.iter().any(|g| g.t_step == l.bbox.t_step && oracle_iou(g, &l.bbox) > 0.3) {
            hits += 1;
            ensure!(l.certainty == Certainty::Ignore, "crosser label {l:?} is KEEP");
        }
    }
    ensure!(hits >= 4, "only {hits} labels found on the crosser");
    let _ = gt3;
    Ok(format!(
        "fp-storm precision {:.3} vs {:.3} (recall {:.3} vs {:.3}); static-car recall {rt:.3} vs {rf:.3}; crosser {hits} labels all IGNORE",
        f.precision(),
        n.precision(),
        f.recall(),
        n.recall()
    ))
}

fn split_counts() -> Result<String, String> {
    let mut index = LabelIndex::new();
    index.insert("seq".into(), (0..100).map(|i| i * 50_000).collect());
    let w = wsod_split(&index, 0.05).map_err(|e| e.to_string())?;
    let kept = &w.kept["seq"];
    ensure!(kept.len() == 5, "kept {} labels", kept.len());
    ensure!(*kept == vec![0, 20, 40, 60, 80].into_iter().map(|i| i * 50_000).collect::<Vec<u64>>(), "not stride-uniform: {kept:?}");
    let mut rng = SeededRng::new(9);
    for trial in 0..200 {
        let mut idx = LabelIndex::new();
        for s in 0..1 + rng.below(30) {
            idx.insert(format!("s{s:02}"), (0..rng.below(200)).collect());
        }
        let total: usize = idx.values().map(Vec::len).sum();
        if total == 0 {
            continue;
        }
        let max = idx.values().map(Vec::len).max().unwrap();
        let ratio = rng.range(0.01, 0.9);
        let split = ssod_split(&idx, ratio, trial).map_err(|e| e.to_string())?;
        let k = split.total_kept() as f64;
        let lo = ratio * total as f64;
        ensure!(k >= lo && k < lo + max as f64, "trial {trial}: kept {k} outside [{lo}, {})", lo + max as f64);
    }
    Ok("WSOD 5 of 100 at stride 20; SSOD bounds hold on 200 random indexes".into())
}

fn main() {
    let criteria: [(&str, Duration, Check); 10] = [
        ("tracker decay arithmetic", Duration::from_secs(1), tracker_decay),
        ("threshold derivation", Duration::from_secs(1), threshold_derivation),
        ("stopping criterion", Duration::from_secs(1), stopping_rule),
        ("bidirectional rule", Duration::from_secs(1), bidirectional_rule),
        ("nms / greedy matching oracles", Duration::from_secs(30), nms_and_matching_oracles),
        ("mean_ap oracle", Duration::from_secs(30), map_oracle),
        ("masked-loss gradient", Duration::from_secs(60), gradient_check),
        ("flip involutions", Duration::from_secs(30), flip_involutions),
        ("synthetic qualitative claims", Duration::from_secs(120), synthetic_claims),
        ("split counts", Duration::from_secs(1), split_counts),
    ];
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if elapsed > budget => Err(format!("{msg}; took {elapsed:.2?}, budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(msg) => println!("PASS  {name:<32} {elapsed:>10.2?}  {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL  {name:<32} {elapsed:>10.2?}  {msg}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
