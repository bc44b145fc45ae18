//! Independent reference implementations and random instance generators
//! shared by the integration and acceptance tests.
#![allow(dead_code)]

use evlabel::assign::{AnchorAssignment, AnchorGrid, AnchorPrediction};
use evlabel::eval::EvalFilter;
use evlabel::evrep::{Event, EventStream};
use evlabel::geometry::DetBox;
use evlabel::rng::SeededRng;
use pathfinding::prelude::{kuhn_munkres, Matrix};

pub fn random_box(rng: &mut SeededRng, t: usize, classes: usize, extent: f64) -> DetBox {
    let w = rng.range(4.0, 60.0);
    let h = rng.range(4.0, 60.0);
    let c = rng.below(classes as u64) as u32;
    DetBox {
        x: rng.range(0.0, extent),
        y: rng.range(0.0, extent),
        w,
        h,
        class_id: c,
        t_step: t,
        p_obj: rng.range(0.01, 1.0),
        p_iou: (0..classes).map(|_| rng.range(0.01, 1.0)).collect(),
    }
}

/// IoU from corner coordinates, written independently of the library.
pub fn oracle_iou(a: &DetBox, b: &DetBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = (a.x, a.y, a.x + a.w, a.y + a.h);
    let (bx1, by1, bx2, by2) = (b.x, b.y, b.x + b.w, b.y + b.h);
    let ix = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let iy = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.w * a.h + b.w * b.h - inter)
}

fn score(b: &DetBox) -> f64 {
    b.p_obj * b.p_iou.iter().cloned().fold(f64::MIN, f64::max)
}

/// O(n^2) NMS: walk boxes from best to worst score (stable on ties) and
/// keep a box unless a kept box of the same class overlaps it too much.
pub fn brute_nms(boxes: &[DetBox], tau: f64, class_aware: bool) -> Vec<usize> {
    let mut rank: Vec<usize> = (0..boxes.len()).collect();
    for i in 1..rank.len() {
        let mut j = i;
        while j > 0 && score(&boxes[rank[j - 1]]) < score(&boxes[rank[j]]) {
            rank.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut kept: Vec<usize> = Vec::new();
    for &i in &rank {
        let suppressed = kept.iter().any(|&k| {
            (!class_aware || boxes[k].class_id == boxes[i].class_id) && oracle_iou(&boxes[k], &boxes[i]) > tau
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

/// Repeatedly take the single best remaining (track, box) pair.
pub fn reference_greedy(tracks: &[(u64, DetBox)], boxes: &[DetBox], tau: f64) -> Vec<(usize, usize)> {
    let mut t_free = vec![true; tracks.len()];
    let mut b_free = vec![true; boxes.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for ti in (0..tracks.len()).filter(|&i| t_free[i]) {
            for bi in (0..boxes.len()).filter(|&i| b_free[i]) {
                if tracks[ti].1.class_id != boxes[bi].class_id {
                    continue;
                }
                let v = oracle_iou(&tracks[ti].1, &boxes[bi]);
                if v <= tau {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bv, bt, bb)) => {
                        v > bv || (v == bv && (tracks[ti].0 < tracks[bt].0 || (tracks[ti].0 == tracks[bt].0 && bi < bb)))
                    }
                };
                if better {
                    best = Some((v, ti, bi));
                }
            }
        }
        match best {
            Some((_, ti, bi)) => {
                t_free[ti] = false;
                b_free[bi] = false;
                out.push((ti, bi));
            }
            None => return out,
        }
    }
}

/// Maximum-total-IoU one-to-one assignment over eligible pairs (same class,
/// IoU above `tau`), by Kuhn-Munkres. Returns sorted `(track, box)` pairs.
pub fn optimal_assignment(tracks: &[DetBox], boxes: &[DetBox], tau: f64) -> Vec<(usize, usize)> {
    const SCALE: f64 = 1e12;
    let n = tracks.len().max(boxes.len());
    if n == 0 {
        return Vec::new();
    }
    let weight = |ti: usize, bi: usize| -> i64 {
        if ti >= tracks.len() || bi >= boxes.len() || tracks[ti].class_id != boxes[bi].class_id {
            return 0;
        }
        let v = oracle_iou(&tracks[ti], &boxes[bi]);
        if v > tau {
            (v * SCALE).round() as i64
        } else {
            0
        }
    };
    let mut m = Matrix::new(n, n, 0i64);
    for ti in 0..n {
        for bi in 0..n {
            m[(ti, bi)] = weight(ti, bi);
        }
    }
    let (_, cols) = kuhn_munkres(&m);
    let mut out: Vec<(usize, usize)> = cols.iter().enumerate().filter(|&(t, &b)| weight(t, b) > 0).map(|(t, &b)| (t, b)).collect();
    out.sort();
    out
}

/// AP of one class at one IoU threshold following the COCO evaluation loop
/// literally: ground truth sorted non-ignored first, matching that stops at
/// the first ignored candidate once a regular match exists.
fn coco_ap(preds: &[(f64, usize, &DetBox)], gt: &[Vec<(&DetBox, bool)>], thr: f64) -> Option<f64> {
    let npos = gt.iter().flatten().filter(|g| !g.1).count();
    if npos == 0 {
        return None;
    }
    let sorted_gt: Vec<Vec<(&DetBox, bool)>> = gt
        .iter()
        .map(|f| {
            let mut v = f.clone();
            v.sort_by_key(|g| g.1);
            v
        })
        .collect();
    let mut gt_matched: Vec<Vec<bool>> = sorted_gt.iter().map(|f| vec![false; f.len()]).collect();
    let mut marks: Vec<(bool, bool)> = Vec::new(); // (tp, ignored)
    for &(_, frame, p) in preds {
        let g = &sorted_gt[frame];
        let mut best_iou = thr.min(1.0 - 1e-10);
        let mut m: Option<usize> = None;
        for gi in 0..g.len() {
            if gt_matched[frame][gi] {
                continue;
            }
            if let Some(mi) = m {
                if !g[mi].1 && g[gi].1 {
                    break;
                }
            }
            let v = oracle_iou(p, g[gi].0);
            if v < best_iou {
                continue;
            }
            best_iou = v;
            m = Some(gi);
        }
        match m {
            Some(gi) => {
                gt_matched[frame][gi] = true;
                marks.push((true, g[gi].1));
            }
            None => marks.push((false, false)),
        }
    }
    let mut points: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
    let (mut tp, mut fp) = (0.0, 0.0);
    for (is_tp, ignored) in marks {
        if ignored {
            continue;
        }
        if is_tp {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        points.push((tp / npos as f64, tp / (tp + fp)));
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let best = points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
        sum += best;
    }
    Some(sum / 101.0)
}

/// Brute-force COCO mAP over IoU thresholds 0.50:0.05:0.95.
pub fn brute_map(pred: &[Vec<DetBox>], gt: &[Vec<DetBox>], filter: &EvalFilter) -> Option<f64> {
    let rejects = |b: &DetBox| (b.w * b.w + b.h * b.h).sqrt() < filter.min_diagonal || b.w.min(b.h) < filter.min_side;
    let mut classes: Vec<u32> = gt.iter().flatten().filter(|b| !rejects(b)).map(|b| b.class_id).collect();
    classes.sort();
    classes.dedup();
    if classes.is_empty() {
        return None;
    }
    let mut class_aps = Vec::new();
    for &c in &classes {
        let g: Vec<Vec<(&DetBox, bool)>> = (0..gt.len().max(pred.len()))
            .map(|t| gt.get(t).map(|f| f.iter().filter(|b| b.class_id == c).map(|b| (b, rejects(b))).collect()).unwrap_or_default())
            .collect();
        let mut p: Vec<(f64, usize, &DetBox)> = pred
            .iter()
            .enumerate()
            .flat_map(|(t, f)| f.iter().filter(|b| b.class_id == c).map(move |b| (score(b), t, b)))
            .collect();
        p.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.x.partial_cmp(&b.2.x).unwrap()).then(a.2.y.partial_cmp(&b.2.y).unwrap()));
        let aps: Vec<f64> = (0..10).filter_map(|i| coco_ap(&p, &g, 0.5 + 0.05 * i as f64)).collect();
        class_aps.push(aps.iter().sum::<f64>() / aps.len() as f64);
    }
    Some(class_aps.iter().sum::<f64>() / class_aps.len() as f64)
}

/// Flat view of a prediction in `LossGradient::flatten` order.
pub fn flatten_prediction(p: &AnchorPrediction) -> Vec<f64> {
    let mut v = p.p_obj.clone();
    v.extend_from_slice(&p.p_iou);
    v.extend(p.delta.iter().flatten());
    v
}

pub fn set_flat(p: &mut AnchorPrediction, i: usize, value: f64) {
    let (n, nc) = (p.p_obj.len(), p.p_iou.len());
    if i < n {
        p.p_obj[i] = value;
    } else if i < n + nc {
        p.p_iou[i - n] = value;
    } else {
        let j = i - n - nc;
        p.delta[j / 4][j % 4] = value;
    }
}

/// Which anchor a flat parameter index belongs to.
pub fn anchor_of(p: &AnchorPrediction, i: usize) -> usize {
    let (n, nc) = (p.p_obj.len(), p.p_iou.len());
    if i < n {
        i
    } else if i < n + nc {
        (i - n) / p.num_classes
    } else {
        (i - n - nc) / 4
    }
}

/// Central finite difference of the total loss w.r.t. flat parameter `i`.
pub fn central_difference(grid: &AnchorGrid, pred: &AnchorPrediction, asg: &AnchorAssignment, i: usize, h: f64) -> f64 {
    let base = flatten_prediction(pred)[i];
    let mut plus = pred.clone();
    set_flat(&mut plus, i, base + h);
    let mut minus = pred.clone();
    set_flat(&mut minus, i, base - h);
    let lp = evlabel::assign::detection_loss(grid, &plus, asg).unwrap().total;
    let lm = evlabel::assign::detection_loss(grid, &minus, asg).unwrap().total;
    (lp - lm) / (2.0 * h)
}

/// Relative error with an absolute floor: where the true gradient vanishes
/// (e.g. IoU locally flat in an offset) the central difference is pure
/// round-off, about `ulp(loss) / h`, so near-zero gradients must agree to
/// `1e-4 * 1e-5` absolute instead.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Random prediction with probabilities away from the clamp region.
pub fn random_prediction(rng: &mut SeededRng, anchors: usize, classes: usize) -> AnchorPrediction {
    AnchorPrediction {
        num_classes: classes,
        p_obj: (0..anchors).map(|_| rng.range(0.05, 0.95)).collect(),
        p_iou: (0..anchors * classes).map(|_| rng.range(0.05, 0.95)).collect(),
        delta: (0..anchors).map(|_| [rng.range(-0.6, 0.6), rng.range(-0.6, 0.6), rng.range(-0.3, 1.5), rng.range(-0.3, 1.5)]).collect(),
    }
}

pub fn random_stream(rng: &mut SeededRng, width: u16, height: u16, duration_us: u64, max_events: usize) -> EventStream {
    let n = rng.below(max_events as u64 + 1) as usize;
    let mut events: Vec<Event> = (0..n)
        .map(|_| Event {
            x: rng.below(width as u64) as u16,
            y: rng.below(height as u64) as u16,
            t: rng.below(duration_us),
            p: if rng.bernoulli(0.5) { 1 } else { -1 },
        })
        .collect();
    events.sort_by_key(|e| e.t);
    EventStream::new(events, width, height, duration_us).unwrap()
}

/// Scenario detections packaged for the pipeline, restricted to the
/// variants whose index is listed (0 identity, 1 time-flip, 2 h-flip,
/// 3 both).
pub fn scenario_sequence(s: &evlabel::synth::Scenario, variants: &[usize]) -> evlabel::pipeline::SequenceDetections {
    let all = evlabel::synth::all_variants(s);
    let generated = evlabel::synth::generate_variants(s, &all).unwrap();
    evlabel::pipeline::SequenceDetections {
        id: s.name.clone(),
        num_steps: s.duration_steps,
        width: s.width as f64,
        variants: variants.iter().map(|&i| generated[i].clone()).collect(),
        gt: Default::default(),
    }
}

/// Ground truth of every timestep keyed for `pseudo_label_pr`.
pub fn gt_map(gt: &[Vec<DetBox>]) -> std::collections::BTreeMap<usize, Vec<DetBox>> {
    gt.iter().cloned().enumerate().collect()
}
