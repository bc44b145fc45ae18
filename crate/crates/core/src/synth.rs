//! Seeded synthetic scenarios: ground-truth trajectories, noisy detector
//! outputs per TTA variant and schematic event streams.
//!
//! Randomness comes from independent xoshiro256** streams per purpose, so
//! the identity-variant detections do not depend on which other variants
//! or events are generated.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::evrep::{Event, EventStream};
use crate::geometry::DetBox;
use crate::rng::SeededRng;
use crate::tta::TtaVariant;

/// Top-left corner of an object at a (fractional) timestep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class_id: u32,
    /// First visible timestep.
    pub spawn_t: usize,
    /// First timestep no longer visible.
    pub despawn_t: usize,
    /// Piecewise-linear path, sorted by `t`; held constant beyond its ends.
    pub trajectory: Vec<Waypoint>,
    pub size: (f64, f64),
}

impl ObjectSpec {
    pub fn position(&self, t: f64) -> (f64, f64) {
        let tr = &self.trajectory;
        let first = tr[0];
        let last = tr[tr.len() - 1];
        if t <= first.t {
            return (first.x, first.y);
        }
        if t >= last.t {
            return (last.x, last.y);
        }
        let i = tr.windows(2).position(|w| t <= w[1].t).expect("t inside trajectory span");
        let (a, b) = (tr[i], tr[i + 1]);
        let alpha = (t - a.t) / (b.t - a.t);
        (a.x + (b.x - a.x) * alpha, a.y + (b.y - a.y) * alpha)
    }

    fn displacement(&self, t: usize) -> (f64, f64) {
        let (x1, y1) = self.position(t as f64);
        let (x0, y0) = self.position(t as f64 - 1.0);
        (x1 - x0, y1 - y0)
    }

    fn linear(class_id: u32, spawn_t: usize, despawn_t: usize, from: (f64, f64), velocity: (f64, f64), size: (f64, f64)) -> Self {
        let span = despawn_t.saturating_sub(spawn_t) as f64;
        ObjectSpec {
            class_id,
            spawn_t,
            despawn_t,
            trajectory: vec![
                Waypoint { t: spawn_t as f64, x: from.0, y: from.1 },
                Waypoint { t: spawn_t as f64 + span, x: from.0 + velocity.0 * span, y: from.1 + velocity.1 * span },
            ],
            size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub miss_prob_base: f64,
    /// Miss rate for objects moving less than half a pixel per step.
    pub miss_prob_static: f64,
    /// Expected false positives alive per frame.
    pub fp_rate: f64,
    /// Mean false-positive lifetime in frames (geometric).
    pub fp_lifetime: f64,
    pub jitter_sigma: f64,
    pub tp_score_range: (f64, f64),
    pub fp_score_range: (f64, f64),
}

impl NoiseModel {
    pub fn zero() -> Self {
        NoiseModel {
            miss_prob_base: 0.0,
            miss_prob_static: 0.0,
            fp_rate: 0.0,
            fp_lifetime: 1.0,
            jitter_sigma: 0.0,
            tp_score_range: (0.95, 0.95),
            fp_score_range: (0.5, 0.5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let range = |(lo, hi): (f64, f64)| lo > 0.0 && hi < 1.0 && lo <= hi;
        if !prob(self.miss_prob_base) || !prob(self.miss_prob_static) {
            return Err(invalid("miss probabilities must lie in [0, 1]"));
        }
        if !range(self.tp_score_range) || !range(self.fp_score_range) {
            return Err(invalid("score ranges must lie within (0, 1)"));
        }
        if self.fp_rate < 0.0 || self.fp_lifetime < 1.0 || self.jitter_sigma < 0.0 {
            return Err(invalid("need fp_rate >= 0, fp_lifetime >= 1, jitter_sigma >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub duration_steps: usize,
    pub width: u16,
    pub height: u16,
    pub window_us: u64,
    pub num_classes: usize,
    pub objects: Vec<ObjectSpec>,
    pub noise: NoiseModel,
}

impl Scenario {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        if self.duration_steps == 0 || self.width == 0 || self.height == 0 || self.window_us == 0 {
            return Err(invalid("scenario needs positive duration, sensor size and window"));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.trajectory.is_empty() || o.trajectory.windows(2).any(|w| w[1].t <= w[0].t) {
                return Err(invalid(format!("object {i}: trajectory must be non-empty with increasing t")));
            }
            if o.spawn_t >= o.despawn_t || (o.class_id as usize) >= self.num_classes || o.size.0 <= 0.0 || o.size.1 <= 0.0 {
                return Err(invalid(format!("object {i}: bad lifetime, class or size")));
            }
        }
        Ok(())
    }

    /// Ground-truth box of object `i` at `t`, clipped to the sensor.
    fn gt_box(&self, obj: &ObjectSpec, t: usize) -> Option<DetBox> {
        if t < obj.spawn_t || t >= obj.despawn_t {
            return None;
        }
        let (x, y) = obj.position(t as f64);
        let (w, h) = obj.size;
        let (x0, y0) = (x.max(0.0), y.max(0.0));
        let x1 = (x + w).min(self.width as f64);
        let y1 = (y + h).min(self.height as f64);
        if x1 - x0 < 2.0 || y1 - y0 < 2.0 {
            return None;
        }
        Some(DetBox::certain(x0, y0, x1 - x0, y1 - y0, obj.class_id, t, self.num_classes))
    }

    pub fn ground_truth(&self) -> Vec<Vec<DetBox>> {
        (0..self.duration_steps)
            .map(|t| self.objects.iter().filter_map(|o| self.gt_box(o, t)).collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub gt: Vec<Vec<DetBox>>,
    /// Identity-variant detector output per timestep.
    pub detections: Vec<Vec<DetBox>>,
    pub events: EventStream,
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed ^ (stream + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

const EVENT_STREAM: u64 = 1000;

struct FalsePositive {
    bbox: DetBox,
    velocity: (f64, f64),
    life: u32,
}

fn scores(rng: &mut SeededRng, class_id: u32, num_classes: usize, range: (f64, f64)) -> (f64, Vec<f64>) {
    let p_obj = rng.range(range.0, range.1);
    let main = rng.range(range.0, range.1);
    let p_iou = (0..num_classes)
        .map(|c| {
            let other = rng.range(0.0, 0.05);
            if c == class_id as usize {
                main
            } else {
                other
            }
        })
        .collect();
    (p_obj, p_iou)
}

/// Noisy detector output in the original frame for noise stream `stream`.
fn noisy_detections(s: &Scenario, stream: u64) -> Vec<Vec<DetBox>> {
    let mut rng = SeededRng::new(stream_seed(s.seed, stream));
    let n = &s.noise;
    let mut fps: Vec<FalsePositive> = Vec::new();
    let mut out = Vec::with_capacity(s.duration_steps);
    for t in 0..s.duration_steps {
        let mut frame = Vec::new();
        for obj in &s.objects {
            let Some(g) = s.gt_box(obj, t) else { continue };
            let (dx, dy) = obj.displacement(t);
            let miss_p = if dx.hypot(dy) < 0.5 { n.miss_prob_static } else { n.miss_prob_base };
            let missed = rng.bernoulli(miss_p);
            let jitter: Vec<f64> = (0..4).map(|_| rng.normal() * n.jitter_sigma).collect();
            let (p_obj, p_iou) = scores(&mut rng, g.class_id, s.num_classes, n.tp_score_range);
            if missed {
                continue;
            }
            frame.push(DetBox {
                x: g.x + jitter[0],
                y: g.y + jitter[1],
                w: (g.w + 0.5 * jitter[2]).max(1.0),
                h: (g.h + 0.5 * jitter[3]).max(1.0),
                p_obj,
                p_iou,
                ..g
            });
        }

        let births = rng.poisson(n.fp_rate / n.fp_lifetime);
        for _ in 0..births {
            let class_id = rng.below(s.num_classes as u64) as u32;
            let w = rng.range(15.0, 50.0).min(s.width as f64 - 1.0);
            let h = rng.range(15.0, 50.0).min(s.height as f64 - 1.0);
            let x = rng.range(0.0, s.width as f64 - w);
            let y = rng.range(0.0, s.height as f64 - h);
            let velocity = (rng.range(-2.0, 2.0), rng.range(-2.0, 2.0));
            let life = if n.fp_lifetime > 1.0 {
                let u = 1.0 - rng.uniform();
                1 + (u.ln() / (1.0 - 1.0 / n.fp_lifetime).ln()).floor() as u32
            } else {
                1
            };
            let (p_obj, p_iou) = scores(&mut rng, class_id, s.num_classes, n.fp_score_range);
            fps.push(FalsePositive { bbox: DetBox { x, y, w, h, class_id, t_step: t, p_obj, p_iou }, velocity, life });
        }
        for fp in fps.iter_mut() {
            fp.bbox.t_step = t;
            frame.push(fp.bbox.clone());
            fp.bbox = fp.bbox.translated(fp.velocity.0, fp.velocity.1);
            fp.life -= 1;
        }
        fps.retain(|fp| fp.life > 0);
        out.push(frame);
    }
    out
}

fn synth_events(s: &Scenario) -> EventStream {
    const EVENTS_PER_PX: f64 = 0.04;
    const BACKGROUND_PER_STEP: u64 = 20;
    let mut rng = SeededRng::new(stream_seed(s.seed, EVENT_STREAM));
    let (wd, ht) = (s.width as f64, s.height as f64);
    let mut events = Vec::new();
    for t in 0..s.duration_steps {
        let t0 = t as u64 * s.window_us;
        for obj in &s.objects {
            let Some(g) = s.gt_box(obj, t) else { continue };
            let (dx, dy) = obj.displacement(t);
            let perimeter = 2.0 * (g.w + g.h);
            let count = (dx.hypot(dy) * perimeter * EVENTS_PER_PX).round() as u64;
            for _ in 0..count {
                let along = rng.range(0.0, perimeter);
                let (px, py, nx, ny) = if along < g.w {
                    (g.x + along, g.y, 0.0, -1.0)
                } else if along < g.w + g.h {
                    (g.x + g.w, g.y + along - g.w, 1.0, 0.0)
                } else if along < 2.0 * g.w + g.h {
                    (g.x + g.w - (along - g.w - g.h), g.y + g.h, 0.0, 1.0)
                } else {
                    (g.x, g.y + g.h - (along - 2.0 * g.w - g.h), -1.0, 0.0)
                };
                let dt = rng.below(s.window_us);
                let leading = nx * dx + ny * dy > 0.0;
                events.push(Event {
                    x: px.clamp(0.0, wd - 1.0) as u16,
                    y: py.clamp(0.0, ht - 1.0) as u16,
                    t: t0 + dt,
                    p: if leading { 1 } else { -1 },
                });
            }
        }
        for _ in 0..BACKGROUND_PER_STEP {
            let x = rng.below(s.width as u64) as u16;
            let y = rng.below(s.height as u64) as u16;
            let dt = rng.below(s.window_us);
            let p = if rng.bernoulli(0.5) { 1 } else { -1 };
            events.push(Event { x, y, t: t0 + dt, p });
        }
    }
    events.sort_by_key(|e| e.t);
    EventStream { events, width: s.width, height: s.height, duration_us: s.duration_steps as u64 * s.window_us }
}

/// Ground truth, identity detections and events for a scenario.
pub fn generate(s: &Scenario) -> Result<SynthOutput> {
    s.validate()?;
    let gt = s.ground_truth();
    let detections = noisy_detections(s, 0);
    let events = synth_events(s);
    Ok(SynthOutput { gt, detections, events })
}

/// One independent noisy detector run per variant, expressed in that
/// variant's flipped frame (time-reversed and/or mirrored), as a detector
/// run on the transformed stream would report it.
pub fn generate_variants(s: &Scenario, variants: &[TtaVariant]) -> Result<Vec<(TtaVariant, Vec<DetBox>)>> {
    s.validate()?;
    variants
        .iter()
        .enumerate()
        .map(|(k, v)| {
            if v.num_timesteps != s.duration_steps {
                return Err(invalid(format!("variant spans {} steps, scenario {}", v.num_timesteps, s.duration_steps)));
            }
            let frames = noisy_detections(s, k as u64);
            let flat: Vec<DetBox> = frames.into_iter().flatten().collect();
            let mut flipped = crate::tta::unflip_boxes(&flat, v)?;
            flipped.sort_by_key(|b| b.t_step);
            Ok((*v, flipped))
        })
        .collect()
}

/// The four TTA variants of a scenario.
pub fn all_variants(s: &Scenario) -> [TtaVariant; 4] {
    TtaVariant::all(s.duration_steps, s.width as f64)
}

fn gen1_scenario(name: &str, seed: u64, duration_steps: usize, objects: Vec<ObjectSpec>, noise: NoiseModel) -> Scenario {
    Scenario {
        name: name.to_string(),
        seed,
        duration_steps,
        width: 304,
        height: 240,
        window_us: 50_000,
        num_classes: 2,
        objects,
        noise,
    }
}

const CAR: u32 = 0;
const PEDESTRIAN: u32 = 1;

/// Named scenarios reproducing typical pseudo-labeling failure modes.
pub fn scenario_library() -> Vec<Scenario> {
    let static_car = gen1_scenario(
        "static-car",
        11,
        60,
        vec![
            ObjectSpec::linear(CAR, 0, 60, (40.0, 90.0), (0.0, 0.0), (70.0, 45.0)),
            ObjectSpec::linear(CAR, 0, 60, (190.0, 130.0), (0.0, 0.0), (64.0, 42.0)),
        ],
        NoiseModel {
            miss_prob_base: 0.1,
            miss_prob_static: 0.5,
            fp_rate: 0.2,
            fp_lifetime: 1.0,
            jitter_sigma: 0.8,
            tp_score_range: (0.72, 0.95),
            fp_score_range: (0.3, 0.75),
        },
    );

    let crowd_objects = (0..10)
        .map(|i| {
            let col = (i % 5) as f64;
            let row = (i / 5) as f64;
            let dir = if i % 2 == 0 { 1.0 } else { -1.0 };
            ObjectSpec::linear(
                PEDESTRIAN,
                0,
                40,
                (80.0 + 24.0 * col + 6.0 * row, 90.0 + 30.0 * row),
                (0.6 * dir, 0.15 * dir),
                (20.0, 44.0),
            )
        })
        .collect();
    let crowd = gen1_scenario(
        "crowd",
        23,
        40,
        crowd_objects,
        NoiseModel {
            miss_prob_base: 0.15,
            miss_prob_static: 0.3,
            fp_rate: 0.3,
            fp_lifetime: 1.0,
            jitter_sigma: 0.7,
            tp_score_range: (0.4, 0.9),
            fp_score_range: (0.2, 0.5),
        },
    );

    let fast_crosser = gen1_scenario(
        "fast-crosser",
        5,
        30,
        vec![
            ObjectSpec::linear(CAR, 0, 30, (20.0, 150.0), (2.0, 0.0), (60.0, 40.0)),
            ObjectSpec::linear(CAR, 10, 14, (60.0, 40.0), (40.0, 0.0), (50.0, 35.0)),
        ],
        NoiseModel {
            miss_prob_base: 0.0,
            miss_prob_static: 0.0,
            fp_rate: 0.0,
            fp_lifetime: 1.0,
            jitter_sigma: 0.5,
            tp_score_range: (0.8, 0.95),
            fp_score_range: (0.3, 0.5),
        },
    );

    let fp_storm = gen1_scenario(
        "fp-storm",
        17,
        50,
        vec![
            ObjectSpec::linear(CAR, 0, 50, (10.0, 20.0), (3.0, 0.5), (60.0, 40.0)),
            ObjectSpec::linear(CAR, 0, 50, (230.0, 100.0), (-2.5, 0.0), (56.0, 38.0)),
            ObjectSpec::linear(CAR, 0, 50, (120.0, 180.0), (1.0, -0.4), (62.0, 42.0)),
        ],
        NoiseModel {
            miss_prob_base: 0.05,
            miss_prob_static: 0.05,
            fp_rate: 4.0,
            fp_lifetime: 1.0,
            jitter_sigma: 0.6,
            tp_score_range: (0.75, 0.95),
            fp_score_range: (0.6, 0.95),
        },
    );

    let urban = gen1_scenario(
        "urban-01",
        1,
        80,
        vec![
            ObjectSpec::linear(CAR, 0, 80, (0.0, 30.0), (2.5, 0.2), (64.0, 40.0)),
            ObjectSpec::linear(CAR, 0, 80, (240.0, 70.0), (-1.8, 0.0), (58.0, 38.0)),
            ObjectSpec::linear(CAR, 0, 80, (120.0, 170.0), (0.0, 0.0), (70.0, 44.0)),
            ObjectSpec::linear(CAR, 20, 60, (10.0, 120.0), (4.0, 0.0), (54.0, 36.0)),
            ObjectSpec::linear(PEDESTRIAN, 0, 80, (30.0, 160.0), (0.8, 0.0), (18.0, 42.0)),
            ObjectSpec::linear(PEDESTRIAN, 0, 80, (52.0, 162.0), (0.7, 0.0), (18.0, 40.0)),
            ObjectSpec::linear(PEDESTRIAN, 10, 70, (260.0, 150.0), (-0.9, 0.1), (20.0, 44.0)),
            ObjectSpec::linear(PEDESTRIAN, 30, 80, (150.0, 20.0), (0.3, 0.6), (18.0, 40.0)),
            ObjectSpec::linear(CAR, 40, 43, (40.0, 90.0), (45.0, 0.0), (50.0, 34.0)),
        ],
        NoiseModel {
            miss_prob_base: 0.15,
            miss_prob_static: 0.4,
            fp_rate: 1.0,
            fp_lifetime: 1.5,
            jitter_sigma: 1.0,
            tp_score_range: (0.55, 0.95),
            fp_score_range: (0.3, 0.8),
        },
    );

    vec![static_car, crowd, fast_crosser, fp_storm, urban]
}

pub fn scenario(name: &str) -> Result<Scenario> {
    scenario_library()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| invalid(format!("unknown scenario {name:?}")))
}
