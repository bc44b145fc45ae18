use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use evlabel::assign::{assign, detection_loss, AnchorGrid, AnchorPrediction, AssignParams, LossBreakdown, TargetKind};
use evlabel::config::PipelineConfig;
use evlabel::error::{Error, Result};
use evlabel::eval::{mean_ap, pseudo_label_pr, stopping_decision, ClassMetrics, Counts, FrameMode, MetricsReport};
use evlabel::evrep::{build_histograms, read_csv, read_evb1, write_evb1};
use evlabel::geometry::DetBox;
use evlabel::io::{histograms_to_npy, DetectionFile, DetectionHeader, HistogramMeta};
use evlabel::pipeline::{forge_sequence, Certainty, LabelSource, PseudoLabelSet, SequenceDetections};
use evlabel::protocol::{split, LabelIndex, LabelSplit, SplitMode};
use evlabel::synth;
use evlabel::tta::{tta_merge, TtaVariant};

#[derive(Parser, Debug)]
#[command(name = "evlabel", version, about = "Offline pseudo-label refinement for event-camera detection")]
pub struct Cli {
    /// Pipeline configuration (TOML). Falls back to $LEOD_CONFIG, then defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for per-sequence parallelism (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Select which labels remain under a WSOD/SSOD/full protocol.
    Split {
        /// Label index JSON ({seq: [timestamps]}) or a detection file of ground truth.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build event histograms (NPY tensor plus JSON sidecar).
    Histogram {
        /// EVB1 file, or CSV (t_us,x,y,p) together with --width/--height/--duration-us.
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        window_us: Option<u64>,
        #[arg(long)]
        bins: Option<usize>,
        /// Per-cell ceiling; 0 disables.
        #[arg(long)]
        saturation: Option<u32>,
        #[arg(long)]
        width: Option<u16>,
        #[arg(long)]
        height: Option<u16>,
        #[arg(long)]
        duration_us: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge detections of the TTA variants (identity, time-flip, h-flip, both), given in that order.
    TtaMerge {
        #[arg(long, num_args = 1..=4, required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn detections into certainty-tagged pseudo labels.
    Forge {
        /// Merged detections, or 2-4 variant files merged on the fly.
        #[arg(long, num_args = 1..=4, required = true)]
        dets: Vec<PathBuf>,
        /// Ground truth to splice in at labeled timesteps.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Split restricting which ground-truth timesteps count as labeled.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        round: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-anchor targets for pseudo labels, plus a loss report with --preds.
    Assign {
        #[arg(long)]
        labels: PathBuf,
        /// Strides and input size, e.g. "8,16,32@240x304".
        #[arg(long)]
        grid: String,
        /// NDJSON of per-frame head outputs {seq, t, num_classes, p_obj, p_iou, delta}.
        #[arg(long)]
        preds: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Metrics: pseudo-label precision/recall, mAP, or the stopping round.
    Eval {
        /// Prediction / pseudo-label files; one per round for --mode stop.
        #[arg(long, num_args = 1.., required_unless_present = "precisions")]
        pred: Vec<PathBuf>,
        #[arg(long, required_unless_present = "precisions")]
        gt: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = EvalMode::Pr)]
        mode: EvalMode,
        /// Split file; labeled timesteps come from its kept lists.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Which annotated timesteps to score (pr mode).
        #[arg(long, value_enum)]
        frames: Option<Frames>,
        /// Annotated timesteps: every step of a GT sequence, or only those with boxes.
        #[arg(long, value_enum, default_value_t = Annotated::All)]
        annotated: Annotated,
        /// Precomputed per-round precisions for --mode stop.
        #[arg(long, value_delimiter = ',')]
        precisions: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a seeded synthetic dataset.
    Synth {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Mode {
    Wsod,
    Ssod,
    Full,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum EvalMode {
    Pr,
    Map,
    Stop,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Frames {
    Skipped,
    Labeled,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum Annotated {
    All,
    Boxes,
}

pub const VARIANT_FILES: [&str; 4] = ["det_fwd.ndjson", "det_tflip.ndjson", "det_hflip.ndjson", "det_thflip.ndjson"];

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let path = path.map(Path::to_path_buf).or_else(|| std::env::var_os("LEOD_CONFIG").map(PathBuf::from));
    match path {
        Some(p) => {
            let text = fs::read_to_string(&p).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?;
            PipelineConfig::from_toml(&text)
        }
        None => Ok(PipelineConfig::default()),
    }
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn write_detections(out: Option<&Path>, file: &DetectionFile) -> Result<()> {
    match out {
        Some(p) => file.write_path(p),
        None => file.write_to(BufWriter::new(std::io::stdout().lock())),
    }
}

fn pretty<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Split { labels, mode, ratio, seed, out } => cmd_split(&cfg, &labels, mode, ratio, seed, out.as_deref()),
        Command::Histogram { events, window_us, bins, saturation, width, height, duration_us, out } => {
            cmd_histogram(&cfg, &events, window_us, bins, saturation, (width, height, duration_us), &out)
        }
        Command::TtaMerge { inputs, out } => cmd_tta_merge(&cfg, &inputs, out.as_deref()),
        Command::Forge { dets, gt, split, round, out } => cmd_forge(&cfg, &dets, gt.as_deref(), split.as_deref(), round, out.as_deref()),
        Command::Assign { labels, grid, preds, out, report } => {
            cmd_assign(&cfg, &labels, &grid, preds.as_deref(), out.as_deref(), report.as_deref())
        }
        Command::Eval { pred, gt, mode, split, frames, annotated, precisions, out } => {
            cmd_eval(&cfg, &pred, gt.as_deref(), mode, split.as_deref(), frames, annotated, &precisions, out.as_deref())
        }
        Command::Synth { scenario, seed, out } => cmd_synth(&scenario, seed, &out),
    })
}

// ---------------------------------------------------------------------------
// split

fn read_label_index(path: &Path) -> Result<LabelIndex> {
    let text = fs::read_to_string(path)?;
    if text.trim_start().starts_with("{\"format\"") {
        let file = DetectionFile::from_ndjson(&text)?;
        let mut index = LabelIndex::new();
        for r in &file.records {
            index.entry(r.seq.clone()).or_default().push(r.t as u64);
        }
        for v in index.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        return Ok(index);
    }
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: label index must map sequence ids to timestamp lists: {e}", path.display())))
}

fn cmd_split(cfg: &PipelineConfig, labels: &Path, mode: Option<Mode>, ratio: Option<f64>, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let index = read_label_index(labels)?;
    let mode = match mode {
        Some(Mode::Wsod) => SplitMode::Wsod,
        Some(Mode::Ssod) => SplitMode::Ssod,
        Some(Mode::Full) => SplitMode::Full,
        None => cfg.protocol.mode,
    };
    let s = split(&index, mode, ratio.unwrap_or(cfg.protocol.ratio), seed.unwrap_or(cfg.protocol.seed))?;
    write_output(out, &(s.to_json() + "\n"))
}

fn read_split(path: &Path) -> Result<LabelSplit> {
    LabelSplit::from_json(&fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// histogram

fn cmd_histogram(
    cfg: &PipelineConfig,
    events: &Path,
    window_us: Option<u64>,
    bins: Option<usize>,
    saturation: Option<u32>,
    csv_meta: (Option<u16>, Option<u16>, Option<u64>),
    out: &Path,
) -> Result<()> {
    let is_csv = events.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let stream = if is_csv {
        let (Some(w), Some(h), Some(d)) = csv_meta else {
            return Err(Error::InvalidInput("CSV events need --width, --height and --duration-us".into()));
        };
        read_csv(BufReader::new(fs::File::open(events)?), w, h, d)?
    } else {
        read_evb1(BufReader::new(fs::File::open(events)?))?
    };
    let window = window_us.unwrap_or(cfg.histogram.window_us);
    let bins = bins.unwrap_or(cfg.histogram.bins);
    let sat = match saturation.unwrap_or(cfg.histogram.saturation) {
        0 => None,
        s => Some(s),
    };
    let hists = build_histograms(&stream, window, bins, sat)?;
    fs::write(out, histograms_to_npy(&hists)?)?;
    let meta = HistogramMeta::describe(&hists)?;
    fs::write(out.with_extension("json"), pretty(&meta)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// tta-merge / forge

fn check_compatible(files: &[DetectionFile]) -> Result<()> {
    let h0 = &files[0].header;
    for f in &files[1..] {
        let h = &f.header;
        if (h.width, h.height, h.num_steps) != (h0.width, h0.height, h0.num_steps) || h.classes != h0.classes {
            return Err(Error::InvalidInput("detection files disagree on sensor size, length or classes".into()));
        }
    }
    Ok(())
}

/// One `SequenceDetections` per sequence id, files matched to variants by position.
fn sequences_from_variants(files: &[DetectionFile]) -> Vec<SequenceDetections> {
    let h = &files[0].header;
    let variants = TtaVariant::all(h.num_steps, h.width as f64);
    let mut ids = BTreeSet::new();
    for f in files {
        ids.extend(f.sequence_ids());
    }
    ids.into_iter()
        .map(|id| SequenceDetections {
            id: id.clone(),
            num_steps: h.num_steps,
            width: h.width as f64,
            variants: files
                .iter()
                .zip(variants)
                .map(|(f, v)| (v, f.records.iter().filter(|r| r.seq == id).map(|r| r.to_box()).collect()))
                .collect(),
            gt: BTreeMap::new(),
        })
        .collect()
}

fn read_detection_files(paths: &[PathBuf]) -> Result<Vec<DetectionFile>> {
    let files = paths.iter().map(|p| DetectionFile::read_path(p)).collect::<Result<Vec<_>>>()?;
    check_compatible(&files)?;
    Ok(files)
}

fn cmd_tta_merge(cfg: &PipelineConfig, inputs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let files = read_detection_files(inputs)?;
    let settings = cfg.forge_settings()?;
    let seqs = sequences_from_variants(&files);
    let merged: Vec<(String, Vec<Vec<DetBox>>)> = seqs
        .par_iter()
        .map(|s| tta_merge(&s.variants, settings.options.tau_nms, settings.options.class_aware).map(|m| (s.id.clone(), m)))
        .collect::<Result<_>>()?;
    let mut header = files[0].header.clone();
    header.config_digest = Some(settings.digest.clone());
    header.round = None;
    let mut file = DetectionFile::new(header);
    for (id, frames) in &merged {
        file.push_frames(id, frames, LabelSource::Det);
    }
    write_detections(out, &file)
}

fn cmd_forge(cfg: &PipelineConfig, dets: &[PathBuf], gt: Option<&Path>, split_path: Option<&Path>, round: u32, out: Option<&Path>) -> Result<()> {
    let settings = cfg.forge_settings()?;
    let files = read_detection_files(dets)?;
    let header0 = files[0].header.clone();
    if header0.num_classes() != settings.thresholds.num_classes() {
        return Err(Error::InvalidInput(format!(
            "detections carry {} classes, config profile {:?} has {}",
            header0.num_classes(),
            cfg.thresholds.profile,
            settings.thresholds.num_classes()
        )));
    }
    let mut seqs = sequences_from_variants(&files);
    if let Some(gt_path) = gt {
        let gt_file = DetectionFile::read_path(gt_path)?;
        check_compatible(&[files[0].clone(), gt_file.clone()])?;
        let labeled: Option<LabelSplit> = split_path.map(read_split).transpose()?;
        let gt_frames = gt_file.frames();
        for s in seqs.iter_mut() {
            let Some(frames) = gt_frames.get(&s.id) else { continue };
            let steps: Vec<usize> = match &labeled {
                Some(sp) => sp.kept.get(&s.id).map(|v| v.iter().map(|&t| t as usize).collect()).unwrap_or_default(),
                None => (0..frames.len()).filter(|&t| !frames[t].is_empty()).collect(),
            };
            for t in steps {
                let boxes = frames.get(t).ok_or_else(|| Error::InvalidInput(format!("split timestep {t} beyond sequence {}", s.id)))?;
                s.gt.insert(t, boxes.clone());
            }
        }
    } else if split_path.is_some() {
        return Err(Error::InvalidInput("--split needs --gt".into()));
    }
    let sets: BTreeMap<String, PseudoLabelSet> = seqs
        .par_iter()
        .map(|s| forge_sequence(s, &settings, round).map(|set| (s.id.clone(), set)))
        .collect::<Result<_>>()?;
    let mut header = header0;
    header.config_digest = Some(settings.digest.clone());
    header.round = Some(round);
    let mut file = DetectionFile::new(header);
    for set in sets.values() {
        file.push_labels(set);
    }
    write_detections(out, &file)
}

// ---------------------------------------------------------------------------
// assign

fn parse_grid(spec: &str) -> Result<(Vec<u32>, usize, usize)> {
    let bad = || Error::InvalidInput(format!("grid {spec:?}: expected \"s1,s2,...@HxW\""));
    let (strides, size) = spec.split_once('@').ok_or_else(bad)?;
    let strides = strides.split(',').map(|s| s.trim().parse::<u32>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?;
    let (h, w) = size.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((strides, h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

#[derive(Debug, Deserialize)]
struct PredRecord {
    seq: String,
    t: usize,
    #[serde(flatten)]
    pred: AnchorPrediction,
}

#[derive(Debug, Serialize)]
struct AssignHeader<'a> {
    format: &'static str,
    strides: &'a [u32],
    height: usize,
    width: usize,
    num_anchors: usize,
    config_digest: String,
}

#[derive(Debug, Serialize)]
struct AssignRecord {
    seq: String,
    t: usize,
    /// `[anchor, keep box index, class]`; box indices follow the KEEP records of the frame in file order.
    positive: Vec<[usize; 3]>,
    /// Masked anchors with the IGNORE box index they trace to.
    ignored: Vec<[usize; 2]>,
}

#[derive(Debug, Serialize)]
struct FrameLoss {
    seq: String,
    t: usize,
    #[serde(flatten)]
    loss: LossBreakdown,
}

fn cmd_assign(cfg: &PipelineConfig, labels: &Path, grid_spec: &str, preds: Option<&Path>, out: Option<&Path>, report: Option<&Path>) -> Result<()> {
    let (strides, h, w) = parse_grid(grid_spec)?;
    let grid = AnchorGrid::for_image(&strides, h, w)?;
    let params = AssignParams { strategy: cfg.assign.strategy, center_radius: cfg.assign.center_radius, top_k: cfg.assign.top_k };
    let file = DetectionFile::read_path(labels)?;
    let mut predictions: BTreeMap<(String, usize), AnchorPrediction> = BTreeMap::new();
    if let Some(p) = preds {
        for (i, line) in BufReader::new(fs::File::open(p)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PredRecord = serde_json::from_str(&line).map_err(|e| Error::Format(format!("predictions line {}: {e}", i + 1)))?;
            predictions.insert((rec.seq, rec.t), rec.pred);
        }
    }
    let mut frames: BTreeMap<(String, usize), (Vec<DetBox>, Vec<DetBox>)> = BTreeMap::new();
    for r in &file.records {
        let entry = frames.entry((r.seq.clone(), r.t)).or_default();
        match r.cert {
            Certainty::Keep => entry.0.push(r.to_box()),
            Certainty::Ignore => entry.1.push(r.to_box()),
        }
    }
    for key in predictions.keys() {
        frames.entry(key.clone()).or_default();
    }
    let frames: Vec<_> = frames.into_iter().collect();
    let results: Vec<(AssignRecord, Option<FrameLoss>)> = frames
        .par_iter()
        .map(|((seq, t), (keep, ignore))| {
            let pred = predictions.get(&(seq.clone(), *t));
            let asg = assign(&grid, keep, ignore, pred, &params)?;
            let mut rec = AssignRecord { seq: seq.clone(), t: *t, positive: Vec::new(), ignored: Vec::new() };
            for (i, m) in asg.matched.iter().enumerate() {
                match m {
                    Some(m) if m.kind == TargetKind::Keep => rec.positive.push([i, m.box_index, m.class_id as usize]),
                    Some(m) => rec.ignored.push([i, m.box_index]),
                    None => {}
                }
            }
            let loss = pred
                .map(|p| detection_loss(&grid, p, &asg).map(|loss| FrameLoss { seq: seq.clone(), t: *t, loss }))
                .transpose()?;
            Ok((rec, loss))
        })
        .collect::<Result<_>>()?;

    let header = AssignHeader {
        format: "evlabel-assign/1",
        strides: &strides,
        height: h,
        width: w,
        num_anchors: grid.len(),
        config_digest: cfg.digest(),
    };
    let mut text = serde_json::to_string(&header)? + "\n";
    for (rec, _) in &results {
        text += &(serde_json::to_string(rec)? + "\n");
    }
    write_output(out, &text)?;

    let losses: Vec<&FrameLoss> = results.iter().filter_map(|(_, l)| l.as_ref()).collect();
    if !losses.is_empty() {
        let n = losses.len() as f64;
        let mean = |f: fn(&LossBreakdown) -> f64| losses.iter().map(|l| f(&l.loss)).sum::<f64>() / n;
        let summary = serde_json::json!({
            "frames": losses.len(),
            "mean": { "total": mean(|l| l.total), "obj": mean(|l| l.obj), "cls": mean(|l| l.cls), "bbox": mean(|l| l.bbox) },
            "per_frame": losses,
            "config_digest": cfg.digest(),
        });
        let text = pretty(&summary)?;
        match report {
            Some(p) => fs::write(p, text)?,
            None if out.is_some() => print!("{text}"),
            None => eprint!("{text}"),
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

struct GroundTruth {
    header: DetectionHeader,
    frames: BTreeMap<String, Vec<Vec<DetBox>>>,
    annotated: BTreeMap<String, Vec<usize>>,
}

fn read_ground_truth(path: &Path, annotated: Annotated) -> Result<GroundTruth> {
    let file = DetectionFile::read_path(path)?;
    let frames = file.frames();
    let annotated = frames
        .iter()
        .map(|(id, f)| {
            let steps = (0..f.len()).filter(|&t| annotated == Annotated::All || !f[t].is_empty()).collect();
            (id.clone(), steps)
        })
        .collect();
    Ok(GroundTruth { header: file.header, frames, annotated })
}

fn labeled_steps(split: Option<&LabelSplit>, seq: &str) -> BTreeSet<usize> {
    split.and_then(|s| s.kept.get(seq)).map(|v| v.iter().map(|&t| t as usize).collect()).unwrap_or_default()
}

/// Counts per class over all sequences, plus the number of scored frames.
fn pr_counts(pred: &DetectionFile, gt: &GroundTruth, split: Option<&LabelSplit>, mode: FrameMode, tau: f64) -> Result<(BTreeMap<u32, Counts>, usize)> {
    let sets = pred.label_sets();
    let per_seq: Vec<(BTreeMap<u32, Counts>, usize)> = gt
        .frames
        .par_iter()
        .filter_map(|(id, frames)| {
            let empty;
            let set = match sets.get(id) {
                Some(s) => s,
                None => {
                    empty = PseudoLabelSet { sequence_id: id.clone(), labels: vec![Vec::new(); frames.len()], round: 0, config_digest: String::new() };
                    &empty
                }
            };
            let gmap: BTreeMap<usize, Vec<DetBox>> = gt.annotated[id].iter().map(|&t| (t, frames[t].clone())).collect();
            match pseudo_label_pr(set, &gmap, &labeled_steps(split, id), mode, tau) {
                Ok(r) => Some(Ok((r.counts, r.frames))),
                Err(Error::EmptyResult(_)) => None,
                Err(e) => Some(Err(e)),
            }
        })
        .collect::<Result<_>>()?;
    let mut total: BTreeMap<u32, Counts> = BTreeMap::new();
    let mut frames = 0;
    for (counts, n) in per_seq {
        frames += n;
        for (c, k) in counts {
            let e = total.entry(c).or_default();
            *e = e.merge(k);
        }
    }
    if frames == 0 {
        return Err(Error::EmptyResult(format!("no annotated timesteps to score in {mode:?} mode")));
    }
    Ok((total, frames))
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    cfg: &PipelineConfig,
    preds: &[PathBuf],
    gt: Option<&Path>,
    mode: EvalMode,
    split_path: Option<&Path>,
    frames: Option<Frames>,
    annotated: Annotated,
    precisions: &[f64],
    out: Option<&Path>,
) -> Result<()> {
    let split = split_path.map(read_split).transpose()?;
    let tau = cfg.eval.tau_match;
    let config = serde_json::to_value(cfg)?;
    if mode == EvalMode::Stop {
        let precision: Vec<f64> = if !precisions.is_empty() {
            precisions.to_vec()
        } else {
            let gt = read_ground_truth(gt.ok_or_else(|| Error::InvalidInput("--gt is required".into()))?, annotated)?;
            preds
                .iter()
                .map(|p| {
                    let file = DetectionFile::read_path(p)?;
                    let mode = if split.is_some() { FrameMode::LabeledFrames } else { FrameMode::SkippedFrames };
                    let (counts, _) = pr_counts(&file, &gt, split.as_ref(), mode, tau)?;
                    Ok(counts.values().fold(Counts::default(), |a, &b| a.merge(b)).precision())
                })
                .collect::<Result<_>>()?
        };
        let round = stopping_decision(&precision)?;
        let body = serde_json::json!({ "precision": precision, "round": round, "config": config });
        return write_output(out, &pretty(&body)?);
    }

    if preds.len() != 1 {
        return Err(Error::InvalidInput(format!("--mode {mode:?} takes exactly one --pred file")));
    }
    let gt = read_ground_truth(gt.ok_or_else(|| Error::InvalidInput("--gt is required".into()))?, annotated)?;
    let pred = DetectionFile::read_path(&preds[0])?;
    if pred.header.classes != gt.header.classes {
        return Err(Error::InvalidInput("prediction and ground-truth class lists differ".into()));
    }
    let names = &gt.header.classes;
    let mut report = MetricsReport { per_class: BTreeMap::new(), map: None, precision: None, recall: None, config };
    match mode {
        EvalMode::Pr => {
            let fm = match frames {
                Some(Frames::Labeled) => FrameMode::LabeledFrames,
                Some(Frames::Skipped) | None => FrameMode::SkippedFrames,
            };
            let (counts, _) = pr_counts(&pred, &gt, split.as_ref(), fm, tau)?;
            for (c, k) in &counts {
                report.per_class.insert(names[*c as usize].clone(), ClassMetrics { ap: None, precision: Some(k.precision()), recall: Some(k.recall()) });
            }
            let all = counts.values().fold(Counts::default(), |a, &b| a.merge(b));
            report.precision = Some(all.precision());
            report.recall = Some(all.recall());
        }
        EvalMode::Map => {
            let pred_frames = pred.frames();
            let mut p_all: Vec<Vec<DetBox>> = Vec::new();
            let mut g_all: Vec<Vec<DetBox>> = Vec::new();
            for (id, frames) in &gt.frames {
                for &t in &gt.annotated[id] {
                    g_all.push(frames[t].clone());
                    let keep: Vec<DetBox> = pred
                        .records
                        .iter()
                        .filter(|r| &r.seq == id && r.t == t && r.cert == Certainty::Keep)
                        .map(|r| r.to_box())
                        .collect();
                    p_all.push(if pred_frames.contains_key(id) { keep } else { Vec::new() });
                }
            }
            let ap = mean_ap(&p_all, &g_all, &cfg.eval.filter(), cfg.eval.iou_set)?;
            for (c, v) in &ap.per_class {
                report.per_class.insert(names[*c as usize].clone(), ClassMetrics { ap: Some(*v), precision: None, recall: None });
            }
            report.map = Some(ap.map);
        }
        EvalMode::Stop => unreachable!("handled above"),
    }
    write_output(out, &pretty(&report)?)
}

// ---------------------------------------------------------------------------
// synth

fn cmd_synth(name: &str, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut s = synth::scenario(name)?;
    if let Some(seed) = seed {
        s = s.with_seed(seed);
    }
    let generated = synth::generate(&s)?;
    let variants = synth::generate_variants(&s, &synth::all_variants(&s))?;
    fs::create_dir_all(out)?;
    let classes = evlabel::config::profile_classes(if s.num_classes == 3 { "1mpx" } else { "gen1" })?;
    let header = DetectionHeader::new(classes, s.width as u32, s.height as u32, s.duration_steps);

    write_evb1(&generated.events, BufWriter::new(fs::File::create(out.join("events.evb1"))?))?;
    let mut gt = DetectionFile::new(header.clone());
    gt.push_frames(&s.name, &generated.gt, LabelSource::Gt);
    gt.write_path(&out.join("gt.ndjson"))?;
    for ((_, boxes), file) in variants.iter().zip(VARIANT_FILES) {
        let mut f = DetectionFile::new(header.clone());
        for b in boxes {
            f.records.push(evlabel::io::DetectionRecord::detection(&s.name, b, LabelSource::Det));
        }
        f.write_path(&out.join(file))?;
    }
    let index: LabelIndex = [(s.name.clone(), (0..s.duration_steps as u64).collect())].into();
    fs::write(out.join("labels.json"), serde_json::to_string(&index)? + "\n")?;
    fs::write(out.join("scenario.json"), pretty(&s)?)?;
    Ok(())
}
