//! Interchange formats: NDJSON detection/label files and histogram tensors.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evrep::Histogram;
use crate::geometry::DetBox;
use crate::pipeline::{Certainty, LabelSource, PseudoLabel, PseudoLabelSet, Provenance};

pub const FORMAT_TAG: &str = "leodet/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionHeader {
    pub format: String,
    pub classes: Vec<String>,
    pub width: u32,
    pub height: u32,
    pub num_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<u32>,
}

impl DetectionHeader {
    pub fn new(classes: Vec<String>, width: u32, height: u32, num_steps: usize) -> Self {
        DetectionHeader { format: FORMAT_TAG.to_string(), classes, width, height, num_steps, config_digest: None, round: None }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub seq: String,
    pub t: usize,
    pub cls: u32,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub p_obj: f64,
    pub p_iou: Vec<f64>,
    pub src: LabelSource,
    pub cert: Certainty,
    pub prov: Provenance,
    pub tlen_f: usize,
    pub tlen_b: usize,
}

impl DetectionRecord {
    pub fn detection(seq: &str, b: &DetBox, src: LabelSource) -> Self {
        DetectionRecord {
            seq: seq.to_string(),
            t: b.t_step,
            cls: b.class_id,
            x: b.x,
            y: b.y,
            w: b.w,
            h: b.h,
            p_obj: b.p_obj,
            p_iou: b.p_iou.clone(),
            src,
            cert: Certainty::Keep,
            prov: Provenance::Detected,
            tlen_f: 0,
            tlen_b: 0,
        }
    }

    pub fn label(seq: &str, l: &PseudoLabel) -> Self {
        DetectionRecord {
            cert: l.certainty,
            prov: l.provenance,
            tlen_f: l.track_len_fwd,
            tlen_b: l.track_len_bwd,
            ..Self::detection(seq, &l.bbox, l.source)
        }
    }

    pub fn to_box(&self) -> DetBox {
        DetBox {
            x: self.x,
            y: self.y,
            w: self.w,
            h: self.h,
            class_id: self.cls,
            t_step: self.t,
            p_obj: self.p_obj,
            p_iou: self.p_iou.clone(),
        }
    }

    pub fn to_label(&self) -> PseudoLabel {
        PseudoLabel {
            bbox: self.to_box(),
            certainty: self.cert,
            provenance: self.prov,
            source: self.src,
            track_len_fwd: self.tlen_f,
            track_len_bwd: self.tlen_b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionFile {
    pub header: DetectionHeader,
    pub records: Vec<DetectionRecord>,
}

fn format_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("line {line}: {msg}"))
}

impl DetectionFile {
    pub fn new(header: DetectionHeader) -> Self {
        DetectionFile { header, records: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.format != FORMAT_TAG {
            return Err(Error::Format(format!("unsupported format {:?}", h.format)));
        }
        let c = h.num_classes();
        for (i, r) in self.records.iter().enumerate() {
            let line = i + 2;
            if r.cls as usize >= c {
                return Err(format_err(line, format!("class {} out of range for {c} classes", r.cls)));
            }
            if r.p_iou.len() != c {
                return Err(format_err(line, format!("p_iou has {} entries, expected {c}", r.p_iou.len())));
            }
            if r.t >= h.num_steps {
                return Err(format_err(line, format!("t={} outside {} steps", r.t, h.num_steps)));
            }
        }
        Ok(())
    }

    /// Stable sort by (seq, t); records within a frame keep input order.
    pub fn canonicalize(&mut self) {
        self.records.sort_by(|a, b| a.seq.cmp(&b.seq).then(a.t.cmp(&b.t)));
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer(&mut out, &self.header)?;
        out.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_ndjson(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut header: Option<DetectionHeader> = None;
        let mut records = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match header {
                None => header = Some(serde_json::from_str(&line).map_err(|e| format_err(i + 1, format!("bad header: {e}")))?),
                Some(_) => records.push(serde_json::from_str(&line).map_err(|e| format_err(i + 1, e))?),
            }
        }
        let header = header.ok_or_else(|| Error::Format("missing header line".into()))?;
        let file = DetectionFile { header, records };
        file.validate()?;
        Ok(file)
    }

    pub fn from_ndjson(text: &str) -> Result<Self> {
        Self::read_from(text.as_bytes())
    }

    pub fn read_path(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    pub fn write_path(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn sequence_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.records.iter().map(|r| r.seq.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Boxes grouped per sequence into `num_steps` frames, in record order.
    pub fn frames(&self) -> BTreeMap<String, Vec<Vec<DetBox>>> {
        let mut out: BTreeMap<String, Vec<Vec<DetBox>>> = BTreeMap::new();
        for r in &self.records {
            let frames = out.entry(r.seq.clone()).or_insert_with(|| vec![Vec::new(); self.header.num_steps]);
            frames[r.t].push(r.to_box());
        }
        out
    }

    pub fn push_frames(&mut self, seq: &str, frames: &[Vec<DetBox>], src: LabelSource) {
        for b in frames.iter().flatten() {
            self.records.push(DetectionRecord::detection(seq, b, src));
        }
    }

    pub fn push_labels(&mut self, set: &PseudoLabelSet) {
        for l in set.iter() {
            self.records.push(DetectionRecord::label(&set.sequence_id, l));
        }
    }

    pub fn label_sets(&self) -> BTreeMap<String, PseudoLabelSet> {
        let mut out: BTreeMap<String, PseudoLabelSet> = BTreeMap::new();
        for r in &self.records {
            let set = out.entry(r.seq.clone()).or_insert_with(|| PseudoLabelSet {
                sequence_id: r.seq.clone(),
                labels: vec![Vec::new(); self.header.num_steps],
                round: self.header.round.unwrap_or(0),
                config_digest: self.header.config_digest.clone().unwrap_or_default(),
            });
            set.labels[r.t].push(r.to_label());
        }
        out
    }
}

/// NPY (v1.0) encoding of a stack of histograms as little-endian u32 with
/// shape (N, 2B, H, W).
pub fn histograms_to_npy(hists: &[Histogram]) -> Result<Vec<u8>> {
    let first = hists.first().ok_or_else(|| Error::EmptyResult("no histograms to write".into()))?;
    if hists.iter().any(|h| (h.bins, h.height, h.width) != (first.bins, first.height, first.width)) {
        return Err(Error::InvalidInput("histograms differ in shape".into()));
    }
    let shape = [hists.len(), 2 * first.bins, first.height, first.width];
    let mut out = npy_header(&shape);
    for h in hists {
        for v in &h.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn npy_header(shape: &[usize]) -> Vec<u8> {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    let mut dict = format!("{{'descr': '<u4', 'fortran_order': False, 'shape': ({},), }}", dims.join(", "));
    // magic(6) + version(2) + len(2) + dict + '\n' padded to 64 bytes
    let unpadded = 10 + dict.len() + 1;
    dict.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    dict.push('\n');
    let mut out = b"\x93NUMPY\x01\x00".to_vec();
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out
}

/// Decodes an NPY produced by [`histograms_to_npy`]; returns (shape, data).
pub fn read_npy_u32(bytes: &[u8]) -> Result<(Vec<usize>, Vec<u32>)> {
    if bytes.len() < 10 || &bytes[..8] != b"\x93NUMPY\x01\x00" {
        return Err(Error::Format("not an NPY v1.0 file".into()));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(bytes.get(10..10 + hlen).ok_or_else(|| Error::Format("truncated NPY header".into()))?)
        .map_err(|_| Error::Format("NPY header is not utf-8".into()))?;
    if !header.contains("'descr': '<u4'") || !header.contains("'fortran_order': False") {
        return Err(Error::Format("only C-order little-endian u32 NPY is supported".into()));
    }
    let open = header.find("'shape': (").ok_or_else(|| Error::Format("NPY header lacks shape".into()))? + 10;
    let close = open + header[open..].find(')').ok_or_else(|| Error::Format("bad NPY shape".into()))?;
    let shape = header[open..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| Error::Format("bad NPY dimension".into())))
        .collect::<Result<Vec<_>>>()?;
    let body = &bytes[10 + hlen..];
    let n: usize = shape.iter().product();
    if body.len() != 4 * n {
        return Err(Error::Format(format!("NPY body holds {} bytes, expected {}", body.len(), 4 * n)));
    }
    let data = body.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((shape, data))
}

/// JSON sidecar describing a histogram tensor file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramMeta {
    pub shape: Vec<usize>,
    pub window_us: u64,
    pub bins: usize,
    pub saturation: Option<u32>,
    pub start_us: Vec<u64>,
    /// Index of a trailing window shorter than `window_us`, if any.
    pub partial: Option<usize>,
    pub channel_order: String,
}

impl HistogramMeta {
    pub fn describe(hists: &[Histogram]) -> Result<Self> {
        let first = hists.first().ok_or_else(|| Error::EmptyResult("no histograms".into()))?;
        Ok(HistogramMeta {
            shape: vec![hists.len(), 2 * first.bins, first.height, first.width],
            window_us: first.window_us,
            bins: first.bins,
            saturation: first.saturation,
            start_us: hists.iter().map(|h| h.start_us).collect(),
            partial: hists.iter().position(|h| h.partial),
            channel_order: "2*bin + (p == +1)".to_string(),
        })
    }
}
