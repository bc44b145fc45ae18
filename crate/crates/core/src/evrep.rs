//! Event streams, histogram tensors and the two raw-stream flips.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// One brightness-change event. `p` is +1 or -1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub t: u64,
    pub p: i8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub width: u16,
    pub height: u16,
    pub duration_us: u64,
}

impl EventStream {
    pub fn new(events: Vec<Event>, width: u16, height: u16, duration_us: u64) -> Result<Self> {
        let s = EventStream { events, width, height, duration_us };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let mut last = 0u64;
        for (i, e) in self.events.iter().enumerate() {
            if e.x >= self.width || e.y >= self.height {
                return Err(invalid(format!("event {i} at ({}, {}) outside {}x{}", e.x, e.y, self.width, self.height)));
            }
            if e.p != 1 && e.p != -1 {
                return Err(invalid(format!("event {i} has polarity {}", e.p)));
            }
            if e.t >= self.duration_us {
                return Err(invalid(format!("event {i} at t={} beyond duration {}", e.t, self.duration_us)));
            }
            if e.t < last {
                return Err(invalid(format!("event stream not sorted at index {i}")));
            }
            last = e.t;
        }
        Ok(())
    }
}

/// Event counts for one time window, laid out as `(2 * bins, height, width)`.
/// Channel index is `2 * bin + (p == +1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    pub data: Vec<u32>,
    pub bins: usize,
    pub height: usize,
    pub width: usize,
    pub window_us: u64,
    pub start_us: u64,
    /// Saturation ceiling, `None` when counts are unbounded.
    pub saturation: Option<u32>,
    /// Set on a trailing window that the stream ends inside of.
    pub partial: bool,
}

impl Histogram {
    pub fn channels(&self) -> usize {
        2 * self.bins
    }

    pub fn index(&self, channel: usize, row: usize, col: usize) -> usize {
        (channel * self.height + row) * self.width + col
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> u32 {
        self.data[self.index(channel, row, col)]
    }

    pub fn total(&self) -> u64 {
        self.data.iter().map(|&v| v as u64).sum()
    }
}

pub fn channel_of(bin: usize, polarity: i8) -> usize {
    2 * bin + usize::from(polarity > 0)
}

/// Bin events into one histogram per `window_us`, each split into `bins`
/// equal temporal sub-bins. A trailing window the stream ends inside of is
/// emitted with `partial = true`.
pub fn build_histograms(stream: &EventStream, window_us: u64, bins: usize, saturation: Option<u32>) -> Result<Vec<Histogram>> {
    if window_us == 0 || bins == 0 {
        return Err(invalid("window and bin count must be positive"));
    }
    if !window_us.is_multiple_of(bins as u64) {
        return Err(invalid(format!("window {window_us}us not divisible into {bins} bins")));
    }
    stream.validate()?;
    let bin_us = window_us / bins as u64;
    let (h, w) = (stream.height as usize, stream.width as usize);
    let count = stream.duration_us.div_ceil(window_us) as usize;
    let mut out: Vec<Histogram> = (0..count)
        .map(|k| {
            let start_us = k as u64 * window_us;
            Histogram {
                data: vec![0; 2 * bins * h * w],
                bins,
                height: h,
                width: w,
                window_us,
                start_us,
                saturation,
                partial: start_us + window_us > stream.duration_us,
            }
        })
        .collect();
    let cap = saturation.unwrap_or(u32::MAX);
    for e in &stream.events {
        let k = (e.t / window_us) as usize;
        let bin = ((e.t - k as u64 * window_us) / bin_us) as usize;
        let hist = &mut out[k];
        let idx = hist.index(channel_of(bin, e.p), e.y as usize, e.x as usize);
        if hist.data[idx] < cap {
            hist.data[idx] += 1;
        }
    }
    Ok(out)
}

/// Replay the stream backwards: `t' = duration - 1 - t`, order reversed and,
/// when `flip_polarity`, polarity negated.
pub fn time_flip_stream_with(stream: &EventStream, flip_polarity: bool) -> EventStream {
    let last = stream.duration_us.saturating_sub(1);
    let events = stream
        .events
        .iter()
        .rev()
        .map(|e| Event { t: last - e.t, p: if flip_polarity { -e.p } else { e.p }, ..*e })
        .collect();
    EventStream { events, width: stream.width, height: stream.height, duration_us: stream.duration_us }
}

pub fn time_flip_stream(stream: &EventStream) -> EventStream {
    time_flip_stream_with(stream, true)
}

/// Mirror columns: `x' = width - 1 - x`.
pub fn hflip_stream(stream: &EventStream) -> EventStream {
    let events = stream
        .events
        .iter()
        .map(|e| Event { x: stream.width - 1 - e.x, ..*e })
        .collect();
    EventStream { events, width: stream.width, height: stream.height, duration_us: stream.duration_us }
}

// ---------------------------------------------------------------------------
// EVB1 binary format

const EVB1_MAGIC: &[u8; 4] = b"EVB1";
const EVB1_RECORD: usize = 20;

pub fn write_evb1<W: Write>(stream: &EventStream, mut out: W) -> Result<()> {
    out.write_all(EVB1_MAGIC)?;
    out.write_all(&stream.width.to_le_bytes())?;
    out.write_all(&stream.height.to_le_bytes())?;
    out.write_all(&stream.duration_us.to_le_bytes())?;
    let mut rec = [0u8; EVB1_RECORD];
    for e in &stream.events {
        rec[0..8].copy_from_slice(&e.t.to_le_bytes());
        rec[8..10].copy_from_slice(&e.x.to_le_bytes());
        rec[10..12].copy_from_slice(&e.y.to_le_bytes());
        rec[12] = e.p as u8;
        out.write_all(&rec)?;
    }
    Ok(())
}

pub fn read_evb1<R: Read>(mut input: R) -> Result<EventStream> {
    let mut header = [0u8; 16];
    input.read_exact(&mut header)?;
    if &header[0..4] != EVB1_MAGIC {
        return Err(Error::Format("missing EVB1 magic".into()));
    }
    let width = u16::from_le_bytes([header[4], header[5]]);
    let height = u16::from_le_bytes([header[6], header[7]]);
    let duration_us = u64::from_le_bytes(header[8..16].try_into().expect("8 bytes"));
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    if body.len() % EVB1_RECORD != 0 {
        return Err(Error::Format(format!("truncated EVB1 body ({} bytes)", body.len())));
    }
    let events = body
        .chunks_exact(EVB1_RECORD)
        .map(|r| Event {
            t: u64::from_le_bytes(r[0..8].try_into().expect("8 bytes")),
            x: u16::from_le_bytes([r[8], r[9]]),
            y: u16::from_le_bytes([r[10], r[11]]),
            p: r[12] as i8,
        })
        .collect();
    EventStream::new(events, width, height, duration_us)
}

// ---------------------------------------------------------------------------
// CSV adapter: header `t_us,x,y,p`

pub fn write_csv<W: Write>(stream: &EventStream, mut out: W) -> Result<()> {
    writeln!(out, "t_us,x,y,p")?;
    for e in &stream.events {
        writeln!(out, "{},{},{},{}", e.t, e.x, e.y, e.p)?;
    }
    Ok(())
}

/// CSV carries no sensor metadata, so it is supplied by the caller.
pub fn read_csv<R: BufRead>(input: R, width: u16, height: u16, duration_us: u64) -> Result<EventStream> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?;
    if header.as_deref().map(str::trim) != Some("t_us,x,y,p") {
        return Err(Error::Format("expected header t_us,x,y,p".into()));
    }
    let mut events = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("bad event row {}: {line}", n + 2));
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 4 {
            return Err(bad());
        }
        events.push(Event {
            t: fields[0].parse().map_err(|_| bad())?,
            x: fields[1].parse().map_err(|_| bad())?,
            y: fields[2].parse().map_err(|_| bad())?,
            p: fields[3].parse().map_err(|_| bad())?,
        });
    }
    EventStream::new(events, width, height, duration_us)
}

/// Hook for third-party dataset decoders (Gen1/1Mpx style recordings).
pub trait EventSource {
    fn sensor_size(&self) -> (u16, u16);
    /// Decode the whole recording into a validated stream.
    fn read_stream(&mut self) -> Result<EventStream>;
}

/// [`EventSource`] over an EVB1 reader.
pub struct Evb1Source<R: Read> {
    reader: Option<R>,
    size: (u16, u16),
}

impl<R: Read> Evb1Source<R> {
    pub fn new(reader: R) -> Self {
        Evb1Source { reader: Some(reader), size: (0, 0) }
    }
}

impl<R: Read> EventSource for Evb1Source<R> {
    fn sensor_size(&self) -> (u16, u16) {
        self.size
    }

    fn read_stream(&mut self) -> Result<EventStream> {
        let reader = self.reader.take().ok_or_else(|| invalid("EVB1 source already consumed"))?;
        let s = read_evb1(reader)?;
        self.size = (s.width, s.height);
        Ok(s)
    }
}
