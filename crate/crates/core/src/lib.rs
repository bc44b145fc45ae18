//! Offline pseudo-label refinement for event-camera object detection.
//!
//! Stages: event histograms ([`evrep`]), test-time-augmentation merging
//! ([`tta`]), bidirectional tracking ([`tracker`]), threshold-and-track
//! label forging ([`pipeline`]), soft-anchor assignment and loss
//! ([`assign`]), label-split protocols ([`protocol`]), metrics ([`eval`])
//! and seeded synthetic scenarios ([`synth`]).

pub mod assign;
pub mod config;
pub mod error;
pub mod eval;
pub mod evrep;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod protocol;
pub mod rng;
pub mod synth;
pub mod tracker;
pub mod tta;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use geometry::{iou, nms, DetBox};
pub use pipeline::{forge, run_round, PseudoLabel, PseudoLabelSet};
pub use tracker::{Tracker, TrackerParams};
pub use tta::TtaVariant;
