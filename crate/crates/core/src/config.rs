//! Pipeline configuration (TOML). Every section rejects unknown keys.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assign::AssignStrategy;
use crate::error::{Error, Result};
use crate::eval::{EvalFilter, IouSet};
use crate::pipeline::{derive_thresholds, ForgeOptions, ForgeSettings, InpaintRule, SoftRule, ThresholdOverride};
use crate::protocol::SplitMode;
use crate::tracker::TrackerParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct PipelineConfig {
    pub histogram: HistogramSection,
    pub tta: TtaSection,
    pub nms: NmsSection,
    pub tracker: TrackerSection,
    pub thresholds: ThresholdSection,
    pub soft: SoftSection,
    pub assign: AssignSection,
    pub eval: EvalSection,
    pub protocol: ProtocolSection,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HistogramSection {
    pub window_us: u64,
    pub bins: usize,
    /// 0 disables saturation.
    pub saturation: u32,
}

impl Default for HistogramSection {
    fn default() -> Self {
        HistogramSection { window_us: 50_000, bins: 5, saturation: 255 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtaSection {
    pub use_time_flip: bool,
    pub use_hflip: bool,
    pub use_combined: bool,
    pub flip_polarity: bool,
    pub tau_nms: f64,
}

impl Default for TtaSection {
    fn default() -> Self {
        TtaSection { use_time_flip: true, use_hflip: true, use_combined: true, flip_polarity: true, tau_nms: 0.45 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmsSection {
    pub class_aware: bool,
}

impl Default for NmsSection {
    fn default() -> Self {
        NmsSection { class_aware: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerSection {
    pub tau_iou: f64,
    pub tau_del: f64,
    pub decay: f64,
    pub init_q: f64,
    pub inpaint_rule: InpaintRule,
    pub bidirectional: bool,
}

impl Default for TrackerSection {
    fn default() -> Self {
        let p = TrackerParams::default();
        TrackerSection {
            tau_iou: p.tau_iou,
            tau_del: p.tau_del,
            decay: p.decay,
            init_q: p.init_q,
            inpaint_rule: InpaintRule::Directional,
            bidirectional: true,
        }
    }
}

impl TrackerSection {
    pub fn params(&self) -> TrackerParams {
        TrackerParams { tau_iou: self.tau_iou, tau_del: self.tau_del, decay: self.decay, init_q: self.init_q }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdSection {
    /// Class profile name: "gen1" or "1mpx".
    pub profile: String,
    pub tau_hard_car: f64,
    pub t_trk: usize,
    pub overrides: BTreeMap<String, ThresholdOverride>,
}

impl Default for ThresholdSection {
    fn default() -> Self {
        ThresholdSection { profile: "gen1".into(), tau_hard_car: 0.6, t_trk: 6, overrides: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SoftSection {
    pub rule: SoftRule,
}

impl Default for SoftSection {
    fn default() -> Self {
        SoftSection { rule: SoftRule::And }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssignSection {
    pub strategy: AssignStrategy,
    pub center_radius: f64,
    pub top_k: usize,
    pub strides: Vec<u32>,
}

impl Default for AssignSection {
    fn default() -> Self {
        AssignSection { strategy: AssignStrategy::DynamicK, center_radius: 2.5, top_k: 10, strides: vec![8, 16, 32] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub iou_set: IouSet,
    pub tau_match: f64,
    pub min_diagonal: f64,
    pub min_side: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let f = EvalFilter::gen1();
        EvalSection { iou_set: IouSet::Coco, tau_match: 0.75, min_diagonal: f.min_diagonal, min_side: f.min_side }
    }
}

impl EvalSection {
    pub fn filter(&self) -> EvalFilter {
        EvalFilter { min_diagonal: self.min_diagonal, min_side: self.min_side }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSection {
    pub mode: SplitMode,
    pub ratio: f64,
    pub seed: u64,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        ProtocolSection { mode: SplitMode::Wsod, ratio: 0.05, seed: 0 }
    }
}

/// Class names of the built-in dataset profiles.
pub fn profile_classes(profile: &str) -> Result<Vec<String>> {
    let names: &[&str] = match profile {
        "gen1" => &["car", "pedestrian"],
        "1mpx" => &["car", "pedestrian", "two-wheeler"],
        other => return Err(Error::InvalidConfig(format!("unknown class profile {other:?}"))),
    };
    Ok(names.iter().map(|s| s.to_string()).collect())
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 over the canonical JSON form (sorted keys), hex encoded.
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        let hash = Sha256::digest(canonical.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn classes(&self) -> Result<Vec<String>> {
        profile_classes(&self.thresholds.profile)
    }

    pub fn forge_settings(&self) -> Result<ForgeSettings> {
        let classes = self.classes()?;
        let thresholds = derive_thresholds(self.thresholds.tau_hard_car, &classes, &self.thresholds.overrides, self.thresholds.t_trk)?;
        let tracker = self.tracker.params();
        tracker.validate()?;
        if !(self.tta.tau_nms > 0.0 && self.tta.tau_nms < 1.0) {
            return Err(Error::InvalidConfig(format!("tta.tau_nms {} outside (0, 1)", self.tta.tau_nms)));
        }
        Ok(ForgeSettings {
            thresholds,
            tracker,
            options: ForgeOptions {
                soft_rule: self.soft.rule,
                inpaint_rule: self.tracker.inpaint_rule,
                bidirectional: self.tracker.bidirectional,
                tau_nms: self.tta.tau_nms,
                class_aware: self.nms.class_aware,
            },
            digest: self.digest(),
        })
    }

    /// Which TTA variants to expect, in `TtaVariant::all` order.
    pub fn enabled_variants(&self) -> [bool; 4] {
        [true, self.tta.use_time_flip, self.tta.use_hflip, self.tta.use_combined && self.tta.use_time_flip && self.tta.use_hflip]
    }
}
