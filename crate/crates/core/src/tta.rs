//! Map detections from flipped detector runs back into the original frame
//! and ensemble them with per-timestep NMS.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{nms, DetBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtaVariant {
    pub time_flipped: bool,
    pub h_flipped: bool,
    pub num_timesteps: usize,
    pub width: f64,
}

impl TtaVariant {
    pub fn identity(num_timesteps: usize, width: f64) -> Self {
        TtaVariant { time_flipped: false, h_flipped: false, num_timesteps, width }
    }

    /// The four combinations in order: identity, time, horizontal, both.
    pub fn all(num_timesteps: usize, width: f64) -> [TtaVariant; 4] {
        let v = |time_flipped, h_flipped| TtaVariant { time_flipped, h_flipped, num_timesteps, width };
        [v(false, false), v(true, false), v(false, true), v(true, true)]
    }

    pub fn name(&self) -> &'static str {
        match (self.time_flipped, self.h_flipped) {
            (false, false) => "identity",
            (true, false) => "tflip",
            (false, true) => "hflip",
            (true, true) => "thflip",
        }
    }

    fn map_box(&self, b: &DetBox) -> Result<DetBox> {
        if b.t_step >= self.num_timesteps {
            return Err(invalid(format!("box at t={} but variant has {} timesteps", b.t_step, self.num_timesteps)));
        }
        let mut out = b.clone();
        if self.time_flipped {
            out.t_step = self.num_timesteps - 1 - b.t_step;
        }
        if self.h_flipped {
            out.x = self.width - b.x - b.w;
        }
        Ok(out)
    }
}

/// Undo the variant's flips. The mapping is its own inverse, so the same
/// call also takes original-frame boxes into the variant's frame.
pub fn unflip_boxes(boxes: &[DetBox], variant: &TtaVariant) -> Result<Vec<DetBox>> {
    if variant.num_timesteps == 0 {
        return Err(invalid("variant needs at least one timestep"));
    }
    boxes.iter().map(|b| variant.map_box(b)).collect()
}

/// Unflip every variant's detections, group by timestep and run NMS per
/// timestep. Returns `num_timesteps` lists.
pub fn tta_merge(variant_outputs: &[(TtaVariant, Vec<DetBox>)], tau_nms: f64, class_aware: bool) -> Result<Vec<Vec<DetBox>>> {
    let Some((first, _)) = variant_outputs.first() else {
        return Err(invalid("tta_merge needs at least one variant"));
    };
    if variant_outputs
        .iter()
        .any(|(v, _)| v.num_timesteps != first.num_timesteps || v.width != first.width)
    {
        return Err(invalid("TTA variants disagree on sequence length or width"));
    }
    let mut frames: Vec<Vec<DetBox>> = vec![Vec::new(); first.num_timesteps];
    for (variant, boxes) in variant_outputs {
        for b in unflip_boxes(boxes, variant)? {
            frames[b.t_step].push(b);
        }
    }
    frames.iter().map(|f| nms(f, tau_nms, class_aware)).collect()
}
