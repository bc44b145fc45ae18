//! Weakly- and semi-supervised label subsets carved from fully annotated
//! sequences.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::SeededRng;

/// Sequence id to its sorted annotated timestamps.
pub type LabelIndex = BTreeMap<String, Vec<u64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Wsod,
    Ssod,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSplit {
    pub mode: SplitMode,
    pub ratio: f64,
    pub seed: u64,
    pub kept: BTreeMap<String, Vec<u64>>,
}

impl LabelSplit {
    pub fn total_kept(&self) -> usize {
        self.kept.values().map(Vec::len).sum()
    }

    /// Canonical JSON: sorted keys, compact.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("split serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn check_index(index: &LabelIndex) -> Result<()> {
    if index.is_empty() {
        return Err(invalid("empty label index"));
    }
    Ok(())
}

/// Positions kept when sub-sampling `m` labels at `ratio`:
/// `k = max(1, round(ratio * m))` at indices `floor(j * m / k)`.
pub fn uniform_indices(m: usize, ratio: f64) -> Vec<usize> {
    if m == 0 {
        return Vec::new();
    }
    let k = ((ratio * m as f64).round() as usize).clamp(1, m);
    (0..k).map(|j| j * m / k).collect()
}

/// Keep a uniformly strided subset of every sequence's labels.
pub fn wsod_split(index: &LabelIndex, ratio: f64) -> Result<LabelSplit> {
    check_index(index)?;
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(invalid(format!("wsod ratio {ratio} outside (0, 1]")));
    }
    let kept = index
        .iter()
        .map(|(seq, stamps)| {
            let mut sorted = stamps.clone();
            sorted.sort_unstable();
            let picked = uniform_indices(sorted.len(), ratio).into_iter().map(|i| sorted[i]).collect();
            (seq.clone(), picked)
        })
        .collect();
    Ok(LabelSplit { mode: SplitMode::Wsod, ratio, seed: 0, kept })
}

/// Keep all labels of a seeded random subset of sequences whose label count
/// first reaches `ratio` of the total; the others keep none.
///
/// When even the smallest labeled sequence overshoots the budget, that
/// sequence alone is kept and a warning is logged.
pub fn ssod_split(index: &LabelIndex, ratio: f64, seed: u64) -> Result<LabelSplit> {
    check_index(index)?;
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(invalid(format!("ssod ratio {ratio} outside (0, 1)")));
    }
    let total: usize = index.values().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::EmptyResult("no labels to split".into()));
    }
    let budget = ratio * total as f64;

    let mut order: Vec<&String> = index.iter().filter(|(_, v)| !v.is_empty()).map(|(k, _)| k).collect();
    SeededRng::new(seed).shuffle(&mut order);

    let smallest = order.iter().map(|k| index[*k].len()).min().expect("some sequence is labeled");
    let selected: Vec<&String> = if (smallest as f64) > budget {
        log::warn!("ssod ratio {ratio} is below the smallest sequence; keeping one sequence of {smallest} labels");
        vec![*order.iter().find(|k| index[**k].len() == smallest).expect("smallest exists")]
    } else {
        let mut picked = Vec::new();
        let mut count = 0usize;
        for k in order {
            if count as f64 >= budget {
                break;
            }
            count += index[k].len();
            picked.push(k);
        }
        picked
    };

    let kept = index
        .iter()
        .map(|(seq, stamps)| {
            let mut v = if selected.contains(&seq) { stamps.clone() } else { Vec::new() };
            v.sort_unstable();
            (seq.clone(), v)
        })
        .collect();
    Ok(LabelSplit { mode: SplitMode::Ssod, ratio, seed, kept })
}

/// Every label kept.
pub fn full_split(index: &LabelIndex) -> Result<LabelSplit> {
    check_index(index)?;
    let kept = index
        .iter()
        .map(|(k, v)| {
            let mut v = v.clone();
            v.sort_unstable();
            (k.clone(), v)
        })
        .collect();
    Ok(LabelSplit { mode: SplitMode::Full, ratio: 1.0, seed: 0, kept })
}

pub fn split(index: &LabelIndex, mode: SplitMode, ratio: f64, seed: u64) -> Result<LabelSplit> {
    match mode {
        SplitMode::Wsod => wsod_split(index, ratio),
        SplitMode::Ssod => ssod_split(index, ratio, seed),
        SplitMode::Full => full_split(index),
    }
}
