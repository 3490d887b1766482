use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::math::NormValue;
use crate::merge::DiffRecord;
use crate::taxonomy::Group;

/// Order statistics of `max_diff` within one group. Non-finite values are
/// counted apart and left out of the statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDiffStats {
    pub group: Group,
    pub tensors: u64,
    pub non_finite: u64,
    pub min: Option<NormValue>,
    pub median: Option<NormValue>,
    pub max: Option<NormValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DiffSummary {
    pub groups: Vec<GroupDiffStats>,
}

/// Lower median for even counts, so every reported value is an observed one.
pub fn summarize_diffs(diffs: &[DiffRecord]) -> DiffSummary {
    let mut by_group: BTreeMap<Group, (Vec<f64>, u64)> = BTreeMap::new();
    for r in diffs {
        let slot = by_group.entry(r.category.group).or_default();
        if r.max_diff.0.is_finite() {
            slot.0.push(r.max_diff.0);
        } else {
            slot.1 += 1;
        }
    }
    DiffSummary {
        groups: by_group
            .into_iter()
            .map(|(group, (mut v, non_finite))| {
                v.sort_by(f64::total_cmp);
                GroupDiffStats {
                    group,
                    tensors: v.len() as u64 + non_finite,
                    non_finite,
                    min: v.first().copied().map(NormValue),
                    median: (!v.is_empty()).then(|| NormValue(v[(v.len() - 1) / 2])),
                    max: v.last().copied().map(NormValue),
                }
            })
            .collect(),
    }
}

impl fmt::Display for DiffSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<20} {:>8} {:>10} {:>13} {:>13} {:>13}",
            "group", "tensors", "non_finite", "min", "median", "max"
        )?;
        let show = |v: Option<NormValue>| v.map_or("-".to_string(), |v| format!("{:.6e}", v.0));
        for g in &self.groups {
            writeln!(
                f,
                "{:<20} {:>8} {:>10} {:>13} {:>13} {:>13}",
                g.group.as_str(),
                g.tensors,
                g.non_finite,
                show(g.min),
                show(g.median),
                show(g.max)
            )?;
        }
        Ok(())
    }
}
