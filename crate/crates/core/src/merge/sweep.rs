use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::MergeConfig;
use super::diff::DiffRecord;
use crate::taxonomy::Group;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub counts: BTreeMap<Group, u64>,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

/// Counts, per delta, the tensors that would be merged. Nothing is read or
/// written; only the subset and threshold gates are evaluated.
pub fn threshold_sweep(diffs: &[DiffRecord], config: &MergeConfig, deltas: &[f64]) -> SweepTable {
    let eligible: Vec<(Group, f64)> = diffs
        .iter()
        .filter_map(|r| {
            let category = config.scheme.classify(&r.name);
            config
                .subset
                .contains(&r.name, &category)
                .then_some((category.group, r.max_diff.0))
        })
        .collect();
    let rows = deltas
        .iter()
        .map(|&delta| {
            let mut counts: BTreeMap<Group, u64> = Group::ALL.iter().map(|&g| (g, 0)).collect();
            for &(group, diff) in &eligible {
                if diff > delta {
                    *counts.get_mut(&group).unwrap() += 1;
                }
            }
            let total = counts.values().sum();
            SweepRow {
                delta,
                counts,
                total,
            }
        })
        .collect();
    SweepTable { rows }
}

impl SweepTable {
    /// Columns: `delta`, one count column per group, `total`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("delta");
        for g in Group::ALL {
            out.push(',');
            out.push_str(g.as_str());
        }
        out.push_str(",total\n");
        for row in &self.rows {
            write!(out, "{}", row.delta).unwrap();
            for g in Group::ALL {
                write!(out, ",{}", row.counts.get(&g).copied().unwrap_or(0)).unwrap();
            }
            writeln!(out, ",{}", row.total).unwrap();
        }
        out
    }
}
