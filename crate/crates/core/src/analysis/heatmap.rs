use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::merge::DiffRecord;
use crate::taxonomy::Group;

/// How several tensors falling in one heatmap cell (the experts of a layer,
/// or a weight and its bias) are reduced to one value.
///
/// `PerExpert` gives every expert its own column, so expert cells hold single
/// tensor values; any remaining shared cells use the mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregate {
    #[default]
    Mean,
    Max,
    PerExpert,
}

impl FromStr for Aggregate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Aggregate::Mean),
            "max" => Ok(Aggregate::Max),
            "per-expert" => Ok(Aggregate::PerExpert),
            other => Err(format!(
                "unknown aggregate {other:?} (expected mean, max or per-expert)"
            )),
        }
    }
}

impl fmt::Display for Aggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregate::Mean => "mean",
            Aggregate::Max => "max",
            Aggregate::PerExpert => "per-expert",
        })
    }
}

/// A heatmap column: a group, optionally narrowed to one projection.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeatmapColumn {
    pub group: Group,
    pub projection: Option<String>,
    /// Set only in per-expert tables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert: Option<u32>,
}

impl HeatmapColumn {
    /// `group.projection`, or just `group` when there is no projection, with
    /// `.e<expert>` appended in per-expert tables.
    pub fn label(&self) -> String {
        let mut label = self.group.to_string();
        if let Some(p) = &self.projection {
            label.push('.');
            label.push_str(p);
        }
        if let Some(e) = self.expert {
            write!(label, ".e{e}").unwrap();
        }
        label
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapTable {
    pub aggregate: Aggregate,
    pub columns: Vec<HeatmapColumn>,
    /// Layer indices, ascending and contiguous from 0.
    pub layers: Vec<u32>,
    /// `cells[row][column]`; `None` where no tensor of that column exists in
    /// that layer.
    pub cells: Vec<Vec<Option<f64>>>,
}

/// Builds the layer by subgroup table.
///
/// Only tensors with a layer index take part. Columns follow the group order
/// of [`Group::ALL`] and, within a group, projection labels sorted
/// lexicographically. Rows cover every layer from 0 to the highest one seen.
pub fn emit_heatmap(diffs: &[DiffRecord], aggregate: Aggregate) -> HeatmapTable {
    let mut buckets: BTreeMap<(HeatmapColumn, u32), Vec<f64>> = BTreeMap::new();
    let mut max_layer = None;
    for r in diffs {
        let Some(layer) = r.category.layer else {
            continue;
        };
        max_layer = max_layer.max(Some(layer));
        let column = HeatmapColumn {
            group: r.category.group,
            projection: r.category.projection.clone(),
            expert: r.category.expert.filter(|_| aggregate == Aggregate::PerExpert),
        };
        buckets.entry((column, layer)).or_default().push(r.max_diff.0);
    }

    // Sorted summands make the mean independent of record order.
    for values in buckets.values_mut() {
        values.sort_by(f64::total_cmp);
    }
    let mut columns: Vec<HeatmapColumn> = buckets.keys().map(|(c, _)| c.clone()).collect();
    columns.dedup();
    let layers: Vec<u32> = match max_layer {
        Some(m) => (0..=m).collect(),
        None => Vec::new(),
    };
    let cells = layers
        .iter()
        .map(|&layer| {
            columns
                .iter()
                .map(|c| {
                    buckets
                        .get(&(c.clone(), layer))
                        .map(|values| reduce(values, aggregate))
                })
                .collect()
        })
        .collect();
    HeatmapTable {
        aggregate,
        columns,
        layers,
        cells,
    }
}

fn reduce(values: &[f64], aggregate: Aggregate) -> f64 {
    match aggregate {
        Aggregate::Mean | Aggregate::PerExpert => values.iter().sum::<f64>() / values.len() as f64,
        Aggregate::Max => values.iter().copied().fold(f64::NEG_INFINITY, |acc, v| {
            if v.is_nan() || acc.is_nan() {
                f64::NAN
            } else {
                acc.max(v)
            }
        }),
    }
}

impl HeatmapTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer");
        for c in &self.columns {
            out.push(',');
            out.push_str(&c.label());
        }
        out.push('\n');
        for (layer, row) in self.layers.iter().zip(&self.cells) {
            write!(out, "{layer}").unwrap();
            for cell in row {
                out.push(',');
                if let Some(v) = cell {
                    write!(out, "{v}").unwrap();
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn column_index(&self, label: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.label() == label)
    }
}
