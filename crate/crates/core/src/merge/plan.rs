use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{one_hot, MergeConfig};
use super::diff::DiffRecord;
use crate::error::{Error, Result};
use crate::math::NormValue;
use crate::safetensors::CheckpointIndex;
use crate::taxonomy::{Group, TensorCategory};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopyReason {
    NotInSubset,
    BelowThreshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Merge { lambdas: Vec<f64> },
    CopyBase { reason: CopyReason },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeDecision {
    pub name: String,
    pub category: TensorCategory,
    #[serde(flatten)]
    pub action: Action,
    pub max_diff: NormValue,
    /// The output is known to equal the base tensor: a copy, weights one-hot
    /// on the base, or a convex merge of tensors with zero difference.
    pub equals_base: bool,
}

impl MergeDecision {
    pub fn is_merge(&self) -> bool {
        matches!(self.action, Action::Merge { .. })
    }
}

/// The resolved per-tensor actions, reviewable before anything is written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergePlan {
    pub tool_version: String,
    pub config: MergeConfig,
    /// Header fingerprints of the inputs at planning time, in model order.
    pub model_fingerprints: Vec<String>,
    pub decisions: Vec<MergeDecision>,
}

/// Applies the merge rule to each tensor of the base model: merge with the
/// configured weights iff the tensor is in the subset and its maximum
/// difference strictly exceeds delta; otherwise keep the base tensor.
pub fn plan_merge(
    config: &MergeConfig,
    models: &[CheckpointIndex],
    diffs: &[DiffRecord],
) -> Result<MergePlan> {
    config.validate()?;
    if models.len() != config.models.len() {
        return Err(Error::InvalidConfig(format!(
            "config names {} models but {} were opened",
            config.models.len(),
            models.len()
        )));
    }
    let base = &models[0];
    let by_name: HashMap<&str, &DiffRecord> = diffs.iter().map(|d| (d.name.as_str(), d)).collect();
    if by_name.len() != diffs.len() {
        return Err(Error::InvalidConfig("diff records contain duplicate names".into()));
    }
    if let Some(extra) = diffs.iter().find(|d| !base.tensors.contains_key(&d.name)) {
        return Err(Error::InvalidConfig(format!(
            "diff record {:?} is not a base tensor",
            extra.name
        )));
    }
    let mut decisions = Vec::with_capacity(base.len());
    for name in base.tensors.keys() {
        let record = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::InvalidConfig(format!("no diff record for tensor {name:?}")))?;
        decisions.push(decide(config, record));
    }
    Ok(MergePlan {
        tool_version: TOOL_VERSION.to_string(),
        config: config.clone(),
        model_fingerprints: models.iter().map(CheckpointIndex::fingerprint).collect(),
        decisions,
    })
}

pub(crate) fn decide(config: &MergeConfig, record: &DiffRecord) -> MergeDecision {
    let category = config.scheme.classify(&record.name);
    let in_subset = config.subset.contains(&record.name, &category);
    let action = if !in_subset {
        Action::CopyBase {
            reason: CopyReason::NotInSubset,
        }
    } else if record.max_diff.0 > config.delta {
        Action::Merge {
            lambdas: config.lambdas_for(&record.name).to_vec(),
        }
    } else {
        Action::CopyBase {
            reason: CopyReason::BelowThreshold,
        }
    };
    let equals_base = match &action {
        Action::CopyBase { .. } => true,
        Action::Merge { lambdas } => {
            one_hot(lambdas) == Some(0)
                || (record.max_diff.0 == 0.0 && config.convex_required)
        }
    };
    MergeDecision {
        name: record.name.clone(),
        category,
        action,
        max_diff: record.max_diff,
        equals_base,
    }
}

/// Merged / copied tensor counts per group.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub merged: u64,
    pub copied_not_in_subset: u64,
    pub copied_below_threshold: u64,
    pub equals_base: u64,
}

impl MergePlan {
    pub fn counts_by_group(&self) -> BTreeMap<Group, GroupCounts> {
        let mut out: BTreeMap<Group, GroupCounts> = BTreeMap::new();
        for d in &self.decisions {
            let c = out.entry(d.category.group).or_default();
            match d.action {
                Action::Merge { .. } => c.merged += 1,
                Action::CopyBase {
                    reason: CopyReason::NotInSubset,
                } => c.copied_not_in_subset += 1,
                Action::CopyBase {
                    reason: CopyReason::BelowThreshold,
                } => c.copied_below_threshold += 1,
            }
            if d.equals_base {
                c.equals_base += 1;
            }
        }
        out
    }

    pub fn merged_count(&self) -> usize {
        self.decisions.iter().filter(|d| d.is_merge()).count()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&text)
            .map_err(|e| Error::InvalidConfig(format!("plan {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Write(e.to_string()))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Human-readable per-group summary with delta-gate statistics.
    pub fn summary(&self) -> PlanSummary<'_> {
        PlanSummary(self)
    }
}

pub struct PlanSummary<'a>(&'a MergePlan);

impl fmt::Display for PlanSummary<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let plan = self.0;
        writeln!(
            f,
            "models: {}  lambdas: {:?}  delta: {}  subset: {}",
            plan.config.models.len(),
            plan.config.lambdas,
            plan.config.delta,
            plan.config.subset.label()
        )?;
        writeln!(
            f,
            "{:<20} {:>8} {:>12} {:>15} {:>12} {:>12} {:>12}",
            "group", "merged", "not_in_subset", "below_threshold", "equals_base", "min_diff", "max_diff"
        )?;
        let counts = plan.counts_by_group();
        for (group, c) in &counts {
            let diffs: Vec<f64> = plan
                .decisions
                .iter()
                .filter(|d| d.category.group == *group)
                .map(|d| d.max_diff.0)
                .collect();
            let min = diffs.iter().copied().fold(f64::INFINITY, f64::min);
            let max = diffs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            writeln!(
                f,
                "{:<20} {:>8} {:>12} {:>15} {:>12} {:>12.6e} {:>12.6e}",
                group.as_str(),
                c.merged,
                c.copied_not_in_subset,
                c.copied_below_threshold,
                c.equals_base,
                min,
                max
            )?;
        }
        write!(
            f,
            "total: {} tensors, {} merged",
            plan.decisions.len(),
            plan.merged_count()
        )
    }
}
