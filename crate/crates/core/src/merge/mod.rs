//! The merge itself: per-tensor difference gates, an auditable plan, and a
//! streaming executor.
//!
//! For each tensor `l` of the base model, the output is
//! `Σ_i λ_i · W_l^(i)` when `l` is in the configured subset and the largest
//! normalized Frobenius difference between the base and any other model is
//! strictly greater than `delta`; otherwise it is the base tensor unchanged.

mod config;
mod diff;
mod execute;
mod plan;
mod sweep;

pub use config::{one_hot, MergeConfig, CONVEX_TOLERANCE};
pub use diff::{
    compute_diffs, load_or_compute_diffs, max_norm, validate_compatibility, CachedModel,
    DiffCache, DiffRecord,
};
pub use execute::{
    dry_run_report, execute_merge, provenance_metadata, MergeReport, NonFiniteWarning, Source,
    TensorOutcome,
};
pub use plan::{
    plan_merge, Action, CopyReason, GroupCounts, MergeDecision, MergePlan, PlanSummary,
    TOOL_VERSION,
};
pub use sweep::{threshold_sweep, SweepRow, SweepTable};
