//! Diagnostic artifacts computed from difference records and transcripts.
//! Everything here emits data (CSV or JSON); nothing is rendered.

mod heatmap;
mod histogram;
mod reasoning;
mod summary;

pub use heatmap::{emit_heatmap, Aggregate, HeatmapColumn, HeatmapTable};
pub use histogram::{emit_histogram, CategoryHistogram, Histogram, HistogramSpec, DEFAULT_CUTOFF};
pub use reasoning::{
    reasoning_frequency, reasoning_frequency_file, ResponseTag, ReasoningStats, DEFAULT_CLOSE_TAG,
    DEFAULT_OPEN_TAG,
};
pub use summary::{summarize_diffs, DiffSummary, GroupDiffStats};
