use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::DiffRecord;
use crate::taxonomy::Group;

pub const DEFAULT_CUTOFF: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramSpec {
    pub edges: Vec<f64>,
    /// Records with a difference below this value are excluded.
    #[serde(default = "default_cutoff")]
    pub cutoff: f64,
}

fn default_cutoff() -> f64 {
    DEFAULT_CUTOFF
}

impl HistogramSpec {
    pub fn new(edges: Vec<f64>, cutoff: f64) -> Result<Self> {
        let spec = HistogramSpec { edges, cutoff };
        spec.validate()?;
        Ok(spec)
    }

    /// `bins` logarithmically spaced bins covering `[lo, hi]`.
    pub fn log_spaced(lo: f64, hi: f64, bins: usize, cutoff: f64) -> Result<Self> {
        if !(lo > 0.0 && hi > lo && lo.is_finite() && hi.is_finite()) || bins == 0 {
            return Err(Error::InvalidHistogram(format!(
                "log-spaced bins need 0 < lo < hi and at least one bin, got lo={lo}, hi={hi}, bins={bins}"
            )));
        }
        let (a, b) = (lo.log10(), hi.log10());
        let mut edges: Vec<f64> = (0..=bins)
            .map(|i| 10f64.powf(a + (b - a) * i as f64 / bins as f64))
            .collect();
        edges[0] = lo;
        edges[bins] = hi;
        Self::new(edges, cutoff)
    }

    pub fn validate(&self) -> Result<()> {
        if self.edges.len() < 2 {
            return Err(Error::InvalidHistogram(
                "at least two bin edges are required".into(),
            ));
        }
        if self.edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidHistogram("bin edges must be finite".into()));
        }
        if let Some(w) = self.edges.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::InvalidHistogram(format!(
                "bin edges must be strictly increasing ({} is followed by {})",
                w[0], w[1]
            )));
        }
        if self.cutoff.is_nan() {
            return Err(Error::InvalidHistogram("cutoff is NaN".into()));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    /// Bins are `[lo, hi)` except the last, which is closed.
    fn bin_of(&self, v: f64) -> Option<usize> {
        let last = *self.edges.last().unwrap();
        if v < self.edges[0] || v > last {
            return None;
        }
        if v == last {
            return Some(self.bins() - 1);
        }
        Some(self.edges.partition_point(|&e| e <= v) - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryHistogram {
    pub group: Group,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub spec: HistogramSpec,
    /// One entry per group present in the input, in [`Group::ALL`] order.
    pub categories: Vec<CategoryHistogram>,
    pub total: u64,
    /// Sum of the three exclusion reasons below.
    pub excluded: u64,
    pub below_cutoff: u64,
    pub out_of_range: u64,
    pub non_finite: u64,
}

/// Counts records per group and bin. A record is excluded when its difference
/// is below the cutoff, is NaN or infinite, or falls outside the bin edges.
pub fn emit_histogram(diffs: &[DiffRecord], spec: &HistogramSpec) -> Result<Histogram> {
    spec.validate()?;
    let mut counts: BTreeMap<Group, Vec<u64>> = BTreeMap::new();
    let (mut below, mut outside, mut non_finite) = (0u64, 0u64, 0u64);
    for r in diffs {
        let row = counts
            .entry(r.category.group)
            .or_insert_with(|| vec![0; spec.bins()]);
        let v = r.max_diff.0;
        if !v.is_finite() {
            non_finite += 1;
        } else if v < spec.cutoff {
            below += 1;
        } else if let Some(b) = spec.bin_of(v) {
            row[b] += 1;
        } else {
            outside += 1;
        }
    }
    Ok(Histogram {
        spec: spec.clone(),
        categories: counts
            .into_iter()
            .map(|(group, counts)| CategoryHistogram { group, counts })
            .collect(),
        total: diffs.len() as u64,
        excluded: below + outside + non_finite,
        below_cutoff: below,
        out_of_range: outside,
        non_finite,
    })
}

impl Histogram {
    pub fn counts(&self, group: Group) -> Option<&[u64]> {
        self.categories
            .iter()
            .find(|c| c.group == group)
            .map(|c| c.counts.as_slice())
    }

    pub fn included(&self) -> u64 {
        self.categories.iter().flat_map(|c| &c.counts).sum()
    }

    /// Columns `category,bin_lo,bin_hi,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,bin_lo,bin_hi,count\n");
        for c in &self.categories {
            for (i, n) in c.counts.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{},{}",
                    c.group,
                    self.spec.edges[i],
                    self.spec.edges[i + 1],
                    n
                )
                .unwrap();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::NormValue;
    use crate::taxonomy::TensorCategory;

    fn rec(group: Group, d: f64) -> DiffRecord {
        DiffRecord {
            name: String::new(),
            category: TensorCategory {
                group,
                layer: None,
                expert: None,
                projection: None,
            },
            per_model_diff: vec![NormValue(d)],
            max_diff: NormValue(d),
        }
    }

    #[test]
    fn rejects_bad_edges() {
        assert!(HistogramSpec::new(vec![0.1, 0.1], 0.0).is_err());
        assert!(HistogramSpec::new(vec![0.2, 0.1], 0.0).is_err());
        assert!(HistogramSpec::new(vec![0.2], 0.0).is_err());
        assert!(HistogramSpec::new(vec![0.1, f64::NAN], 0.0).is_err());
    }

    #[test]
    fn bin_boundaries() {
        let s = HistogramSpec::new(vec![1.0, 2.0, 3.0], 0.0).unwrap();
        assert_eq!(s.bin_of(1.0), Some(0));
        assert_eq!(s.bin_of(1.999), Some(0));
        assert_eq!(s.bin_of(2.0), Some(1));
        assert_eq!(s.bin_of(3.0), Some(1));
        assert_eq!(s.bin_of(3.0001), None);
        assert_eq!(s.bin_of(0.5), None);
    }

    #[test]
    fn exclusions_are_accounted() {
        let s = HistogramSpec::new(vec![0.001, 0.003, 0.005], DEFAULT_CUTOFF).unwrap();
        let diffs = vec![
            rec(Group::Attention, 0.0005),
            rec(Group::Attention, 0.004),
            rec(Group::Attention, 0.01),
            rec(Group::Other, f64::NAN),
        ];
        let h = emit_histogram(&diffs, &s).unwrap();
        assert_eq!(h.counts(Group::Attention), Some(&[0, 1][..]));
        assert_eq!(h.counts(Group::Other), Some(&[0, 0][..]));
        assert_eq!((h.below_cutoff, h.out_of_range, h.non_finite), (1, 1, 1));
        assert_eq!(h.included() + h.excluded, h.total);
    }

    #[test]
    fn log_spaced_edges_hit_endpoints() {
        let s = HistogramSpec::log_spaced(1e-4, 1e-1, 3, 0.0).unwrap();
        assert_eq!(s.edges.len(), 4);
        assert_eq!(s.edges[0], 1e-4);
        assert_eq!(s.edges[3], 1e-1);
    }
}
