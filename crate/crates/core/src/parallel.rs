//! Bounded-memory batching over a rayon pool.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_RESIDENT_BYTES: u64 = 2 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecOptions {
    /// Worker threads; 0 uses one per available core.
    pub threads: usize,
    /// Upper bound on bytes of tensor data held at once. A single tensor that
    /// exceeds it is still processed alone.
    pub max_resident_bytes: u64,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions {
            threads: 0,
            max_resident_bytes: DEFAULT_MAX_RESIDENT_BYTES,
        }
    }
}

impl ExecOptions {
    pub fn with_threads(threads: usize) -> Self {
        ExecOptions {
            threads,
            ..Default::default()
        }
    }

    pub(crate) fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))
    }
}

/// Splits consecutive items into batches whose summed cost stays within
/// `budget`. Every batch holds at least one item.
pub fn batches(costs: &[u64], budget: u64) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut acc = 0u64;
    for (i, &c) in costs.iter().enumerate() {
        if i > start && acc.saturating_add(c) > budget {
            out.push(start..i);
            start = i;
            acc = 0;
        }
        acc = acc.saturating_add(c);
    }
    if start < costs.len() {
        out.push(start..costs.len());
    }
    out
}

/// Maps `f` over `items` in budgeted batches on `pool`, handing each finished
/// batch to `sink` in input order. Results never depend on the thread count.
pub(crate) fn map_batched<T, R, F, S>(
    pool: &rayon::ThreadPool,
    items: &[T],
    cost: impl Fn(&T) -> u64,
    budget: u64,
    f: F,
    mut sink: S,
) -> Result<()>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
    S: FnMut(&T, R) -> Result<()>,
{
    let costs: Vec<u64> = items.iter().map(cost).collect();
    for range in batches(&costs, budget) {
        let slice = &items[range];
        let results: Vec<R> = pool.install(|| slice.par_iter().map(&f).collect::<Result<_>>())?;
        for (item, r) in slice.iter().zip(results) {
            sink(item, r)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_respect_budget() {
        assert_eq!(batches(&[4, 4, 4], 8), vec![0..2, 2..3]);
        assert_eq!(batches(&[10, 1], 5), vec![0..1, 1..2]);
        assert_eq!(batches(&[], 5), Vec::<Range<usize>>::new());
        assert_eq!(batches(&[1, 1, 1], u64::MAX), vec![0..3]);
    }
}
