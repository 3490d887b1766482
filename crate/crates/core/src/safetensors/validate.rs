use std::fmt;

use serde::Serialize;

use super::header::expected_bytes;
use super::index::CheckpointIndex;
use crate::dtype::DType;

/// A structural problem found in one checkpoint or between checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    SizeMismatch {
        name: String,
        expected: u64,
        actual: u64,
    },
    Overlap {
        shard: String,
        first: String,
        second: String,
    },
    Gap {
        shard: String,
        begin: u64,
        end: u64,
    },
    OutOfRange {
        name: String,
        shard: String,
        end: u64,
        data_len: u64,
    },
    DanglingShard {
        name: String,
        shard: usize,
    },
    /// Tensor present in the first model but absent from `model` (1-based).
    MissingInModel {
        name: String,
        model: usize,
    },
    /// Tensor present in `model` (1-based) but absent from the first model.
    ExtraInModel {
        name: String,
        model: usize,
    },
    ShapeMismatch {
        name: String,
        model: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    DtypeMismatch {
        name: String,
        model: usize,
        expected: DType,
        actual: DType,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SizeMismatch {
                name,
                expected,
                actual,
            } => write!(
                f,
                "size mismatch: {name} needs {expected} bytes, offsets give {actual}"
            ),
            Violation::Overlap {
                shard,
                first,
                second,
            } => write!(f, "overlap in {shard}: {first} and {second}"),
            Violation::Gap { shard, begin, end } => {
                write!(f, "gap in {shard}: bytes [{begin}, {end}) unused")
            }
            Violation::OutOfRange {
                name,
                shard,
                end,
                data_len,
            } => write!(
                f,
                "out of range: {name} ends at {end} past {shard}'s {data_len} data bytes"
            ),
            Violation::DanglingShard { name, shard } => {
                write!(f, "dangling shard reference: {name} -> shard #{shard}")
            }
            Violation::MissingInModel { name, model } => {
                write!(f, "missing in model {model}: {name}")
            }
            Violation::ExtraInModel { name, model } => {
                write!(f, "extra in model {model}: {name}")
            }
            Violation::ShapeMismatch {
                name,
                model,
                expected,
                actual,
            } => write!(
                f,
                "shape mismatch in model {model}: {name} is {actual:?}, model 1 has {expected:?}"
            ),
            Violation::DtypeMismatch {
                name,
                model,
                expected,
                actual,
            } => write!(
                f,
                "dtype mismatch in model {model}: {name} is {actual}, model 1 has {expected}"
            ),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks byte-range consistency of every shard.
///
/// Coverage (gaps and overlaps) is computed from the extents implied by dtype
/// and shape, so a single corrupted end offset shows up once, as a size
/// mismatch, rather than also as a gap.
pub fn validate_checkpoint(index: &CheckpointIndex) -> ValidationReport {
    let mut violations = Vec::new();
    let mut per_shard: Vec<Vec<(u64, u64, &str)>> = vec![Vec::new(); index.shards.len()];
    for info in index.tensors.values() {
        let [begin, end] = info.data_offsets;
        let expected = expected_bytes(info.dtype, &info.shape).unwrap_or(u64::MAX);
        let actual = end.saturating_sub(begin);
        if expected != actual {
            violations.push(Violation::SizeMismatch {
                name: info.name.clone(),
                expected,
                actual,
            });
        }
        match per_shard.get_mut(info.shard) {
            Some(ranges) => ranges.push((begin, begin.saturating_add(expected), &info.name)),
            None => violations.push(Violation::DanglingShard {
                name: info.name.clone(),
                shard: info.shard,
            }),
        }
    }
    for (shard, mut ranges) in index.shards.iter().zip(per_shard) {
        ranges.sort();
        let mut cursor = 0u64;
        let mut last: Option<&str> = None;
        for &(begin, end, name) in &ranges {
            if begin > cursor {
                violations.push(Violation::Gap {
                    shard: shard.file_name.clone(),
                    begin: cursor,
                    end: begin,
                });
            } else if begin < cursor {
                violations.push(Violation::Overlap {
                    shard: shard.file_name.clone(),
                    first: last.unwrap_or_default().to_string(),
                    second: name.to_string(),
                });
            }
            if end > shard.data_len {
                violations.push(Violation::OutOfRange {
                    name: name.to_string(),
                    shard: shard.file_name.clone(),
                    end,
                    data_len: shard.data_len,
                });
            }
            if end >= cursor {
                cursor = end;
                last = Some(name);
            }
        }
        if cursor < shard.data_len {
            violations.push(Violation::Gap {
                shard: shard.file_name.clone(),
                begin: cursor,
                end: shard.data_len,
            });
        }
    }
    ValidationReport { violations }
}

/// Compares name sets, shapes and dtypes of every model against the first.
pub fn compare_checkpoints(models: &[&CheckpointIndex]) -> ValidationReport {
    let mut violations = Vec::new();
    let Some((first, rest)) = models.split_first() else {
        return ValidationReport::default();
    };
    for (i, other) in rest.iter().enumerate() {
        let model = i + 2;
        for (name, info) in &first.tensors {
            match other.get(name) {
                None => violations.push(Violation::MissingInModel {
                    name: name.clone(),
                    model,
                }),
                Some(o) => {
                    if o.shape != info.shape {
                        violations.push(Violation::ShapeMismatch {
                            name: name.clone(),
                            model,
                            expected: info.shape.clone(),
                            actual: o.shape.clone(),
                        });
                    }
                    if o.dtype != info.dtype {
                        violations.push(Violation::DtypeMismatch {
                            name: name.clone(),
                            model,
                            expected: info.dtype,
                            actual: o.dtype,
                        });
                    }
                }
            }
        }
        for name in other.tensors.keys() {
            if !first.tensors.contains_key(name) {
                violations.push(Violation::ExtraInModel {
                    name: name.clone(),
                    model,
                });
            }
        }
    }
    ValidationReport { violations }
}
