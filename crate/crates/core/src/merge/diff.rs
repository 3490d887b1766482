use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{normalized_frobenius_diff, NormValue};
use crate::parallel::{map_batched, ExecOptions};
use crate::safetensors::{
    compare_checkpoints, read_tensor, CheckpointIndex, TensorInfo, ValidationReport,
};
use crate::taxonomy::{NamingScheme, TensorCategory};

/// Per-tensor difference between the base model and every other model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffRecord {
    pub name: String,
    pub category: TensorCategory,
    /// Diffs against models 2..=n, in model order.
    pub per_model_diff: Vec<NormValue>,
    /// Maximum of `per_model_diff` (NaN if any entry is NaN; 0 for one model).
    pub max_diff: NormValue,
}

/// Maximum that propagates NaN rather than skipping it.
pub fn max_norm(values: &[NormValue]) -> NormValue {
    values.iter().fold(NormValue::ZERO, |acc, v| {
        if acc.0.is_nan() || v.0.is_nan() {
            NormValue(f64::NAN)
        } else if v.0 > acc.0 {
            *v
        } else {
            acc
        }
    })
}

/// Empty iff all models share name set, shapes and dtypes.
pub fn validate_compatibility(models: &[CheckpointIndex]) -> ValidationReport {
    let refs: Vec<&CheckpointIndex> = models.iter().collect();
    compare_checkpoints(&refs)
}

pub(crate) fn ensure_compatible(models: &[CheckpointIndex]) -> Result<()> {
    let report = validate_compatibility(models);
    if report.is_empty() {
        Ok(())
    } else {
        Err(Error::Incompatible(report.to_string()))
    }
}

/// Streams every tensor of the base model and its counterparts, one tensor per
/// model per worker at a time.
pub fn compute_diffs(
    models: &[CheckpointIndex],
    scheme: &NamingScheme,
    opts: &ExecOptions,
) -> Result<Vec<DiffRecord>> {
    let Some(base) = models.first() else {
        return Err(Error::InvalidConfig("no models given".into()));
    };
    ensure_compatible(models)?;
    let infos: Vec<&TensorInfo> = base.tensors.values().collect();
    if models.len() == 1 {
        return Ok(infos
            .iter()
            .map(|i| DiffRecord {
                name: i.name.clone(),
                category: scheme.classify(&i.name),
                per_model_diff: Vec::new(),
                max_diff: NormValue::ZERO,
            })
            .collect());
    }
    let pool = opts.pool()?;
    let n = models.len() as u64;
    let mut out = Vec::with_capacity(infos.len());
    map_batched(
        &pool,
        &infos,
        |info| n * (info.byte_len() + 8 * info.numel()),
        opts.max_resident_bytes,
        |info| diff_one(models, &info.name).map_err(|e| e.context(format!("diffing {:?}", info.name))),
        |info, per_model_diff| {
            out.push(DiffRecord {
                name: info.name.clone(),
                category: scheme.classify(&info.name),
                max_diff: max_norm(&per_model_diff),
                per_model_diff,
            });
            Ok(())
        },
    )?;
    Ok(out)
}

fn diff_one(models: &[CheckpointIndex], name: &str) -> Result<Vec<NormValue>> {
    let base = read_tensor(&models[0], name)?;
    models[1..]
        .iter()
        .map(|m| {
            let other = read_tensor(m, name)?;
            if other.info.dtype != base.info.dtype {
                return Err(Error::DtypeMismatch {
                    name: name.to_string(),
                    detail: format!("{} vs {}", base.info.dtype, other.info.dtype),
                });
            }
            normalized_frobenius_diff(&base.values, &other.values)
        })
        .collect()
}

/// On-disk diff cache keyed by the header fingerprints of the inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffCache {
    pub version: u32,
    pub models: Vec<CachedModel>,
    pub records: Vec<DiffRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedModel {
    pub path: PathBuf,
    pub fingerprint: String,
}

impl DiffCache {
    pub const VERSION: u32 = 1;

    pub fn new(models: &[CheckpointIndex], records: Vec<DiffRecord>) -> Self {
        DiffCache {
            version: Self::VERSION,
            models: models
                .iter()
                .map(|m| CachedModel {
                    path: m.root.clone(),
                    fingerprint: m.fingerprint(),
                })
                .collect(),
            records,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&text)
            .map_err(|e| Error::MalformedHeader(format!("diff cache {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Write(e.to_string()))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn matches(&self, models: &[CheckpointIndex]) -> bool {
        self.version == Self::VERSION
            && self.models.len() == models.len()
            && self
                .models
                .iter()
                .zip(models)
                .all(|(c, m)| c.fingerprint == m.fingerprint())
    }

    /// Records with categories recomputed under `scheme`.
    pub fn records_for(&self, scheme: &NamingScheme) -> Vec<DiffRecord> {
        self.records
            .iter()
            .map(|r| DiffRecord {
                category: scheme.classify(&r.name),
                ..r.clone()
            })
            .collect()
    }
}

/// Reuses the cache at `cache` when its fingerprints match the models,
/// otherwise computes diffs and (if a path is given) writes the cache.
/// Returns the records and whether the cache was reused.
pub fn load_or_compute_diffs(
    cache: Option<&Path>,
    models: &[CheckpointIndex],
    scheme: &NamingScheme,
    opts: &ExecOptions,
) -> Result<(Vec<DiffRecord>, bool)> {
    if let Some(path) = cache {
        if path.is_file() {
            if let Ok(c) = DiffCache::load(path) {
                if c.matches(models) {
                    return Ok((c.records_for(scheme), true));
                }
            }
        }
    }
    let records = compute_diffs(models, scheme, opts)?;
    if let Some(path) = cache {
        DiffCache::new(models, records.clone()).save(path)?;
    }
    Ok((records, false))
}
