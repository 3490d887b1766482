use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{one_hot, MergeConfig, CONVEX_TOLERANCE};
use super::diff::ensure_compatible;
use super::plan::{Action, GroupCounts, MergeDecision, MergePlan, TOOL_VERSION};
use crate::error::{Error, Result};
use crate::math::{decode, encode, linear_combination};
use crate::parallel::{map_batched, ExecOptions};
use crate::safetensors::{
    read_tensor_raw, CheckpointIndex, CheckpointWriter, TensorSpec, WriteLayout,
};
use crate::taxonomy::Group;

/// Where an output tensor's bytes came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Source {
    /// Raw bytes of the base model (copy decisions).
    Base,
    /// Raw bytes of one model (1-based) because the weights are one-hot on it.
    Model { index: usize },
    /// Raw base bytes because every input was byte-identical.
    IdenticalInputs,
    /// Decoded, combined and re-encoded.
    Computed,
    /// Dry run: nothing was produced.
    Planned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorOutcome {
    pub name: String,
    pub merged: bool,
    #[serde(flatten)]
    pub source: Source,
}

/// Non-finite elements seen in an input (or the output, `model = 0`) of a
/// computed merge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NonFiniteWarning {
    pub name: String,
    pub model: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub tool_version: String,
    pub dry_run: bool,
    pub output_dir: Option<PathBuf>,
    pub config: MergeConfig,
    pub model_fingerprints: Vec<String>,
    pub counts: BTreeMap<Group, GroupCounts>,
    pub tensors: Vec<TensorOutcome>,
    pub warnings: Vec<NonFiniteWarning>,
    pub elapsed_ms: u64,
}

impl MergeReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Write(e.to_string()))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Header metadata keys recording how a merged checkpoint was produced.
pub fn provenance_metadata(config: &MergeConfig) -> BTreeMap<String, String> {
    let paths: Vec<String> = config
        .models
        .iter()
        .map(|p| p.display().to_string())
        .collect();
    let mut md = BTreeMap::new();
    md.insert("aoe.base".into(), paths[0].clone());
    md.insert("aoe.models".into(), serde_json::to_string(&paths).unwrap());
    md.insert(
        "aoe.lambdas".into(),
        serde_json::to_string(&config.lambdas).unwrap(),
    );
    md.insert("aoe.delta".into(), format!("{:?}", config.delta));
    md.insert("aoe.subset".into(), config.subset.label());
    md.insert("aoe.tool_version".into(), TOOL_VERSION.to_string());
    md
}

/// The report a merge would produce, without reading or writing tensor data.
pub fn dry_run_report(plan: &MergePlan) -> MergeReport {
    MergeReport {
        tool_version: TOOL_VERSION.to_string(),
        dry_run: true,
        output_dir: None,
        config: plan.config.clone(),
        model_fingerprints: plan.model_fingerprints.clone(),
        counts: plan.counts_by_group(),
        tensors: plan
            .decisions
            .iter()
            .map(|d| TensorOutcome {
                name: d.name.clone(),
                merged: d.is_merge(),
                source: Source::Planned,
            })
            .collect(),
        warnings: Vec::new(),
        elapsed_ms: 0,
    }
}

/// Executes a plan as a streaming pass over the base model's tensors.
///
/// Copy decisions carry the base model's raw bytes. Merge decisions decode all
/// parents, combine them in f64 and re-encode to the tensor's dtype, except
/// when the weights are one-hot (raw bytes of that model) or all parents are
/// byte-identical under convex weights (raw base bytes).
pub fn execute_merge(
    plan: &MergePlan,
    models: &[CheckpointIndex],
    out_dir: &Path,
    opts: &ExecOptions,
) -> Result<MergeReport> {
    let start = Instant::now();
    let config = &plan.config;
    config.validate()?;
    if models.len() != config.models.len() || plan.model_fingerprints.len() != models.len() {
        return Err(Error::InvalidConfig(format!(
            "plan names {} models but {} were opened",
            config.models.len(),
            models.len()
        )));
    }
    for (i, (m, fp)) in models.iter().zip(&plan.model_fingerprints).enumerate() {
        if &m.fingerprint() != fp {
            return Err(Error::HashMismatch(format!(
                "model {} ({}) headers differ from the planned fingerprint",
                i + 1,
                m.root.display()
            )));
        }
    }
    ensure_compatible(models)?;
    let base = &models[0];

    let mut by_name: HashMap<&str, &MergeDecision> = HashMap::with_capacity(plan.decisions.len());
    for d in &plan.decisions {
        if by_name.insert(d.name.as_str(), d).is_some() {
            return Err(Error::InvalidConfig(format!(
                "plan lists {:?} more than once",
                d.name
            )));
        }
        if !base.tensors.contains_key(&d.name) {
            return Err(Error::InvalidConfig(format!(
                "plan tensor {:?} is not in the base model",
                d.name
            )));
        }
        if let Action::Merge { lambdas } = &d.action {
            if lambdas.len() != models.len() {
                return Err(Error::InvalidConfig(format!(
                    "decision for {:?} has {} weights for {} models",
                    d.name,
                    lambdas.len(),
                    models.len()
                )));
            }
        }
    }
    if let Some(missing) = base.tensors.keys().find(|n| !by_name.contains_key(n.as_str())) {
        return Err(Error::InvalidConfig(format!(
            "plan has no decision for base tensor {missing:?}"
        )));
    }

    let specs: Vec<TensorSpec> = base.tensors.values().map(TensorSpec::from).collect();
    let layout = WriteLayout::from_policy(&config.output, Some(base), specs)?
        .with_metadata(&provenance_metadata(config));
    let order: Vec<&MergeDecision> = layout
        .write_order()
        .map(|t| by_name[t.name.as_str()])
        .collect();
    let mut writer = CheckpointWriter::create(out_dir, layout)?;

    let pool = opts.pool()?;
    let n = models.len() as u64;
    let mut outcomes = Vec::with_capacity(order.len());
    let mut warnings = Vec::new();
    let mut written = HashSet::with_capacity(order.len());
    map_batched(
        &pool,
        &order,
        |d| {
            let info = &base.tensors[&d.name];
            match d.action {
                Action::CopyBase { .. } => info.byte_len(),
                Action::Merge { .. } => n * info.byte_len() + 8 * (n + 1) * info.numel() + info.byte_len(),
            }
        },
        opts.max_resident_bytes,
        |d| {
            produce(d, models, config.convex_required)
                .map_err(|e| e.context(format!("merging {:?}", d.name)))
        },
        |d, (bytes, source, warns)| {
            writer.write_tensor(&d.name, &bytes)?;
            written.insert(d.name.clone());
            outcomes.push(TensorOutcome {
                name: d.name.clone(),
                merged: d.is_merge(),
                source,
            });
            warnings.extend(warns);
            Ok(())
        },
    )?;
    writer.finish()?;
    debug_assert_eq!(written.len(), plan.decisions.len());
    for w in &warnings {
        log::warn!("{}: {} non-finite values (model {})", w.name, w.count, w.model);
    }

    Ok(MergeReport {
        tool_version: TOOL_VERSION.to_string(),
        dry_run: false,
        output_dir: Some(out_dir.to_path_buf()),
        config: config.clone(),
        model_fingerprints: plan.model_fingerprints.clone(),
        counts: plan.counts_by_group(),
        tensors: outcomes,
        warnings,
        elapsed_ms: start.elapsed().as_millis() as u64,
    })
}

type Produced = (Vec<u8>, Source, Vec<NonFiniteWarning>);

fn produce(d: &MergeDecision, models: &[CheckpointIndex], convex: bool) -> Result<Produced> {
    let lambdas = match &d.action {
        Action::CopyBase { .. } => {
            return Ok((read_tensor_raw(&models[0], &d.name)?, Source::Base, Vec::new()))
        }
        Action::Merge { lambdas } => lambdas,
    };
    if let Some(k) = one_hot(lambdas) {
        let raw = read_tensor_raw(&models[k], &d.name)?;
        let source = if k == 0 {
            Source::Base
        } else {
            Source::Model { index: k + 1 }
        };
        return Ok((raw, source, Vec::new()));
    }
    let dtype = models[0].tensors[&d.name].dtype;
    let mut raws = Vec::with_capacity(models.len());
    for (i, m) in models.iter().enumerate() {
        let info = m
            .get(&d.name)
            .ok_or_else(|| Error::TensorNotFound(d.name.clone()))?;
        if info.dtype != dtype {
            return Err(Error::DtypeMismatch {
                name: d.name.clone(),
                detail: format!("model {} is {}, base is {dtype}", i + 1, info.dtype),
            });
        }
        raws.push(read_tensor_raw(m, &d.name)?);
    }
    let lambda_sum: f64 = lambdas.iter().sum();
    if convex
        && (lambda_sum - 1.0).abs() <= CONVEX_TOLERANCE
        && raws[1..].iter().all(|r| r == &raws[0])
    {
        let raw = raws.swap_remove(0);
        return Ok((raw, Source::IdenticalInputs, Vec::new()));
    }
    let mut warnings = Vec::new();
    let mut decoded = Vec::with_capacity(raws.len());
    for (i, raw) in raws.iter().enumerate() {
        let buf = decode(raw, dtype)?;
        let bad = buf.non_finite_count();
        if bad > 0 {
            warnings.push(NonFiniteWarning {
                name: d.name.clone(),
                model: i + 1,
                count: bad,
            });
        }
        decoded.push(buf);
    }
    drop(raws);
    let refs: Vec<&[f64]> = decoded.iter().map(|b| &b[..]).collect();
    let out = linear_combination(&refs, lambdas)?;
    let bad = out.non_finite_count();
    if bad > 0 {
        warnings.push(NonFiniteWarning {
            name: d.name.clone(),
            model: 0,
            count: bad,
        });
    }
    Ok((encode(&out, dtype), Source::Computed, warnings))
}
