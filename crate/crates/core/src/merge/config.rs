use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::safetensors::OutputPolicy;
use crate::taxonomy::{NamingScheme, SubsetSpec};

/// Tolerance on `Σλ = 1` for convex weights.
pub const CONVEX_TOLERANCE: f64 = 1e-12;

/// Everything that determines a merge. `models[0]` is the base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeConfig {
    pub models: Vec<PathBuf>,
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub delta: f64,
    #[serde(default)]
    pub subset: SubsetSpec,
    #[serde(default)]
    pub scheme: NamingScheme,
    #[serde(default = "default_convex")]
    pub convex_required: bool,
    #[serde(default)]
    pub output: OutputPolicy,
    /// Per-tensor weights replacing `lambdas` for the named tensors.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub lambda_overrides: BTreeMap<String, Vec<f64>>,
}

fn default_convex() -> bool {
    true
}

impl MergeConfig {
    pub fn new(models: Vec<PathBuf>, lambdas: Vec<f64>) -> Self {
        MergeConfig {
            models,
            lambdas,
            delta: 0.0,
            subset: SubsetSpec::full(),
            scheme: NamingScheme::deepseek_v3(),
            convex_required: true,
            output: OutputPolicy::MirrorSource,
            lambda_overrides: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::InvalidConfig("models: at least one model is required".into()));
        }
        check_lambdas("lambdas", &self.lambdas, self.models.len(), self.convex_required)?;
        for (name, l) in &self.lambda_overrides {
            check_lambdas(
                &format!("lambda_overrides[{name:?}]"),
                l,
                self.models.len(),
                self.convex_required,
            )?;
        }
        if !self.delta.is_finite() || self.delta < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "delta: must be a finite number >= 0, got {}",
                self.delta
            )));
        }
        if let OutputPolicy::Sequential {
            max_shard_bytes, ..
        } = self.output
        {
            if max_shard_bytes == 0 {
                return Err(Error::InvalidConfig(
                    "output.max_shard_bytes: must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn lambdas_for(&self, name: &str) -> &[f64] {
        self.lambda_overrides
            .get(name)
            .map(Vec::as_slice)
            .unwrap_or(&self.lambdas)
    }
}

fn check_lambdas(field: &str, lambdas: &[f64], n: usize, convex: bool) -> Result<()> {
    if lambdas.len() != n {
        return Err(Error::InvalidConfig(format!(
            "{field}: {} coefficients for {n} models",
            lambdas.len()
        )));
    }
    if let Some(bad) = lambdas.iter().find(|l| !l.is_finite()) {
        return Err(Error::InvalidConfig(format!("{field}: {bad} is not finite")));
    }
    if convex {
        if let Some(neg) = lambdas.iter().find(|&&l| l < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "{field}: {neg} is negative; set convex_required = false for affine weights"
            )));
        }
        let sum: f64 = lambdas.iter().sum();
        if (sum - 1.0).abs() > CONVEX_TOLERANCE {
            return Err(Error::InvalidConfig(format!(
                "{field}: coefficients sum to {sum}, not 1; set convex_required = false for affine weights"
            )));
        }
    }
    Ok(())
}

/// Index of the model carrying all the weight when `lambdas` is exactly one-hot.
pub fn one_hot(lambdas: &[f64]) -> Option<usize> {
    let hot = lambdas.iter().position(|&l| l == 1.0)?;
    lambdas
        .iter()
        .enumerate()
        .all(|(i, &l)| i == hot || l == 0.0)
        .then_some(hot)
}
