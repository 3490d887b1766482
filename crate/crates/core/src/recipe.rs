//! The declarative merge recipe, stored as TOML or JSON.
//!
//! Model paths and scheme paths are resolved against the directory holding
//! the recipe file. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::MergeConfig;
use crate::safetensors::OutputPolicy;
use crate::taxonomy::{NamingScheme, Rule, SubsetSpec};

/// A naming scheme given inline as a rule list or as a path to a scheme file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchemeSource {
    File(PathBuf),
    Inline(NamingScheme),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    /// Checkpoint paths; the first one is the base model.
    pub models: Vec<PathBuf>,
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub delta: f64,
    #[serde(default = "default_convex")]
    pub convex_required: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<SchemeSource>,
    #[serde(default)]
    pub subset: SubsetSpec,
    #[serde(default)]
    pub output: OutputPolicy,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub lambda_overrides: BTreeMap<String, Vec<f64>>,
}

fn default_convex() -> bool {
    true
}

/// On-disk scheme file: `{ "rules": [ { "pattern": .., "group": .. }, .. ] }`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemeFile {
    rules: Vec<Rule>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Toml,
    Json,
}

impl Format {
    /// `.json` files are JSON; everything else is read as TOML.
    pub fn of(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => Format::Json,
            _ => Format::Toml,
        }
    }
}

pub(crate) fn parse<T: for<'de> Deserialize<'de>>(text: &str, format: Format) -> std::result::Result<T, String> {
    match format {
        Format::Toml => toml::from_str(text).map_err(|e| e.to_string()),
        Format::Json => serde_json::from_str(text).map_err(|e| e.to_string()),
    }
}

impl Recipe {
    pub fn parse(text: &str, format: Format) -> Result<Self> {
        parse(text, format).map_err(Error::InvalidRecipe)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse(&text, Format::of(path))
            .map_err(|e| Error::InvalidRecipe(format!("{}: {e}", path.display())))
    }

    pub fn to_string(&self, format: Format) -> Result<String> {
        match format {
            Format::Toml => toml::to_string(self).map_err(|e| Error::InvalidRecipe(e.to_string())),
            Format::Json => serde_json::to_string_pretty(self)
                .map(|s| s + "\n")
                .map_err(|e| Error::InvalidRecipe(e.to_string())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_string(Format::of(path))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Builds a validated [`MergeConfig`]. Relative paths are joined onto
    /// `base_dir`. Without a `scheme` key, `default_scheme` is used, falling
    /// back to the built-in DeepSeek-V3 scheme.
    pub fn to_config(&self, base_dir: &Path, default_scheme: Option<&NamingScheme>) -> Result<MergeConfig> {
        let scheme = match &self.scheme {
            Some(SchemeSource::Inline(s)) => s.clone(),
            Some(SchemeSource::File(p)) => load_scheme(&resolve(base_dir, p))?,
            None => default_scheme.cloned().unwrap_or_default(),
        };
        let config = MergeConfig {
            models: self.models.iter().map(|m| resolve(base_dir, m)).collect(),
            lambdas: self.lambdas.clone(),
            delta: self.delta,
            subset: self.subset.clone(),
            scheme,
            convex_required: self.convex_required,
            output: self.output.clone(),
            lambda_overrides: self.lambda_overrides.clone(),
        };
        config.validate().map_err(|e| match e {
            Error::InvalidConfig(msg) => Error::InvalidRecipe(msg),
            other => other,
        })?;
        Ok(config)
    }

    /// Loads a recipe file and resolves it against its own directory.
    pub fn load_config(path: &Path, default_scheme: Option<&NamingScheme>) -> Result<MergeConfig> {
        let dir = path.parent().unwrap_or(Path::new("."));
        Recipe::load(path)?.to_config(dir, default_scheme)
    }
}

fn resolve(base_dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

/// Reads a scheme file (TOML or JSON, by extension).
pub fn load_scheme(path: &Path) -> Result<NamingScheme> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: SchemeFile = parse(&text, Format::of(path))
        .map_err(|e| Error::InvalidScheme(format!("{}: {e}", path.display())))?;
    NamingScheme::new(file.rules)
}

pub fn save_scheme(scheme: &NamingScheme, path: &Path) -> Result<()> {
    let file = SchemeFile {
        rules: scheme.rules().to_vec(),
    };
    let text = match Format::of(path) {
        Format::Toml => toml::to_string(&file).map_err(|e| Error::InvalidScheme(e.to_string()))?,
        Format::Json => serde_json::to_string_pretty(&file).map_err(|e| Error::InvalidScheme(e.to_string()))?,
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
