//! Name-driven classification of tensors into structural groups, and subset
//! membership.
//!
//! Rule patterns match whole tensor names. Syntax:
//!
//! * `{layer}` and `{expert}` capture a decimal index,
//! * `{proj}` captures one dot-free name segment (the projection label),
//! * `*` matches any run of characters, dots included,
//! * everything else is literal.
//!
//! Rules are tried in order and the first match wins; unmatched names fall
//! into [`Group::Other`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::safetensors::CheckpointIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Attention,
    RoutedExpertMlp,
    SharedExpertMlp,
    ExpertGate,
    DenseMlp,
    EmbeddingNormHead,
    Other,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::Attention,
        Group::RoutedExpertMlp,
        Group::SharedExpertMlp,
        Group::ExpertGate,
        Group::DenseMlp,
        Group::EmbeddingNormHead,
        Group::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Attention => "attention",
            Group::RoutedExpertMlp => "routed_expert_mlp",
            Group::SharedExpertMlp => "shared_expert_mlp",
            Group::ExpertGate => "expert_gate",
            Group::DenseMlp => "dense_mlp",
            Group::EmbeddingNormHead => "embedding_norm_head",
            Group::Other => "other",
        }
    }

    /// Groups that always belong to a decoder layer.
    pub fn is_per_layer(self) -> bool {
        !matches!(self, Group::EmbeddingNormHead | Group::Other)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorCategory {
    pub group: Group,
    pub layer: Option<u32>,
    pub expert: Option<u32>,
    pub projection: Option<String>,
}

impl TensorCategory {
    pub fn other() -> Self {
        TensorCategory {
            group: Group::Other,
            layer: None,
            expert: None,
            projection: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub pattern: String,
    pub group: Group,
    /// Fixed projection label, used when the pattern has no `{proj}` slot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection: Option<String>,
}

impl Rule {
    pub fn new(pattern: &str, group: Group) -> Self {
        Rule {
            pattern: pattern.to_string(),
            group,
            projection: None,
        }
    }
}

/// Compiles a name pattern into an anchored regex.
pub fn compile_pattern(pattern: &str) -> Result<Regex> {
    let mut re = String::from("^");
    let mut rest = pattern;
    let mut seen = BTreeSet::new();
    while let Some(c) = rest.chars().next() {
        if c == '{' {
            let close = rest.find('}').ok_or_else(|| {
                Error::InvalidScheme(format!("unclosed '{{' in pattern {pattern:?}"))
            })?;
            let slot = &rest[1..close];
            let piece = match slot {
                "layer" => r"(?P<layer>\d+)",
                "expert" => r"(?P<expert>\d+)",
                "proj" => r"(?P<proj>[^.]+)",
                other => {
                    return Err(Error::InvalidScheme(format!(
                        "unknown capture {{{other}}} in pattern {pattern:?}"
                    )))
                }
            };
            if !seen.insert(slot) {
                return Err(Error::InvalidScheme(format!(
                    "capture {{{slot}}} repeated in pattern {pattern:?}"
                )));
            }
            re.push_str(piece);
            rest = &rest[close + 1..];
        } else if c == '*' {
            re.push_str(".*");
            rest = &rest[1..];
        } else {
            re.push_str(&regex::escape(&c.to_string()));
            rest = &rest[c.len_utf8()..];
        }
    }
    re.push('$');
    Regex::new(&re).map_err(|e| Error::InvalidScheme(format!("pattern {pattern:?}: {e}")))
}

/// Ordered classification rules.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "Vec<Rule>", into = "Vec<Rule>")]
pub struct NamingScheme {
    rules: Vec<Rule>,
    compiled: Vec<Regex>,
}

impl PartialEq for NamingScheme {
    fn eq(&self, other: &Self) -> bool {
        self.rules == other.rules
    }
}

impl TryFrom<Vec<Rule>> for NamingScheme {
    type Error = Error;

    fn try_from(rules: Vec<Rule>) -> Result<Self> {
        NamingScheme::new(rules)
    }
}

impl From<NamingScheme> for Vec<Rule> {
    fn from(s: NamingScheme) -> Self {
        s.rules
    }
}

impl Default for NamingScheme {
    fn default() -> Self {
        NamingScheme::deepseek_v3()
    }
}

impl NamingScheme {
    pub fn new(rules: Vec<Rule>) -> Result<Self> {
        let compiled = rules
            .iter()
            .map(|r| {
                let re = compile_pattern(&r.pattern)?;
                let has = |slot: &str| re.capture_names().flatten().any(|n| n == slot);
                if r.group.is_per_layer() && !has("layer") {
                    return Err(Error::InvalidScheme(format!(
                        "rule {:?} for {} must capture {{layer}}",
                        r.pattern, r.group
                    )));
                }
                if r.group == Group::RoutedExpertMlp && !has("expert") {
                    return Err(Error::InvalidScheme(format!(
                        "rule {:?} for {} must capture {{expert}}",
                        r.pattern, r.group
                    )));
                }
                Ok(re)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NamingScheme { rules, compiled })
    }

    /// A scheme with no rules: everything is [`Group::Other`].
    pub fn empty() -> Self {
        NamingScheme {
            rules: Vec::new(),
            compiled: Vec::new(),
        }
    }

    /// Hugging Face DeepSeek-V3 naming. Every layer norm, including the
    /// low-rank norms inside attention, is classed as embedding/norm/head.
    pub fn deepseek_v3() -> Self {
        let rules = vec![
            Rule::new("model.embed_tokens.*", Group::EmbeddingNormHead),
            Rule::new("lm_head.*", Group::EmbeddingNormHead),
            Rule::new("model.norm.*", Group::EmbeddingNormHead),
            Rule::new("model.layers.{layer}.*layernorm*", Group::EmbeddingNormHead),
            Rule::new("model.layers.{layer}.self_attn.{proj}.*", Group::Attention),
            Rule::new(
                "model.layers.{layer}.mlp.experts.{expert}.{proj}.*",
                Group::RoutedExpertMlp,
            ),
            Rule::new(
                "model.layers.{layer}.mlp.shared_experts.{proj}.*",
                Group::SharedExpertMlp,
            ),
            Rule::new("model.layers.{layer}.mlp.gate.*", Group::ExpertGate),
            Rule::new("model.layers.{layer}.mlp.{proj}.*", Group::DenseMlp),
        ];
        NamingScheme::new(rules).expect("built-in scheme is valid")
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn classify(&self, name: &str) -> TensorCategory {
        for (rule, re) in self.rules.iter().zip(&self.compiled) {
            let Some(caps) = re.captures(name) else {
                continue;
            };
            let index = |slot: &str| caps.name(slot).and_then(|m| m.as_str().parse::<u32>().ok());
            let group = rule.group;
            let layer = if group.is_per_layer() {
                index("layer")
            } else {
                None
            };
            let expert = if group == Group::RoutedExpertMlp {
                index("expert")
            } else {
                None
            };
            let projection = caps
                .name("proj")
                .map(|m| m.as_str().to_string())
                .or_else(|| rule.projection.clone());
            return TensorCategory {
                group,
                layer,
                expert,
                projection,
            };
        }
        TensorCategory::other()
    }
}

/// Free function form of [`NamingScheme::classify`].
pub fn classify(name: &str, scheme: &NamingScheme) -> TensorCategory {
    scheme.classify(name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubsetMode {
    /// Every tensor is merged.
    Full,
    /// Only routed-expert tensors; router gates are excluded.
    ExpertsOnly,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetPattern {
    pub pattern: String,
    #[serde(default = "yes")]
    pub include: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubsetRepr {
    mode: SubsetMode,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    groups: BTreeSet<Group>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    patterns: Vec<SubsetPattern>,
}

/// Which tensors are eligible for merging.
///
/// Custom subsets consult `patterns` first, in order; the first matching
/// pattern decides inclusion. Names matching no pattern are included iff their
/// group is listed in `groups`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "SubsetRepr", into = "SubsetRepr")]
pub struct SubsetSpec {
    pub mode: SubsetMode,
    pub groups: BTreeSet<Group>,
    pub patterns: Vec<SubsetPattern>,
    compiled: Vec<Regex>,
}

impl PartialEq for SubsetSpec {
    fn eq(&self, other: &Self) -> bool {
        self.mode == other.mode && self.groups == other.groups && self.patterns == other.patterns
    }
}

impl TryFrom<SubsetRepr> for SubsetSpec {
    type Error = Error;

    fn try_from(r: SubsetRepr) -> Result<Self> {
        if r.mode != SubsetMode::Custom && !(r.groups.is_empty() && r.patterns.is_empty()) {
            return Err(Error::InvalidConfig(
                "subset groups/patterns are only allowed with mode = \"custom\"".into(),
            ));
        }
        SubsetSpec::custom_with(r.mode, r.groups, r.patterns)
    }
}

impl From<SubsetSpec> for SubsetRepr {
    fn from(s: SubsetSpec) -> Self {
        SubsetRepr {
            mode: s.mode,
            groups: s.groups,
            patterns: s.patterns,
        }
    }
}

impl SubsetSpec {
    pub fn full() -> Self {
        SubsetSpec {
            mode: SubsetMode::Full,
            groups: BTreeSet::new(),
            patterns: Vec::new(),
            compiled: Vec::new(),
        }
    }

    pub fn experts_only() -> Self {
        SubsetSpec {
            mode: SubsetMode::ExpertsOnly,
            ..SubsetSpec::full()
        }
    }

    pub fn custom(groups: BTreeSet<Group>, patterns: Vec<SubsetPattern>) -> Result<Self> {
        SubsetSpec::custom_with(SubsetMode::Custom, groups, patterns)
    }

    fn custom_with(
        mode: SubsetMode,
        groups: BTreeSet<Group>,
        patterns: Vec<SubsetPattern>,
    ) -> Result<Self> {
        let compiled = patterns
            .iter()
            .map(|p| compile_pattern(&p.pattern))
            .collect::<Result<Vec<_>>>()?;
        Ok(SubsetSpec {
            mode,
            groups,
            patterns,
            compiled,
        })
    }

    /// Short label: `full`, `experts-only`, or the custom spec as JSON.
    pub fn label(&self) -> String {
        match self.mode {
            SubsetMode::Full => "full".into(),
            SubsetMode::ExpertsOnly => "experts-only".into(),
            SubsetMode::Custom => serde_json::to_string(self).unwrap_or_else(|_| "custom".into()),
        }
    }

    pub fn contains(&self, name: &str, category: &TensorCategory) -> bool {
        match self.mode {
            SubsetMode::Full => true,
            SubsetMode::ExpertsOnly => category.group == Group::RoutedExpertMlp,
            SubsetMode::Custom => {
                for (p, re) in self.patterns.iter().zip(&self.compiled) {
                    if re.is_match(name) {
                        return p.include;
                    }
                }
                self.groups.contains(&category.group)
            }
        }
    }
}

impl Default for SubsetSpec {
    fn default() -> Self {
        SubsetSpec::full()
    }
}

pub fn in_subset(name: &str, category: &TensorCategory, spec: &SubsetSpec) -> bool {
    spec.contains(name, category)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CensusRow {
    pub group: Group,
    pub layer: Option<u32>,
    pub tensors: u64,
    pub parameters: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    /// Ordered by layer (layer-less rows last), then group.
    pub rows: Vec<CensusRow>,
}

impl Census {
    pub fn total_tensors(&self) -> u64 {
        self.rows.iter().map(|r| r.tensors).sum()
    }

    pub fn tensors_in(&self, group: Group) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.group == group)
            .map(|r| r.tensors)
            .sum()
    }

    pub fn parameters_in(&self, group: Group) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.group == group)
            .map(|r| r.parameters)
            .sum()
    }
}

pub fn census(index: &CheckpointIndex, scheme: &NamingScheme) -> Census {
    // (layer is None) sorts after every Some via the bool key.
    let mut acc: BTreeMap<(bool, Option<u32>, Group), (u64, u64)> = BTreeMap::new();
    for info in index.tensors.values() {
        let c = scheme.classify(&info.name);
        let slot = acc.entry((c.layer.is_none(), c.layer, c.group)).or_default();
        slot.0 += 1;
        slot.1 += info.numel();
    }
    Census {
        rows: acc
            .into_iter()
            .map(|((_, layer, group), (tensors, parameters))| CensusRow {
                group,
                layer,
                tensors,
                parameters,
            })
            .collect(),
    }
}
