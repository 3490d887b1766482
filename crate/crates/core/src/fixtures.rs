//! Deterministic synthetic checkpoints shaped like a scaled-down DeepSeek-V3,
//! with planted differences whose normalized Frobenius size is known.
//!
//! Random numbers come from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with
//! `seed_from_u64`. Each tensor draws from its own stream (`set_stream` with
//! the tensor's ordinal in the layout), so generation does not depend on
//! iteration order or platform. A uniform draw is `(next_u64() >> 11) * 2^-53`.
//! Base weights are `(2u - 1) * init_scale`. Gaussian noise uses Box-Muller:
//! `sqrt(-2 ln(1 - u1)) * cos(2π u2)`, one normal per two uniform draws, drawn
//! from a generator seeded with `seed + 0x9E3779B97F4A7C15 * (perturbation.seed + 1)`
//! (wrapping arithmetic).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::math::{decode, encode};
use crate::safetensors::{
    CheckpointIndex, CheckpointWriter, ShardInfo, TensorInfo, TensorSpec, WriteLayout,
    DEFAULT_NAME_TEMPLATE,
};
use crate::taxonomy::{compile_pattern, Group, NamingScheme};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EXPECTED_DIFFS_FILE: &str = "expected_diffs.json";

const NOISE_SEED_STEP: u64 = 0x9E37_79B9_7F4A_7C15;
/// Two-sided 99.9% standard normal quantile.
const Z_999: f64 = 3.290_526_731_491_926;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixtureSpec {
    pub layers: u32,
    /// Leading layers with a dense MLP instead of experts.
    pub dense_layers: u32,
    pub experts: u32,
    /// Shared experts are fused into one MLP of width
    /// `moe_intermediate * shared_experts`, as in DeepSeek-V3.
    pub shared_experts: u32,
    pub hidden: usize,
    pub intermediate: usize,
    pub moe_intermediate: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub rope_dim: usize,
    pub q_lora_rank: usize,
    pub kv_lora_rank: usize,
    pub vocab: usize,
    pub dtype: DType,
    /// Per-group overrides of `dtype`.
    pub group_dtypes: BTreeMap<Group, DType>,
    pub seed: u64,
    /// Upper bound on the number of shard files.
    pub shards: usize,
    pub init_scale: f64,
    /// Applied by [`generate_variant`] when called through the command line.
    pub perturbations: Vec<Perturbation>,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            layers: 5,
            dense_layers: 2,
            experts: 4,
            shared_experts: 1,
            hidden: 64,
            intermediate: 128,
            moe_intermediate: 32,
            heads: 2,
            head_dim: 16,
            rope_dim: 8,
            q_lora_rank: 32,
            kv_lora_rank: 16,
            vocab: 256,
            dtype: DType::F32,
            group_dtypes: BTreeMap::new(),
            seed: 0,
            shards: 1,
            init_scale: 0.05,
            perturbations: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    /// Adds `magnitude` to every element.
    Shift,
    /// Adds `magnitude * N(0, 1)` to every element.
    Gaussian,
}

/// Chooses tensors by group, name pattern and layer. Unset fields match
/// everything; set fields must all match.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Selector {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<Group>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<u32>>,
}

impl Selector {
    pub fn group(group: Group) -> Self {
        Selector {
            group: Some(group),
            ..Selector::default()
        }
    }

    pub fn pattern(pattern: &str) -> Self {
        Selector {
            pattern: Some(pattern.to_string()),
            ..Selector::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub select: Selector,
    pub kind: PerturbationKind,
    pub magnitude: f64,
    /// Distinguishes noise streams of otherwise identical perturbations.
    #[serde(default)]
    pub seed: u64,
}

impl Perturbation {
    pub fn shift(select: Selector, c: f64) -> Self {
        Perturbation {
            select,
            kind: PerturbationKind::Shift,
            magnitude: c,
            seed: 0,
        }
    }

    pub fn gaussian(select: Selector, sigma: f64, seed: u64) -> Self {
        Perturbation {
            select,
            kind: PerturbationKind::Gaussian,
            magnitude: sigma,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub group: Group,
    pub layer: Option<u32>,
    pub expert: Option<u32>,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// SHA-256 of the tensor's raw bytes, hex encoded.
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FixtureManifest {
    pub tensors: Vec<ManifestEntry>,
}

impl FixtureManifest {
    pub fn count(&self, group: Group) -> usize {
        self.tensors.iter().filter(|t| t.group == group).count()
    }

    pub fn get(&self, name: &str) -> Option<&ManifestEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectedKind {
    None,
    Shift,
    Gaussian,
}

/// What [`crate::merge::compute_diffs`] should report for one tensor:
/// `|measured - expected_diff| <= bound`. Gaussian bounds hold with 99.9%
/// probability; the others always hold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectedDiff {
    pub expected_diff: f64,
    pub kind: ExpectedKind,
    pub bound: f64,
}

impl ExpectedDiff {
    pub fn admits(&self, measured: f64) -> bool {
        (measured - self.expected_diff).abs() <= self.bound
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExpectedDiffs {
    pub tensors: BTreeMap<String, ExpectedDiff>,
}

impl ExpectedDiffs {
    pub fn load(path: &Path) -> Result<Self> {
        load_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, self)
    }
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::InvalidFixture(format!("{}: {e}", path.display())))
}

fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Write(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl FixtureSpec {
    /// Reads a spec from TOML or JSON (by extension) and validates it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: FixtureSpec = crate::recipe::parse(&text, crate::recipe::Format::of(path))
            .map_err(|e| Error::InvalidFixture(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidFixture(msg));
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        if self.dense_layers > self.layers {
            return fail(format!(
                "dense_layers ({}) exceeds layers ({})",
                self.dense_layers, self.layers
            ));
        }
        if self.dense_layers < self.layers && self.experts == 0 {
            return fail("expert layers need at least one routed expert".into());
        }
        let dims = [
            ("hidden", self.hidden),
            ("intermediate", self.intermediate),
            ("moe_intermediate", self.moe_intermediate),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("rope_dim", self.rope_dim),
            ("q_lora_rank", self.q_lora_rank),
            ("kv_lora_rank", self.kv_lora_rank),
            ("vocab", self.vocab),
            ("shards", self.shards),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{name} must be at least 1"));
        }
        for dt in std::iter::once(&self.dtype).chain(self.group_dtypes.values()) {
            if !dt.is_float() {
                return fail(format!("fixture dtypes must be floating point, got {dt}"));
            }
        }
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            return fail(format!("init_scale must be positive, got {}", self.init_scale));
        }
        for p in &self.perturbations {
            p.validate()?;
        }
        Ok(())
    }

    pub fn dtype_for(&self, group: Group) -> DType {
        self.group_dtypes.get(&group).copied().unwrap_or(self.dtype)
    }

    /// Every tensor in layout order, with its group.
    pub fn tensors(&self) -> Result<Vec<(TensorSpec, Group)>> {
        self.validate()?;
        let h = self.hidden;
        let mut out = Vec::new();
        let mut push = |name: String, group: Group, shape: Vec<usize>| {
            out.push((
                TensorSpec {
                    name,
                    dtype: self.dtype_for(group),
                    shape,
                },
                group,
            ))
        };
        push("model.embed_tokens.weight".into(), Group::EmbeddingNormHead, vec![self.vocab, h]);
        for l in 0..self.layers {
            let p = format!("model.layers.{l}");
            let qk = self.heads * (self.head_dim + self.rope_dim);
            push(format!("{p}.input_layernorm.weight"), Group::EmbeddingNormHead, vec![h]);
            push(format!("{p}.self_attn.q_a_proj.weight"), Group::Attention, vec![self.q_lora_rank, h]);
            push(format!("{p}.self_attn.q_a_layernorm.weight"), Group::EmbeddingNormHead, vec![self.q_lora_rank]);
            push(format!("{p}.self_attn.q_b_proj.weight"), Group::Attention, vec![qk, self.q_lora_rank]);
            push(
                format!("{p}.self_attn.kv_a_proj_with_mqa.weight"),
                Group::Attention,
                vec![self.kv_lora_rank + self.rope_dim, h],
            );
            push(format!("{p}.self_attn.kv_a_layernorm.weight"), Group::EmbeddingNormHead, vec![self.kv_lora_rank]);
            push(
                format!("{p}.self_attn.kv_b_proj.weight"),
                Group::Attention,
                vec![self.heads * 2 * self.head_dim, self.kv_lora_rank],
            );
            push(format!("{p}.self_attn.o_proj.weight"), Group::Attention, vec![h, self.heads * self.head_dim]);
            push(format!("{p}.post_attention_layernorm.weight"), Group::EmbeddingNormHead, vec![h]);
            if l < self.dense_layers {
                let i = self.intermediate;
                push(format!("{p}.mlp.gate_proj.weight"), Group::DenseMlp, vec![i, h]);
                push(format!("{p}.mlp.up_proj.weight"), Group::DenseMlp, vec![i, h]);
                push(format!("{p}.mlp.down_proj.weight"), Group::DenseMlp, vec![h, i]);
                continue;
            }
            let e = self.experts as usize;
            push(format!("{p}.mlp.gate.weight"), Group::ExpertGate, vec![e, h]);
            push(format!("{p}.mlp.gate.e_score_correction_bias"), Group::ExpertGate, vec![e]);
            let m = self.moe_intermediate;
            for x in 0..self.experts {
                let q = format!("{p}.mlp.experts.{x}");
                push(format!("{q}.gate_proj.weight"), Group::RoutedExpertMlp, vec![m, h]);
                push(format!("{q}.up_proj.weight"), Group::RoutedExpertMlp, vec![m, h]);
                push(format!("{q}.down_proj.weight"), Group::RoutedExpertMlp, vec![h, m]);
            }
            if self.shared_experts > 0 {
                let s = m * self.shared_experts as usize;
                let q = format!("{p}.mlp.shared_experts");
                push(format!("{q}.gate_proj.weight"), Group::SharedExpertMlp, vec![s, h]);
                push(format!("{q}.up_proj.weight"), Group::SharedExpertMlp, vec![s, h]);
                push(format!("{q}.down_proj.weight"), Group::SharedExpertMlp, vec![h, s]);
            }
        }
        push("model.norm.weight".into(), Group::EmbeddingNormHead, vec![h]);
        push("lm_head.weight".into(), Group::EmbeddingNormHead, vec![self.vocab, h]);
        Ok(out)
    }

    pub fn parameter_count(&self) -> Result<u64> {
        Ok(self
            .tensors()?
            .iter()
            .map(|(t, _)| t.shape.iter().product::<usize>() as u64)
            .sum())
    }

    /// Splits the layout into at most `shards` contiguous files of roughly
    /// equal byte size.
    fn layout(&self) -> Result<WriteLayout> {
        let specs: Vec<TensorSpec> = self.tensors()?.into_iter().map(|(t, _)| t).collect();
        let total: u64 = specs.iter().map(TensorSpec::byte_len).sum::<u64>().max(1);
        let k = self.shards.min(specs.len()) as u64;
        let mut groups: Vec<Vec<TensorSpec>> = Vec::new();
        let mut start = 0u64;
        let mut current = u64::MAX;
        for t in specs {
            let shard = (start as u128 * k as u128 / total as u128) as u64;
            start += t.byte_len();
            if shard != current {
                current = shard;
                groups.push(Vec::new());
            }
            groups.last_mut().unwrap().push(t);
        }
        WriteLayout::from_groups(groups, DEFAULT_NAME_TEMPLATE, &BTreeMap::new())
    }
}

impl Perturbation {
    fn validate(&self) -> Result<()> {
        if !self.magnitude.is_finite() {
            return Err(Error::InvalidFixture(format!(
                "perturbation magnitude must be finite, got {}",
                self.magnitude
            )));
        }
        if self.kind == PerturbationKind::Gaussian && self.magnitude < 0.0 {
            return Err(Error::InvalidFixture(format!(
                "gaussian sigma must be non-negative, got {}",
                self.magnitude
            )));
        }
        if let Some(p) = &self.select.pattern {
            compile_pattern(p)?;
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = uniform(rng);
    let u2 = uniform(rng);
    (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn base_values(spec: &FixtureSpec, ordinal: usize, numel: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(ordinal as u64);
    (0..numel)
        .map(|_| (2.0 * uniform(&mut rng) - 1.0) * spec.init_scale)
        .collect()
}

fn checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// The raw bytes of every base tensor in layout order.
fn base_tensors(spec: &FixtureSpec) -> Result<Vec<(TensorSpec, Group, Vec<u8>)>> {
    Ok(spec
        .tensors()?
        .into_iter()
        .enumerate()
        .map(|(i, (t, g))| {
            let numel = t.shape.iter().product();
            let raw = encode(&base_values(spec, i, numel), t.dtype);
            (t, g, raw)
        })
        .collect())
}

fn write_all(
    spec: &FixtureSpec,
    dir: &Path,
    tensors: &[(TensorSpec, Group, Vec<u8>)],
) -> Result<CheckpointIndex> {
    let mut writer = CheckpointWriter::create(dir, spec.layout()?)?;
    let by_name: BTreeMap<&str, &[u8]> = tensors
        .iter()
        .map(|(t, _, raw)| (t.name.as_str(), raw.as_slice()))
        .collect();
    while let Some(next) = writer.next_tensor() {
        let name = next.name.clone();
        writer.write_tensor(&name, by_name[name.as_str()])?;
    }
    writer.finish()
}

/// Writes the base fixture into `dir` together with [`MANIFEST_FILE`].
pub fn generate_base(spec: &FixtureSpec, dir: &Path) -> Result<(CheckpointIndex, FixtureManifest)> {
    let tensors = base_tensors(spec)?;
    let index = write_all(spec, dir, &tensors)?;
    let m = manifest_of(&tensors);
    m.save(&dir.join(MANIFEST_FILE))?;
    Ok((index, m))
}

/// The manifest [`generate_base`] would write, computed in memory.
pub fn manifest(spec: &FixtureSpec) -> Result<FixtureManifest> {
    Ok(manifest_of(&base_tensors(spec)?))
}

fn manifest_of(tensors: &[(TensorSpec, Group, Vec<u8>)]) -> FixtureManifest {
    let scheme = NamingScheme::deepseek_v3();
    FixtureManifest {
        tensors: tensors
            .iter()
            .map(|(t, g, raw)| {
                let c = scheme.classify(&t.name);
                debug_assert_eq!(c.group, *g);
                ManifestEntry {
                    name: t.name.clone(),
                    group: *g,
                    layer: c.layer,
                    expert: c.expert,
                    shape: t.shape.clone(),
                    dtype: t.dtype,
                    checksum: checksum(raw),
                }
            })
            .collect(),
    }
}

struct CompiledSelector<'a> {
    perturbation: &'a Perturbation,
    regex: Option<Regex>,
}

impl CompiledSelector<'_> {
    fn matches(&self, name: &str, group: Group, layer: Option<u32>) -> bool {
        let s = &self.perturbation.select;
        s.group.is_none_or(|g| g == group)
            && self.regex.as_ref().is_none_or(|r| r.is_match(name))
            && s
                .layers
                .as_ref()
                .is_none_or(|ls| layer.is_some_and(|l| ls.contains(&l)))
    }
}

/// Writes a variant of the base fixture with `perturbations` applied into
/// `dir`, together with [`EXPECTED_DIFFS_FILE`].
///
/// Perturbations act on the decoded base values and are re-encoded to the
/// tensor dtype. A selector matching no tensor, or a tensor matched by more
/// than one perturbation, is an error.
pub fn generate_variant(
    spec: &FixtureSpec,
    perturbations: &[Perturbation],
    dir: &Path,
) -> Result<(CheckpointIndex, ExpectedDiffs)> {
    let (tensors, expected) = variant_tensors(spec, perturbations)?;
    let index = write_all(spec, dir, &tensors)?;
    expected.save(&dir.join(EXPECTED_DIFFS_FILE))?;
    Ok((index, expected))
}

type EncodedTensors = Vec<(TensorSpec, Group, Vec<u8>)>;

fn variant_tensors(
    spec: &FixtureSpec,
    perturbations: &[Perturbation],
) -> Result<(EncodedTensors, ExpectedDiffs)> {
    for p in perturbations {
        p.validate()?;
    }
    let selectors: Vec<CompiledSelector> = perturbations
        .iter()
        .map(|p| {
            Ok(CompiledSelector {
                perturbation: p,
                regex: p.select.pattern.as_deref().map(compile_pattern).transpose()?,
            })
        })
        .collect::<Result<_>>()?;
    let scheme = NamingScheme::deepseek_v3();
    let mut tensors = base_tensors(spec)?;
    let mut hits = vec![0usize; selectors.len()];
    let mut expected = BTreeMap::new();

    for (ordinal, (t, group, raw)) in tensors.iter_mut().enumerate() {
        let layer = scheme.classify(&t.name).layer;
        let matched: Vec<usize> = selectors
            .iter()
            .enumerate()
            .filter(|(_, s)| s.matches(&t.name, *group, layer))
            .map(|(i, _)| i)
            .collect();
        let entry = match matched.as_slice() {
            [] => ExpectedDiff {
                expected_diff: 0.0,
                kind: ExpectedKind::None,
                bound: 0.0,
            },
            [i] => {
                hits[*i] += 1;
                let p = selectors[*i].perturbation;
                let base = decode(raw, t.dtype)?;
                let mut noise = ChaCha8Rng::seed_from_u64(
                    spec.seed
                        .wrapping_add(NOISE_SEED_STEP.wrapping_mul(p.seed.wrapping_add(1))),
                );
                noise.set_stream(ordinal as u64);
                let values: Vec<f64> = base
                    .iter()
                    .map(|&x| match p.kind {
                        PerturbationKind::Shift => x + p.magnitude,
                        PerturbationKind::Gaussian => x + p.magnitude * normal(&mut noise),
                    })
                    .collect();
                let largest = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let rounding = t.dtype.unit_roundoff() * largest + t.dtype.min_subnormal();
                *raw = encode(&values, t.dtype);
                let n = values.len().max(1) as f64;
                // Accumulated rounding of the norm itself, evaluated in f64.
                let evaluation = (n + 3.0) * f64::EPSILON * p.magnitude.abs();
                match p.kind {
                    PerturbationKind::Shift => ExpectedDiff {
                        expected_diff: p.magnitude.abs(),
                        kind: ExpectedKind::Shift,
                        bound: rounding + evaluation,
                    },
                    PerturbationKind::Gaussian => ExpectedDiff {
                        expected_diff: p.magnitude,
                        kind: ExpectedKind::Gaussian,
                        bound: p.magnitude * Z_999 / (2.0 * n).sqrt() + rounding + evaluation,
                    },
                }
            }
            _ => {
                return Err(Error::InvalidFixture(format!(
                    "tensor {:?} is matched by perturbations {:?}",
                    t.name, matched
                )))
            }
        };
        expected.insert(t.name.clone(), entry);
    }
    if let Some(i) = hits.iter().position(|&h| h == 0) {
        return Err(Error::InvalidFixture(format!(
            "perturbation {i} selects no tensor: {:?}",
            perturbations[i].select
        )));
    }
    Ok((tensors, ExpectedDiffs { tensors: expected }))
}

/// An in-memory index of the fixture layout with no files behind it. Useful
/// for classification and counting at sizes too large to write.
pub fn virtual_index(spec: &FixtureSpec) -> Result<CheckpointIndex> {
    let mut tensors = IndexMap::new();
    let mut offset = 0u64;
    for (t, _) in spec.tensors()? {
        let end = offset + t.byte_len();
        tensors.insert(
            t.name.clone(),
            TensorInfo {
                name: t.name,
                dtype: t.dtype,
                shape: t.shape,
                data_offsets: [offset, end],
                shard: 0,
            },
        );
        offset = end;
    }
    Ok(CheckpointIndex {
        root: PathBuf::new(),
        shards: vec![ShardInfo {
            file_name: "virtual.safetensors".into(),
            path: PathBuf::from("virtual.safetensors"),
            header_len: 0,
            data_len: offset,
            header_hash: String::new(),
            metadata: BTreeMap::new(),
        }],
        tensors,
        index_file: None,
    })
}
