//! Checkpoint writing.
//!
//! Headers need every tensor's size up front, so writing is split into a
//! [`WriteLayout`] (names, dtypes, shapes and shard assignment, known before any
//! data) and a [`CheckpointWriter`] that streams tensor bytes in layout order
//! with one tensor in memory at a time.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::header::{expected_bytes, serialize_header, HeaderEntry};
use super::index::{open_checkpoint, CheckpointIndex, IndexFile, TensorInfo};
use crate::dtype::DType;
use crate::error::{Error, Result};

pub const DEFAULT_NAME_TEMPLATE: &str = "model-{index}-of-{count}.safetensors";
pub const DEFAULT_INDEX_NAME: &str = "model.safetensors.index.json";

/// How output tensors are assigned to shard files.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OutputPolicy {
    /// Same shard files, tensor order and index file as the base checkpoint.
    #[default]
    MirrorSource,
    /// Greedy packing in stream order. `{index}` and `{count}` in the template
    /// expand to 1-based, 5-digit zero-padded numbers.
    Sequential {
        max_shard_bytes: u64,
        #[serde(default = "default_template")]
        name_template: String,
    },
}

fn default_template() -> String {
    DEFAULT_NAME_TEMPLATE.to_string()
}

/// A tensor to be written, without its placement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn byte_len(&self) -> u64 {
        expected_bytes(self.dtype, &self.shape).unwrap_or(u64::MAX)
    }
}

impl From<&TensorInfo> for TensorSpec {
    fn from(info: &TensorInfo) -> Self {
        TensorSpec {
            name: info.name.clone(),
            dtype: info.dtype,
            shape: info.shape.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardLayout {
    pub file_name: String,
    pub tensors: Vec<TensorSpec>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WriteLayout {
    pub shards: Vec<ShardLayout>,
    pub index_file: Option<(String, IndexFile)>,
}

impl WriteLayout {
    /// Mirrors the base checkpoint's shard files, per-shard tensor order,
    /// header metadata and index file.
    pub fn mirror(base: &CheckpointIndex) -> Self {
        let shards = base
            .names_by_shard()
            .into_iter()
            .zip(&base.shards)
            .map(|(names, shard)| ShardLayout {
                file_name: shard.file_name.clone(),
                tensors: names
                    .into_iter()
                    .map(|n| TensorSpec::from(&base.tensors[n]))
                    .collect(),
                metadata: shard.metadata.clone(),
            })
            .collect();
        WriteLayout {
            shards,
            index_file: base.index_file.clone(),
        }
    }

    /// Packs tensors in the given order; a new shard starts whenever the next
    /// tensor would push the current one past `max_shard_bytes` of data.
    pub fn sequential(
        tensors: Vec<TensorSpec>,
        max_shard_bytes: u64,
        name_template: &str,
        metadata: &BTreeMap<String, String>,
    ) -> Result<Self> {
        check_unique(tensors.iter().map(|t| t.name.as_str()))?;
        let mut groups: Vec<Vec<TensorSpec>> = Vec::new();
        let mut current_bytes = 0u64;
        for t in tensors {
            let size = t.byte_len();
            if size > max_shard_bytes {
                return Err(Error::Write(format!(
                    "tensor {:?} ({size} bytes) exceeds the maximum shard size {max_shard_bytes}",
                    t.name
                )));
            }
            match groups.last_mut() {
                Some(g) if current_bytes + size <= max_shard_bytes => {
                    current_bytes += size;
                    g.push(t);
                }
                _ => {
                    current_bytes = size;
                    groups.push(vec![t]);
                }
            }
        }
        Self::from_groups(groups, name_template, metadata)
    }

    /// One shard per group, named by the template, with an index file when
    /// there is more than one shard.
    pub fn from_groups(
        groups: Vec<Vec<TensorSpec>>,
        name_template: &str,
        metadata: &BTreeMap<String, String>,
    ) -> Result<Self> {
        check_unique(groups.iter().flatten().map(|t| t.name.as_str()))?;
        let count = groups.len();
        let shards: Vec<ShardLayout> = groups
            .into_iter()
            .enumerate()
            .map(|(i, tensors)| ShardLayout {
                file_name: expand_template(name_template, i + 1, count),
                tensors,
                metadata: metadata.clone(),
            })
            .collect();
        check_unique(shards.iter().map(|s| s.file_name.as_str())).map_err(|_| {
            Error::Write(format!(
                "name template {name_template:?} does not produce distinct shard names"
            ))
        })?;
        let index_file = (count > 1).then(|| {
            let total: u64 = shards
                .iter()
                .flat_map(|s| &s.tensors)
                .map(TensorSpec::byte_len)
                .sum();
            let mut md = serde_json::Map::new();
            md.insert("total_size".into(), total.into());
            (
                DEFAULT_INDEX_NAME.to_string(),
                IndexFile {
                    metadata: md,
                    weight_map: BTreeMap::new(),
                },
            )
        });
        Ok(WriteLayout { shards, index_file })
    }

    pub fn from_policy(
        policy: &OutputPolicy,
        base: Option<&CheckpointIndex>,
        tensors: Vec<TensorSpec>,
    ) -> Result<Self> {
        match policy {
            OutputPolicy::MirrorSource => {
                let base = base.ok_or_else(|| {
                    Error::Write("mirror-source output needs a base checkpoint".into())
                })?;
                let layout = WriteLayout::mirror(base);
                let mut expected: HashSet<&str> = tensors.iter().map(|t| t.name.as_str()).collect();
                for spec in layout.shards.iter().flat_map(|s| &s.tensors) {
                    if !expected.remove(spec.name.as_str()) {
                        return Err(Error::Write(format!(
                            "mirror-source output is missing base tensor {:?}",
                            spec.name
                        )));
                    }
                }
                if let Some(extra) = expected.into_iter().next() {
                    return Err(Error::Write(format!(
                        "tensor {extra:?} is not part of the base checkpoint"
                    )));
                }
                Ok(layout)
            }
            OutputPolicy::Sequential {
                max_shard_bytes,
                name_template,
            } => {
                let md = base.map(|b| b.metadata().clone()).unwrap_or_default();
                WriteLayout::sequential(tensors, *max_shard_bytes, name_template, &md)
            }
        }
    }

    /// Adds keys to every shard's header metadata, replacing existing values.
    pub fn with_metadata(mut self, extra: &BTreeMap<String, String>) -> Self {
        for shard in &mut self.shards {
            shard
                .metadata
                .extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
        self
    }

    /// Tensor names in the order they must be written.
    pub fn write_order(&self) -> impl Iterator<Item = &TensorSpec> {
        self.shards.iter().flat_map(|s| s.tensors.iter())
    }
}

fn expand_template(template: &str, index: usize, count: usize) -> String {
    template
        .replace("{index}", &format!("{index:05}"))
        .replace("{count}", &format!("{count:05}"))
}

fn check_unique<'a>(names: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::Write(format!("duplicate tensor name {n:?}")));
        }
    }
    Ok(())
}

/// Streams tensor bytes into the files described by a [`WriteLayout`].
pub struct CheckpointWriter {
    dir: PathBuf,
    layout: WriteLayout,
    shard: usize,
    tensor: usize,
    out: Option<BufWriter<File>>,
    current_path: PathBuf,
}

impl CheckpointWriter {
    pub fn create(dir: &Path, layout: WriteLayout) -> Result<Self> {
        check_unique(layout.write_order().map(|t| t.name.as_str()))?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut w = CheckpointWriter {
            dir: dir.to_path_buf(),
            layout,
            shard: 0,
            tensor: 0,
            out: None,
            current_path: PathBuf::new(),
        };
        w.skip_empty_and_open()?;
        Ok(w)
    }

    /// The next tensor the writer expects, or `None` when complete.
    pub fn next_tensor(&self) -> Option<&TensorSpec> {
        self.layout
            .shards
            .get(self.shard)
            .and_then(|s| s.tensors.get(self.tensor))
    }

    pub fn write_tensor(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let spec = self
            .next_tensor()
            .ok_or_else(|| Error::Write(format!("unexpected tensor {name:?}: layout complete")))?;
        if spec.name != name {
            return Err(Error::Write(format!(
                "expected tensor {:?} next, got {name:?}",
                spec.name
            )));
        }
        if spec.byte_len() != bytes.len() as u64 {
            return Err(Error::Write(format!(
                "tensor {name:?}: {} bytes given, layout needs {}",
                bytes.len(),
                spec.byte_len()
            )));
        }
        let out = self.out.as_mut().expect("open shard");
        out.write_all(bytes)
            .map_err(|e| Error::io(&self.current_path, e))?;
        self.tensor += 1;
        if self.tensor == self.layout.shards[self.shard].tensors.len() {
            self.close_current()?;
            self.shard += 1;
            self.tensor = 0;
            self.skip_empty_and_open()?;
        }
        Ok(())
    }

    fn skip_empty_and_open(&mut self) -> Result<()> {
        while let Some(shard) = self.layout.shards.get(self.shard) {
            let path = self.dir.join(&shard.file_name);
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut out = BufWriter::new(file);
            let mut offset = 0u64;
            let entries: Vec<HeaderEntry> = shard
                .tensors
                .iter()
                .map(|t| {
                    let len = t.byte_len();
                    let e = HeaderEntry {
                        name: t.name.clone(),
                        dtype: t.dtype,
                        shape: t.shape.clone(),
                        data_offsets: [offset, offset + len],
                    };
                    offset += len;
                    e
                })
                .collect();
            out.write_all(&serialize_header(&entries, &shard.metadata))
                .map_err(|e| Error::io(&path, e))?;
            self.current_path = path;
            if shard.tensors.is_empty() {
                out.flush().map_err(|e| Error::io(&self.current_path, e))?;
                self.shard += 1;
                continue;
            }
            self.out = Some(out);
            return Ok(());
        }
        Ok(())
    }

    fn close_current(&mut self) -> Result<()> {
        if let Some(mut out) = self.out.take() {
            out.flush().map_err(|e| Error::io(&self.current_path, e))?;
        }
        Ok(())
    }

    /// Writes the index file (if any) and reopens the result.
    pub fn finish(mut self) -> Result<CheckpointIndex> {
        if let Some(next) = self.next_tensor() {
            return Err(Error::Write(format!(
                "stream ended before tensor {:?}",
                next.name
            )));
        }
        self.close_current()?;
        if let Some((name, index)) = &self.layout.index_file {
            let mut index = index.clone();
            index.weight_map = self
                .layout
                .shards
                .iter()
                .flat_map(|s| s.tensors.iter().map(|t| (t.name.clone(), s.file_name.clone())))
                .collect();
            let path = self.dir.join(name);
            let mut text = serde_json::to_string_pretty(&index)
                .map_err(|e| Error::Write(e.to_string()))?;
            text.push('\n');
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        if self.layout.shards.len() == 1 && self.layout.index_file.is_none() {
            return open_checkpoint(&self.dir.join(&self.layout.shards[0].file_name))
                .map(|mut c| {
                    c.root = self.dir.clone();
                    c
                });
        }
        open_checkpoint(&self.dir)
    }
}

/// Writes a whole in-memory tensor stream. Convenience wrapper over
/// [`CheckpointWriter`] for small checkpoints; all bytes are buffered.
pub fn write_checkpoint(
    dir: &Path,
    tensors: impl IntoIterator<Item = (TensorSpec, Vec<u8>)>,
    policy: &OutputPolicy,
    base: Option<&CheckpointIndex>,
    extra_metadata: &BTreeMap<String, String>,
) -> Result<CheckpointIndex> {
    let mut specs = Vec::new();
    let mut data: HashMap<String, Vec<u8>> = HashMap::new();
    for (spec, bytes) in tensors {
        if data.insert(spec.name.clone(), bytes).is_some() {
            return Err(Error::Write(format!("duplicate tensor name {:?}", spec.name)));
        }
        specs.push(spec);
    }
    let layout = WriteLayout::from_policy(policy, base, specs)?.with_metadata(extra_metadata);
    let mut writer = CheckpointWriter::create(dir, layout)?;
    while let Some(spec) = writer.next_tensor() {
        let name = spec.name.clone();
        let bytes = data.remove(&name).expect("layout built from stream");
        writer.write_tensor(&name, &bytes)?;
    }
    writer.finish()
}
