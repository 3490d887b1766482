use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::header::{read_header_with, ShardHeader};
use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::math::{decode, WorkingBuffer};

pub const INDEX_SUFFIX: &str = ".safetensors.index.json";
pub const SHARD_SUFFIX: &str = ".safetensors";

/// Location and layout of one tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Half-open byte range within the shard's data region.
    pub data_offsets: [u64; 2],
    /// Position in [`CheckpointIndex::shards`].
    pub shard: usize,
}

impl TensorInfo {
    pub fn numel(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }

    pub fn byte_len(&self) -> u64 {
        self.data_offsets[1].saturating_sub(self.data_offsets[0])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardInfo {
    pub file_name: String,
    pub path: PathBuf,
    pub header_len: u64,
    pub data_len: u64,
    pub header_hash: String,
    pub metadata: BTreeMap<String, String>,
}

impl ShardInfo {
    fn data_start(&self) -> u64 {
        8 + self.header_len
    }
}

/// The weight-map JSON of a sharded checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexFile {
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
    pub weight_map: BTreeMap<String, String>,
}

/// One model checkpoint: a unified view over all shard headers.
#[derive(Debug, Clone)]
pub struct CheckpointIndex {
    pub root: PathBuf,
    pub shards: Vec<ShardInfo>,
    /// Tensors in shard order, then data-offset order.
    pub tensors: IndexMap<String, TensorInfo>,
    /// File name and contents of the weight-map index, if the checkpoint has one.
    pub index_file: Option<(String, IndexFile)>,
}

impl CheckpointIndex {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.get(name)
    }

    /// Header metadata of the first shard.
    pub fn metadata(&self) -> &BTreeMap<String, String> {
        static EMPTY: BTreeMap<String, String> = BTreeMap::new();
        self.shards.first().map(|s| &s.metadata).unwrap_or(&EMPTY)
    }

    /// Hash over every shard's file name and header hash. Changes whenever any
    /// header changes.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for shard in &self.shards {
            hasher.update(shard.file_name.as_bytes());
            hasher.update([0u8]);
            hasher.update(shard.header_hash.as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(hasher.finalize())
    }

    pub fn total_data_bytes(&self) -> u64 {
        self.tensors.values().map(TensorInfo::byte_len).sum()
    }

    /// Tensor names grouped by shard, each in data-offset order.
    pub fn names_by_shard(&self) -> Vec<Vec<&str>> {
        let mut out = vec![Vec::new(); self.shards.len()];
        for info in self.tensors.values() {
            out[info.shard].push(info.name.as_str());
        }
        out
    }
}

/// Opens a single `.safetensors` file, a directory with a weight-map index, or
/// a directory of shard files without an index.
pub fn open_checkpoint(path: &Path) -> Result<CheckpointIndex> {
    open_with(path, true)
}

/// Like [`open_checkpoint`] but tolerates size and bounds violations in
/// headers, for use by validation.
pub fn open_checkpoint_unchecked(path: &Path) -> Result<CheckpointIndex> {
    open_with(path, false)
}

fn open_with(path: &Path, strict: bool) -> Result<CheckpointIndex> {
    let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        let file_name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let header = read_header_with(path, strict)?;
        return assemble(
            path.to_path_buf(),
            vec![(file_name, path.to_path_buf(), header)],
            None,
        );
    }

    let mut index_files = Vec::new();
    let mut shard_files = Vec::new();
    for entry in std::fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let entry = entry.map_err(|e| Error::io(path, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(INDEX_SUFFIX) {
            index_files.push(name);
        } else if name.ends_with(SHARD_SUFFIX) && entry.path().is_file() {
            shard_files.push(name);
        }
    }
    index_files.sort();
    shard_files.sort();

    match index_files.len() {
        0 => {
            if shard_files.is_empty() {
                return Err(Error::EmptyCheckpoint(path.to_path_buf()));
            }
            let shards = shard_files
                .into_iter()
                .map(|name| {
                    let p = path.join(&name);
                    read_header_with(&p, strict).map(|h| (name, p, h))
                })
                .collect::<Result<Vec<_>>>()?;
            assemble(path.to_path_buf(), shards, None)
        }
        1 => {
            let index_name = index_files.pop().unwrap();
            let index_path = path.join(&index_name);
            let text = std::fs::read(&index_path).map_err(|e| Error::io(&index_path, e))?;
            let index: IndexFile = serde_json::from_slice(&text)
                .map_err(|e| Error::IndexMismatch(format!("{index_name}: {e}")))?;
            let referenced: BTreeSet<&String> = index.weight_map.values().collect();
            let mut shards = Vec::with_capacity(referenced.len());
            for name in referenced {
                let p = path.join(name);
                if !p.is_file() {
                    return Err(Error::MissingShard(p));
                }
                let h = read_header_with(&p, strict)?;
                shards.push((name.clone(), p, h));
            }
            let ckpt = assemble(path.to_path_buf(), shards, Some((index_name, index.clone())))?;
            for (tensor, shard) in &index.weight_map {
                match ckpt.tensors.get(tensor) {
                    Some(info) if &ckpt.shards[info.shard].file_name == shard => {}
                    Some(info) => {
                        return Err(Error::IndexMismatch(format!(
                            "{tensor:?} is mapped to {shard} but stored in {}",
                            ckpt.shards[info.shard].file_name
                        )))
                    }
                    None => {
                        return Err(Error::IndexMismatch(format!(
                            "{tensor:?} is listed in the weight map but absent from {shard}"
                        )))
                    }
                }
            }
            if let Some(extra) = ckpt
                .tensors
                .keys()
                .find(|n| !index.weight_map.contains_key(*n))
            {
                return Err(Error::IndexMismatch(format!(
                    "{extra:?} is stored in a shard but missing from the weight map"
                )));
            }
            Ok(ckpt)
        }
        _ => Err(Error::IndexMismatch(format!(
            "multiple index files in {}: {}",
            path.display(),
            index_files.join(", ")
        ))),
    }
}

fn assemble(
    root: PathBuf,
    shards: Vec<(String, PathBuf, ShardHeader)>,
    index_file: Option<(String, IndexFile)>,
) -> Result<CheckpointIndex> {
    let mut tensors: IndexMap<String, TensorInfo> = IndexMap::new();
    let mut infos = Vec::with_capacity(shards.len());
    for (shard_idx, (file_name, path, header)) in shards.into_iter().enumerate() {
        for e in header.entries {
            if let Some(prev) = tensors.get(&e.name) {
                return Err(Error::TensorInTwoShards {
                    name: e.name,
                    first: infos
                        .get(prev.shard)
                        .map(|s: &ShardInfo| s.file_name.clone())
                        .unwrap_or_else(|| file_name.clone()),
                    second: file_name,
                });
            }
            tensors.insert(
                e.name.clone(),
                TensorInfo {
                    name: e.name,
                    dtype: e.dtype,
                    shape: e.shape,
                    data_offsets: e.data_offsets,
                    shard: shard_idx,
                },
            );
        }
        infos.push(ShardInfo {
            file_name,
            path,
            header_len: header.header_len,
            data_len: header.data_len,
            header_hash: header.hash,
            metadata: header.metadata,
        });
    }
    if tensors.is_empty() {
        return Err(Error::EmptyCheckpoint(root));
    }
    Ok(CheckpointIndex {
        root,
        shards: infos,
        tensors,
        index_file,
    })
}

/// A tensor read from disk: its original bytes plus decoded values.
#[derive(Debug, Clone)]
pub struct TensorData {
    pub info: TensorInfo,
    pub raw: Vec<u8>,
    pub values: WorkingBuffer,
}

/// Reads the raw bytes of one tensor, touching only its byte range.
pub fn read_tensor_raw(index: &CheckpointIndex, name: &str) -> Result<Vec<u8>> {
    let info = index
        .get(name)
        .ok_or_else(|| Error::TensorNotFound(name.to_string()))?;
    let shard = &index.shards[info.shard];
    let [begin, end] = info.data_offsets;
    let mut file = File::open(&shard.path).map_err(|e| Error::io(&shard.path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(&shard.path, e))?.len();
    if shard.data_start() + end > file_len {
        return Err(Error::OutOfBounds {
            name: name.to_string(),
        });
    }
    file.seek(SeekFrom::Start(shard.data_start() + begin))
        .map_err(|e| Error::io(&shard.path, e))?;
    let mut raw = vec![0u8; (end - begin) as usize];
    file.read_exact(&mut raw)
        .map_err(|e| Error::io(&shard.path, e))?;
    Ok(raw)
}

pub fn read_tensor(index: &CheckpointIndex, name: &str) -> Result<TensorData> {
    let raw = read_tensor_raw(index, name)?;
    let info = index.tensors[name].clone();
    let values = decode(&raw, info.dtype)?;
    Ok(TensorData { info, raw, values })
}

/// Reads every tensor of a checkpoint in index order. Loads the whole model.
pub fn read_all(index: &CheckpointIndex) -> Result<Vec<(TensorInfo, Vec<u8>)>> {
    index
        .tensors
        .values()
        .map(|info| read_tensor_raw(index, &info.name).map(|raw| (info.clone(), raw)))
        .collect()
}
