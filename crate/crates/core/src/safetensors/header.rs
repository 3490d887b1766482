//! Header parsing and serialization.
//!
//! Layout: `[u64 LE header length N][N bytes UTF-8 JSON][tensor data]`. The JSON
//! object maps tensor names to `{"dtype", "shape", "data_offsets"}`, plus an
//! optional `"__metadata__"` string map. Offsets are relative to the first byte
//! after the header.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer};
use sha2::{Digest, Sha256};

use crate::dtype::DType;
use crate::error::{Error, Result};

pub const METADATA_KEY: &str = "__metadata__";

/// Headers above this size are rejected before allocation.
pub const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeaderEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data_offsets: [u64; 2],
}

impl HeaderEntry {
    pub fn numel(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }

    pub fn byte_len(&self) -> u64 {
        self.data_offsets[1].saturating_sub(self.data_offsets[0])
    }
}

/// A parsed shard header. Entries are ordered by data offset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardHeader {
    pub header_len: u64,
    pub data_len: u64,
    pub entries: Vec<HeaderEntry>,
    pub metadata: BTreeMap<String, String>,
    /// SHA-256 of the raw header JSON bytes, hex encoded.
    pub hash: String,
}

/// Parses a complete in-memory safetensors image.
pub fn parse_header(bytes: &[u8]) -> Result<ShardHeader> {
    if bytes.len() < 8 {
        return Err(Error::Truncated(format!(
            "{} bytes, need at least 8 for the header length",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let available = bytes.len() as u64 - 8;
    check_header_len(header_len, available)?;
    let json = &bytes[8..8 + header_len as usize];
    parse_header_json(json, header_len, available - header_len, true)
}

/// Reads and parses the header of a shard file without touching tensor data.
pub fn read_header(path: &Path) -> Result<ShardHeader> {
    read_header_with(path, true)
}

pub(crate) fn read_header_with(path: &Path, strict: bool) -> Result<ShardHeader> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    if file_len < 8 {
        return Err(Error::Truncated(format!(
            "{}: {file_len} bytes, need at least 8",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|e| Error::io(path, e))?;
    let header_len = u64::from_le_bytes(len_bytes);
    check_header_len(header_len, file_len - 8)?;
    let mut json = vec![0u8; header_len as usize];
    file.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
    parse_header_json(&json, header_len, file_len - 8 - header_len, strict)
        .map_err(|e| e.context(path.display().to_string()))
}

fn check_header_len(header_len: u64, available: u64) -> Result<()> {
    if header_len > available || header_len > MAX_HEADER_LEN {
        return Err(Error::HeaderLength {
            declared: header_len,
            available: available.min(MAX_HEADER_LEN),
        });
    }
    Ok(())
}

/// Parses header JSON. In non-strict mode the size and bounds checks are
/// skipped so that validation can report them as violations instead.
pub(crate) fn parse_header_json(
    json: &[u8],
    header_len: u64,
    data_len: u64,
    strict: bool,
) -> Result<ShardHeader> {
    let raw: RawHeader =
        serde_json::from_slice(json).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let mut metadata = None;
    let mut entries = Vec::with_capacity(raw.0.len());
    let mut seen = std::collections::HashSet::with_capacity(raw.0.len());
    for (name, value) in raw.0 {
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateTensor(name));
        }
        if name == METADATA_KEY {
            let map: BTreeMap<String, String> = serde_json::from_value(value).map_err(|e| {
                Error::MalformedHeader(format!("{METADATA_KEY} must map strings to strings: {e}"))
            })?;
            metadata = Some(map);
            continue;
        }
        let entry: RawEntry = serde_json::from_value(value)
            .map_err(|e| Error::MalformedHeader(format!("entry {name:?}: {e}")))?;
        let dtype: DType = entry.dtype.parse()?;
        let [begin, end] = entry.data_offsets;
        if begin > end {
            return Err(Error::MalformedHeader(format!(
                "entry {name:?}: data_offsets [{begin}, {end}] are reversed"
            )));
        }
        let shape: Vec<usize> = entry
            .shape
            .iter()
            .map(|&d| usize::try_from(d))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::MalformedHeader(format!("entry {name:?}: dimension too large")))?;
        if strict {
            let expected = expected_bytes(dtype, &shape).ok_or_else(|| {
                Error::MalformedHeader(format!("entry {name:?}: element count overflows"))
            })?;
            if expected != end - begin {
                return Err(Error::SizeMismatch {
                    name,
                    expected,
                    actual: end - begin,
                });
            }
            if end > data_len {
                return Err(Error::Truncated(format!(
                    "tensor {name:?} ends at {end} but the data region holds {data_len} bytes"
                )));
            }
        }
        entries.push(HeaderEntry {
            name,
            dtype,
            shape,
            data_offsets: [begin, end],
        });
    }
    entries.sort_by(|a, b| {
        a.data_offsets
            .cmp(&b.data_offsets)
            .then_with(|| a.name.cmp(&b.name))
    });
    if strict {
        if let Some(w) = entries
            .windows(2)
            .find(|w| w[1].data_offsets[0] < w[0].data_offsets[1])
        {
            return Err(Error::MalformedHeader(format!(
                "byte ranges of {:?} and {:?} overlap",
                w[0].name, w[1].name
            )));
        }
    }
    Ok(ShardHeader {
        header_len,
        data_len,
        entries,
        metadata: metadata.unwrap_or_default(),
        hash: hex::encode(Sha256::digest(json)),
    })
}

/// Byte size implied by dtype and shape, `None` on overflow.
pub fn expected_bytes(dtype: DType, shape: &[usize]) -> Option<u64> {
    shape
        .iter()
        .try_fold(dtype.byte_width() as u64, |acc, &d| acc.checked_mul(d as u64))
}

/// Serializes a header (length prefix included), padded with spaces to an
/// 8-byte boundary. Entries are written in the given order.
pub fn serialize_header(entries: &[HeaderEntry], metadata: &BTreeMap<String, String>) -> Vec<u8> {
    let mut json = String::from("{");
    let mut first = true;
    if !metadata.is_empty() {
        json.push_str(&serde_json::to_string(METADATA_KEY).unwrap());
        json.push(':');
        json.push_str(&serde_json::to_string(metadata).unwrap());
        first = false;
    }
    for e in entries {
        if !first {
            json.push(',');
        }
        first = false;
        json.push_str(&serde_json::to_string(&e.name).unwrap());
        json.push_str(":{\"dtype\":");
        json.push_str(&serde_json::to_string(e.dtype.as_str()).unwrap());
        json.push_str(",\"shape\":");
        json.push_str(&serde_json::to_string(&e.shape).unwrap());
        json.push_str(",\"data_offsets\":");
        json.push_str(&serde_json::to_string(&e.data_offsets).unwrap());
        json.push('}');
    }
    json.push('}');
    let mut bytes = json.into_bytes();
    while bytes.len() % 8 != 0 {
        bytes.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + bytes.len());
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&bytes);
    out
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    dtype: String,
    shape: Vec<u64>,
    data_offsets: [u64; 2],
}

/// Top-level JSON object kept as ordered pairs so duplicate keys are visible.
struct RawHeader(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct PairsVisitor;

        impl<'de> Visitor<'de> for PairsVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object of tensor entries")
            }

            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<RawHeader, A::Error> {
                let mut pairs = Vec::with_capacity(map.size_hint().unwrap_or(0));
                while let Some((k, v)) = map.next_entry::<String, serde_json::Value>()? {
                    pairs.push((k, v));
                }
                Ok(RawHeader(pairs))
            }
        }

        deserializer.deserialize_map(PairsVisitor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(json: &str, data_len: usize) -> Vec<u8> {
        let mut out = (json.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(json.as_bytes());
        out.extend(std::iter::repeat_n(0u8, data_len));
        out
    }

    #[test]
    fn minimal_file() {
        let bytes = image(
            r#"{"a":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#,
            16,
        );
        let h = parse_header(&bytes).unwrap();
        assert_eq!(h.entries.len(), 1);
        let e = &h.entries[0];
        assert_eq!(e.name, "a");
        assert_eq!(e.dtype, DType::F32);
        assert_eq!(e.shape, vec![2, 2]);
        assert_eq!(e.data_offsets, [0, 16]);
        assert!(h.metadata.is_empty());
    }

    #[test]
    fn size_mismatch_rejected() {
        let bytes = image(
            r#"{"a":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#,
            8,
        );
        match parse_header(&bytes) {
            Err(Error::SizeMismatch {
                expected, actual, ..
            }) => {
                assert_eq!((expected, actual), (12, 8));
            }
            other => panic!("expected size mismatch, got {other:?}"),
        }
    }

    #[test]
    fn scalar_tensor_has_one_element() {
        let bytes = image(r#"{"s":{"dtype":"F64","shape":[],"data_offsets":[0,8]}}"#, 8);
        let h = parse_header(&bytes).unwrap();
        assert_eq!(h.entries[0].numel(), 1);
    }

    #[test]
    fn duplicate_names_rejected() {
        let json = r#"{"a":{"dtype":"U8","shape":[1],"data_offsets":[0,1]},"a":{"dtype":"U8","shape":[1],"data_offsets":[1,2]}}"#;
        assert!(matches!(
            parse_header(&image(json, 2)),
            Err(Error::DuplicateTensor(n)) if n == "a"
        ));
    }

    #[test]
    fn header_longer_than_file() {
        let mut bytes = image(r#"{}"#, 0);
        bytes[..8].copy_from_slice(&1000u64.to_le_bytes());
        assert!(matches!(
            parse_header(&bytes),
            Err(Error::HeaderLength { .. })
        ));
    }

    #[test]
    fn truncated_data_region() {
        let bytes = image(
            r#"{"a":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}}"#,
            12,
        );
        assert!(matches!(parse_header(&bytes), Err(Error::Truncated(_))));
        assert!(matches!(parse_header(&[1, 2, 3]), Err(Error::Truncated(_))));
    }

    #[test]
    fn unknown_and_unsupported_dtypes() {
        let bytes = image(r#"{"a":{"dtype":"Q8","shape":[1],"data_offsets":[0,1]}}"#, 1);
        assert!(matches!(parse_header(&bytes), Err(Error::UnknownDtype(_))));
        let bytes = image(
            r#"{"a":{"dtype":"F8_E4M3","shape":[1],"data_offsets":[0,1]}}"#,
            1,
        );
        assert!(matches!(
            parse_header(&bytes),
            Err(Error::UnsupportedDtype(_))
        ));
    }

    #[test]
    fn malformed_json_and_metadata() {
        assert!(matches!(
            parse_header(&image("{not json", 0)),
            Err(Error::MalformedHeader(_))
        ));
        assert!(matches!(
            parse_header(&image(r#"{"__metadata__":{"k":1}}"#, 0)),
            Err(Error::MalformedHeader(_))
        ));
        assert!(matches!(
            parse_header(&image(
                r#"{"a":{"dtype":"U8","shape":[1],"data_offsets":[0,1],"x":0}}"#,
                1
            )),
            Err(Error::MalformedHeader(_))
        ));
    }

    #[test]
    fn serialize_round_trip_keeps_order_and_metadata() {
        let entries = vec![
            HeaderEntry {
                name: "z".into(),
                dtype: DType::BF16,
                shape: vec![3],
                data_offsets: [0, 6],
            },
            HeaderEntry {
                name: "a".into(),
                dtype: DType::F32,
                shape: vec![],
                data_offsets: [6, 10],
            },
        ];
        let mut md = BTreeMap::new();
        md.insert("format".to_string(), "pt".to_string());
        let mut bytes = serialize_header(&entries, &md);
        assert_eq!((bytes.len() - 8) % 8, 0);
        bytes.extend_from_slice(&[0u8; 10]);
        let h = parse_header(&bytes).unwrap();
        assert_eq!(h.entries, entries);
        assert_eq!(h.metadata, md);
    }
}
