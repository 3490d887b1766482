use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_OPEN_TAG: &str = "<think>";
pub const DEFAULT_CLOSE_TAG: &str = "</think>";

#[derive(Debug, Deserialize)]
struct Record {
    #[serde(default)]
    id: Option<serde_json::Value>,
    response: String,
}

/// Position of the first close tag in one response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseTag {
    pub id: String,
    /// Byte offset of the first close tag, if present.
    pub close_tag_offset: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningStats {
    pub open_tag: String,
    pub close_tag: String,
    pub total: u64,
    pub with_closing_tag: u64,
    /// `with_closing_tag / total`; absent when there are no responses.
    pub frequency: Option<f64>,
    pub starting_with_open_tag: u64,
    /// Lines that were not a JSON object with a string `response`.
    pub malformed: u64,
    pub responses: Vec<ResponseTag>,
}

/// Scans newline-delimited JSON records `{"id": .., "response": ..}` and
/// counts responses containing `close_tag` as a byte substring.
///
/// Blank lines are ignored. Malformed lines are logged, counted and skipped.
/// Records without an id are labelled by their 1-based line number.
pub fn reasoning_frequency<R: BufRead>(
    reader: R,
    open_tag: &str,
    close_tag: &str,
) -> Result<ReasoningStats> {
    if close_tag.is_empty() {
        return Err(Error::InvalidConfig("close tag must not be empty".into()));
    }
    let mut stats = ReasoningStats {
        open_tag: open_tag.to_string(),
        close_tag: close_tag.to_string(),
        total: 0,
        with_closing_tag: 0,
        frequency: None,
        starting_with_open_tag: 0,
        malformed: 0,
        responses: Vec::new(),
    };
    for (i, line) in reader.split(b'\n').enumerate() {
        let line = line.map_err(|e| Error::io("<transcript>", e))?;
        let line = line.strip_suffix(b"\r").unwrap_or(&line);
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let record: Record = match serde_json::from_slice(line) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("transcript line {}: {e}", i + 1);
                stats.malformed += 1;
                continue;
            }
        };
        let id = match record.id {
            Some(serde_json::Value::String(s)) => s,
            Some(other) => other.to_string(),
            None => (i + 1).to_string(),
        };
        let offset = find(record.response.as_bytes(), close_tag.as_bytes());
        stats.total += 1;
        if offset.is_some() {
            stats.with_closing_tag += 1;
        }
        if !open_tag.is_empty() && record.response.starts_with(open_tag) {
            stats.starting_with_open_tag += 1;
        }
        stats.responses.push(ResponseTag {
            id,
            close_tag_offset: offset,
        });
    }
    if stats.total > 0 {
        stats.frequency = Some(stats.with_closing_tag as f64 / stats.total as f64);
    }
    Ok(stats)
}

pub fn reasoning_frequency_file(path: &Path, open_tag: &str, close_tag: &str) -> Result<ReasoningStats> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    reasoning_frequency(BufReader::new(file), open_tag, close_tag)
        .map_err(|e| e.context(format!("reading {}", path.display())))
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(text: &str) -> ReasoningStats {
        reasoning_frequency(text.as_bytes(), DEFAULT_OPEN_TAG, DEFAULT_CLOSE_TAG).unwrap()
    }

    #[test]
    fn counts_and_offsets() {
        let s = run(concat!(
            "{\"id\":\"a\",\"response\":\"<think>x</think>y\"}\n",
            "\n",
            "not json\n",
            "{\"id\":\"b\",\"response\":\"plain\"}\r\n",
            "{\"response\":\"</think></think>\"}\n",
        ));
        assert_eq!(s.total, 3);
        assert_eq!(s.with_closing_tag, 2);
        assert_eq!(s.malformed, 1);
        assert_eq!(s.starting_with_open_tag, 1);
        assert_eq!(s.responses[0].close_tag_offset, Some(8));
        assert_eq!(s.responses[1].close_tag_offset, None);
        assert_eq!(s.responses[2].id, "5");
        assert_eq!(s.responses[2].close_tag_offset, Some(0));
    }

    #[test]
    fn empty_transcript_has_no_frequency() {
        let s = run("");
        assert_eq!(s.total, 0);
        assert_eq!(s.frequency, None);
    }

    #[test]
    fn missing_response_is_malformed() {
        let s = run("{\"id\":\"a\"}\n{\"id\":\"b\",\"response\":7}\n");
        assert_eq!(s.malformed, 2);
        assert_eq!(s.total, 0);
    }
}
