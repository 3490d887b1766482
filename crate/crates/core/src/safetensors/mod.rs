//! Reading, validating and writing single-file and sharded safetensors
//! checkpoints. Tensor reads touch only the requested byte range.

mod header;
mod index;
mod validate;
mod writer;

pub use header::{
    expected_bytes, parse_header, read_header, serialize_header, HeaderEntry, ShardHeader,
    MAX_HEADER_LEN, METADATA_KEY,
};
pub use index::{
    open_checkpoint, open_checkpoint_unchecked, read_all, read_tensor, read_tensor_raw,
    CheckpointIndex, IndexFile, ShardInfo, TensorData, TensorInfo, INDEX_SUFFIX, SHARD_SUFFIX,
};
pub use validate::{compare_checkpoints, validate_checkpoint, ValidationReport, Violation};
pub use writer::{
    write_checkpoint, CheckpointWriter, OutputPolicy, ShardLayout, TensorSpec, WriteLayout,
    DEFAULT_INDEX_NAME, DEFAULT_NAME_TEMPLATE,
};
