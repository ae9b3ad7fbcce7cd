//! Shard files: `<name>.bin` holds little-endian `u32` token ids, and
//! `<name>.json` describes them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::pack::{PackedShard, Segment};
use crate::error::{Error, Result};
use crate::vocab::TokenId;

pub const SHARD_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardSidecar {
    pub version: u32,
    pub seq_len: usize,
    pub count: usize,
    pub pad_id: TokenId,
    pub prompt_len: usize,
    /// Hex SHA-256 of the `.bin` file.
    pub sha256: String,
    pub segments: Vec<Vec<Segment>>,
}

fn paths(prefix: &Path) -> (PathBuf, PathBuf) {
    (prefix.with_extension("bin"), prefix.with_extension("json"))
}

/// Writes `prefix.bin` and `prefix.json`; returns the two paths.
pub fn write_shard(prefix: &Path, shard: &PackedShard) -> Result<(PathBuf, PathBuf)> {
    let (bin, json) = paths(prefix);
    if let Some(parent) = bin.parent() {
        fs::create_dir_all(parent)?;
    }
    let bytes: Vec<u8> = shard.tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
    let sidecar = ShardSidecar {
        version: SHARD_FORMAT_VERSION,
        seq_len: shard.seq_len,
        count: shard.len(),
        pad_id: shard.pad_id,
        prompt_len: shard.prompt_len,
        sha256: hex::encode(Sha256::digest(&bytes)),
        segments: shard.segments.clone(),
    };
    fs::write(&bin, &bytes)?;
    fs::write(&json, serde_json::to_string_pretty(&sidecar)?)?;
    Ok((bin, json))
}

/// Reads a shard and verifies its length and checksum.
pub fn read_shard(prefix: &Path) -> Result<PackedShard> {
    let (bin, json) = paths(prefix);
    let format = |path: &Path, msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let sidecar: ShardSidecar =
        serde_json::from_str(&fs::read_to_string(&json)?).map_err(|e| format(&json, e.to_string()))?;
    if sidecar.version != SHARD_FORMAT_VERSION {
        return Err(format(&json, format!("unsupported shard version {}", sidecar.version)));
    }
    let bytes = fs::read(&bin)?;
    if hex::encode(Sha256::digest(&bytes)) != sidecar.sha256 {
        return Err(format(&bin, "checksum mismatch".into()));
    }
    if bytes.len() != sidecar.seq_len * sidecar.count * 4 || sidecar.segments.len() != sidecar.count {
        return Err(format(
            &bin,
            format!(
                "{} bytes do not hold {} sequences of length {}",
                bytes.len(),
                sidecar.count,
                sidecar.seq_len
            ),
        ));
    }
    let tokens = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(PackedShard {
        seq_len: sidecar.seq_len,
        tokens,
        pad_id: sidecar.pad_id,
        segments: sidecar.segments,
        prompt_len: sidecar.prompt_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::pack::{pack, PackConfig, PackMode, OversizePolicy};

    #[test]
    fn round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let config = PackConfig {
            seq_len: 6,
            mode: PackMode::Concatenate,
            oversize: OversizePolicy::Split,
            pad_id: 0,
            eos_id: 2,
        };
        let shard = pack([vec![5, 6, 7], vec![9; 8], vec![11]], &config).unwrap();
        let prefix = dir.path().join("train");
        let (bin, _) = write_shard(&prefix, &shard).unwrap();
        assert_eq!(read_shard(&prefix).unwrap(), shard);

        let mut bytes = fs::read(&bin).unwrap();
        bytes[0] ^= 1;
        fs::write(&bin, bytes).unwrap();
        assert!(matches!(read_shard(&prefix), Err(Error::Format { .. })));
    }
}
