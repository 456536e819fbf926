//! Versioned run checkpoints.
//!
//! Layout: the line `FOMLCKPT v1`, the config hash as a hex line, then the
//! bincode encoding of the run state (learner with all parameters,
//! optimizer moments and generator states, metrics, stream position).

use std::fs;
use std::path::Path;

use foml_core::harness::RunState;

pub const MAGIC: &str = "FOMLCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}: not a checkpoint (bad magic header)")]
    BadMagic(String),
    #[error("{path}: checkpoint version {found} is not supported (expected {VERSION})")]
    Version { path: String, found: String },
    #[error("{path}: corrupt checkpoint: {reason}")]
    Corrupt { path: String, reason: String },
}

pub fn save(path: &Path, config_hash: &str, state: &RunState) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut bytes = format!("{MAGIC} v{VERSION}\n{config_hash}\n").into_bytes();
    bincode::serialize_into(&mut bytes, state).expect("run state serializes");
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

/// Returns the stored config hash and run state.
pub fn load(path: &Path) -> Result<(String, RunState), CheckpointError> {
    let name = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: name.clone(),
        source,
    })?;
    let mut lines = bytes.splitn(3, |&b| b == b'\n');
    let header = lines.next().unwrap_or_default();
    let header = std::str::from_utf8(header).map_err(|_| CheckpointError::BadMagic(name.clone()))?;
    let version = header
        .strip_prefix(MAGIC)
        .and_then(|rest| rest.strip_prefix(" v"))
        .ok_or_else(|| CheckpointError::BadMagic(name.clone()))?;
    if version != VERSION.to_string() {
        return Err(CheckpointError::Version {
            path: name,
            found: version.to_string(),
        });
    }
    let corrupt = |reason: String| CheckpointError::Corrupt {
        path: name.clone(),
        reason,
    };
    let hash = lines
        .next()
        .and_then(|h| std::str::from_utf8(h).ok())
        .filter(|h| h.len() == 64 && h.bytes().all(|b| b.is_ascii_hexdigit()))
        .ok_or_else(|| corrupt(String::from("missing config hash")))?
        .to_string();
    let body = lines
        .next()
        .ok_or_else(|| corrupt(String::from("missing body")))?;
    let state = bincode::deserialize(body).map_err(|e| corrupt(e.to_string()))?;
    Ok((hash, state))
}
