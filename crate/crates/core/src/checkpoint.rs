//! Versioned binary checkpoints of a [`TrainState`].
//!
//! Layout: 8-byte magic, little-endian `u32` format version, then the
//! bincode encoding of the state.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::train::TrainState;

pub const MAGIC: &[u8; 8] = b"FLOWISCK";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let body = bincode::serialize(state).map_err(|e| Error::Checkpoint(e.to_string()))?;
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("format version {version}, this build reads {FORMAT_VERSION}")));
    }
    bincode::deserialize(&bytes[12..]).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(state)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
