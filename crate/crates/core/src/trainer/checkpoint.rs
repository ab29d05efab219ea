//! `DCKP` checkpoint files.
//!
//! Little-endian layout: magic `DCKP`, u32 version, u64 step, f64 best mean
//! Dice (NaN when none), u32 config length + UTF-8 config text, u32 blob
//! count, then per blob: u32 name length, UTF-8 name, u64 value count, f32
//! values.

use std::fs;
use std::path::{Path, PathBuf};

pub const MAGIC: &[u8; 4] = b"DCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic {found:?}, expected \"DCKP\"")]
    MagicMismatch { found: Vec<u8> },
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("{0} bytes follow the last blob")]
    TrailingBytes(usize),
    #[error("blob or config text is not UTF-8")]
    InvalidUtf8,
    #[error("duplicate blob `{0}`")]
    DuplicateBlob(String),
    #[error("checkpoint lacks blob `{0}`")]
    MissingBlob(String),
    #[error("blob `{name}` holds {found} values, model expects {expected}")]
    BlobLength { name: String, expected: usize, found: usize },
    #[error("checkpoint holds {0} blobs the model does not use")]
    UnusedBlobs(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Next step to run.
    pub step: u64,
    pub best_dice: Option<f64>,
    /// `key = value` training configuration.
    pub config: String,
    pub blobs: Vec<(String, Vec<f32>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn text(&mut self, len: usize, what: &'static str) -> Result<String, CheckpointError> {
        String::from_utf8(self.take(len, what)?.to_vec()).map_err(|_| CheckpointError::InvalidUtf8)
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.best_dice.unwrap_or(f64::NAN).to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, values) in &self.blobs {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic").map_err(|_| CheckpointError::MagicMismatch { found: bytes.to_vec() })?;
        if magic != MAGIC {
            return Err(CheckpointError::MagicMismatch { found: magic.to_vec() });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let step = r.u64("step")?;
        let best = f64::from_bits(r.u64("best dice")?);
        let config_len = r.u32("config length")? as usize;
        let config = r.text(config_len, "config")?;
        let count = r.u32("blob count")? as usize;
        let mut blobs: Vec<(String, Vec<f32>)> = Vec::new();
        for _ in 0..count {
            let name_len = r.u32("blob name length")? as usize;
            let name = r.text(name_len, "blob name")?;
            let n = r.u64("blob length")?;
            let n = usize::try_from(n).map_err(|_| CheckpointError::Truncated("blob payload"))?;
            let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated("blob payload"))?, "blob payload")?;
            if blobs.iter().any(|(b, _)| *b == name) {
                return Err(CheckpointError::DuplicateBlob(name));
            }
            blobs.push((name, raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self { step, best_dice: (!best.is_nan()).then_some(best), config, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.encode()).map_err(|source| CheckpointError::Io { path: path.into(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.into(), source })?;
        Self::decode(&bytes)
    }

    pub fn blob(&self, name: &str) -> Option<&[f32]> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    /// Copies blob `name` into `dst`, checking its length.
    pub fn read_into(&self, name: &str, dst: &mut [f32]) -> Result<(), CheckpointError> {
        let src = self.blob(name).ok_or_else(|| CheckpointError::MissingBlob(name.into()))?;
        if src.len() != dst.len() {
            return Err(CheckpointError::BlobLength { name: name.into(), expected: dst.len(), found: src.len() });
        }
        dst.copy_from_slice(src);
        Ok(())
    }
}
