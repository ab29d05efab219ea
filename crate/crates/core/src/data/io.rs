//! `DVOL` volume and mask files.
//!
//! Little-endian layout: magic `DVOL`, u32 version (1), u32 dtype (0 = f32
//! intensities, 1 = u8 mask), u32 D, H, W, then the row-major payload.

use std::fs;
use std::path::{Path, PathBuf};

use super::Volume;
use crate::metrics::BinaryMask;

pub const MAGIC: &[u8; 4] = b"DVOL";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;
/// Largest voxel count a header may declare.
pub const MAX_VOXELS: u64 = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    U8Mask = 1,
}

impl Dtype {
    fn from_code(c: u32) -> Result<Self, VolumeIoError> {
        match c {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::U8Mask),
            other => Err(VolumeIoError::UnknownDtype(other)),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8Mask => 1,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum VolumeIoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic {found:?}, expected \"DVOL\"")]
    MagicMismatch { found: [u8; 4] },
    #[error("header truncated: {len} bytes, need {HEADER_LEN}")]
    TruncatedHeader { len: usize },
    #[error("unsupported DVOL version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u32),
    #[error("expected {expected:?} payload, file holds {found:?}")]
    DtypeMismatch { expected: Dtype, found: Dtype },
    #[error("dims {dims:?} are empty or exceed {MAX_VOXELS} voxels")]
    DimOverflow { dims: [u32; 3] },
    #[error("payload is {actual} bytes, header implies {expected}")]
    TruncatedPayload { expected: u64, actual: u64 },
    #[error("mask voxel {index} holds {value}, expected 0 or 1")]
    InvalidMaskValue { index: usize, value: u8 },
    #[error("voxel {index} is not finite")]
    NonFiniteValue { index: usize },
}

/// Decoded file contents.
#[derive(Clone, Debug, PartialEq)]
pub enum VolumeFile {
    Volume(Volume),
    Mask(BinaryMask),
}

fn header(dtype: Dtype, shape: [usize; 3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    for word in [VERSION, dtype as u32, shape[0] as u32, shape[1] as u32, shape[2] as u32] {
        out.extend_from_slice(&word.to_le_bytes());
    }
    out
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = header(Dtype::F32, v.shape());
    out.reserve(v.data().len() * 4);
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn encode_mask(m: &BinaryMask) -> Vec<u8> {
    let mut out = header(Dtype::U8Mask, m.shape());
    out.extend_from_slice(m.bits());
    out
}

pub fn decode(bytes: &[u8]) -> Result<VolumeFile, VolumeIoError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(VolumeIoError::MagicMismatch { found: bytes[..4].try_into().unwrap() });
        }
        return Err(VolumeIoError::TruncatedHeader { len: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(VolumeIoError::MagicMismatch { found: magic });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != VERSION {
        return Err(VolumeIoError::UnsupportedVersion(version));
    }
    let dtype = Dtype::from_code(word(1))?;
    let dims = [word(2), word(3), word(4)];
    let voxels = dims.iter().map(|&d| d as u128).product::<u128>();
    if voxels == 0 || voxels > MAX_VOXELS as u128 {
        return Err(VolumeIoError::DimOverflow { dims });
    }
    let payload = &bytes[HEADER_LEN..];
    let expected = voxels as u64 * dtype.width() as u64;
    if payload.len() as u64 != expected {
        return Err(VolumeIoError::TruncatedPayload { expected, actual: payload.len() as u64 });
    }
    let shape = dims.map(|d| d as usize);
    match dtype {
        Dtype::F32 => {
            let data: Vec<f32> =
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if let Some(index) = data.iter().position(|v| !v.is_finite()) {
                return Err(VolumeIoError::NonFiniteValue { index });
            }
            Ok(VolumeFile::Volume(Volume { shape, data }))
        }
        Dtype::U8Mask => {
            if let Some(index) = payload.iter().position(|&b| b > 1) {
                return Err(VolumeIoError::InvalidMaskValue { index, value: payload[index] });
            }
            let mask = BinaryMask::new(shape, payload.to_vec()).expect("validated mask payload");
            Ok(VolumeFile::Mask(mask))
        }
    }
}

fn read_file(path: &Path) -> Result<VolumeFile, VolumeIoError> {
    let bytes = fs::read(path).map_err(|source| VolumeIoError::Io { path: path.into(), source })?;
    decode(&bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), VolumeIoError> {
    fs::write(path, bytes).map_err(|source| VolumeIoError::Io { path: path.into(), source })
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<(), VolumeIoError> {
    write_file(path, &encode_volume(v))
}

pub fn write_mask(path: &Path, m: &BinaryMask) -> Result<(), VolumeIoError> {
    write_file(path, &encode_mask(m))
}

pub fn read_volume(path: &Path) -> Result<Volume, VolumeIoError> {
    match read_file(path)? {
        VolumeFile::Volume(v) => Ok(v),
        VolumeFile::Mask(_) => Err(VolumeIoError::DtypeMismatch { expected: Dtype::F32, found: Dtype::U8Mask }),
    }
}

pub fn read_mask(path: &Path) -> Result<BinaryMask, VolumeIoError> {
    match read_file(path)? {
        VolumeFile::Mask(m) => Ok(m),
        VolumeFile::Volume(_) => Err(VolumeIoError::DtypeMismatch { expected: Dtype::U8Mask, found: Dtype::F32 }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let m = BinaryMask::from_fn([1, 2, 3], |_, _, x| x == 1);
        let b = encode_mask(&m);
        assert_eq!(&b[..4], b"DVOL");
        assert_eq!(&b[4..24], &[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&b[24..], &[0, 1, 0, 0, 1, 0]);
    }

    #[test]
    fn typed_errors() {
        let v = Volume::new([2, 2, 2], vec![1.5; 8]).unwrap();
        let mut b = encode_volume(&v);
        assert_eq!(decode(&b).unwrap(), VolumeFile::Volume(v));
        b.pop();
        assert!(matches!(decode(&b), Err(VolumeIoError::TruncatedPayload { expected: 32, actual: 31 })));
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(VolumeIoError::MagicMismatch { .. })));
        let mut huge = header(Dtype::F32, [0, 0, 0]);
        huge[12..24].copy_from_slice(&[0xff; 12]);
        assert!(matches!(decode(&huge), Err(VolumeIoError::DimOverflow { .. })));
    }
}
