//! Synthetic volumes, labelled/unlabelled splits, augmentation, batching
//! and on-disk formats.

mod augment;
mod batch;
pub mod io;
mod manifest;
mod split;
mod synth;

pub use augment::{augment, Augmentation};
pub use batch::{next_batch, Batch, BatchSpec};
pub use manifest::{load_dataset, mask_path_for, write_dataset, Manifest, ManifestEntry, MANIFEST_FILE};
pub use split::{split, split_available, DatasetSplit};
pub use synth::{generate_synthetic, generate_synthetic_with, Ellipsoid, Phantom, SynthOptions};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;

/// Scalar intensity volume, row-major `[D, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("volume", format!("shape {shape:?} vs {} values", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("volume voxel {i}")));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Zero-mean, unit-variance copy (constant volumes map to zeros).
    pub fn zscore(&self) -> Volume {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
        Volume {
            shape: self.shape,
            data: self.data.iter().map(|&v| ((v as f64 - mean) * inv) as f32).collect(),
        }
    }
}

/// A volume with its ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub volume: Volume,
    pub mask: BinaryMask,
}

/// Derives an independent stream seed from a base seed and tags.
pub(crate) fn mix_seed(seed: u64, tags: &[u64]) -> u64 {
    // splitmix64 over the tag sequence
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        h = h.wrapping_add(t).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}
