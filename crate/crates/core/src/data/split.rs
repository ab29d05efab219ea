use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{mix_seed, Sample, Volume};
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;

/// Labelled volumes keep their masks; unlabelled ones do not.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub labelled: Vec<(Volume, BinaryMask)>,
    pub unlabelled: Vec<Volume>,
    /// Original dataset indices, parallel to `labelled` / `unlabelled`.
    pub labelled_ids: Vec<usize>,
    pub unlabelled_ids: Vec<usize>,
}

impl DatasetSplit {
    /// Builds a split from explicit parts, warning when labelled data dominates.
    pub fn from_parts(labelled: Vec<(Volume, BinaryMask)>, unlabelled: Vec<Volume>) -> Result<Self> {
        let ids_l = (0..labelled.len()).collect();
        let ids_u = (labelled.len()..labelled.len() + unlabelled.len()).collect();
        let s = Self { labelled, unlabelled, labelled_ids: ids_l, unlabelled_ids: ids_u };
        s.check()?;
        Ok(s)
    }

    pub fn num_labelled(&self) -> usize {
        self.labelled.len()
    }

    pub fn num_unlabelled(&self) -> usize {
        self.unlabelled.len()
    }

    fn check(&self) -> Result<()> {
        if self.labelled.is_empty() {
            return Err(Error::Config("split has no labelled volumes".into()));
        }
        let shape = self.labelled[0].0.shape();
        for (v, m) in &self.labelled {
            if v.shape() != shape || m.shape() != shape {
                return Err(Error::shape("split", format!("mixed shapes {shape:?} and {:?}", v.shape())));
            }
        }
        if let Some(v) = self.unlabelled.iter().find(|v| v.shape() != shape) {
            return Err(Error::shape("split", format!("mixed shapes {shape:?} and {:?}", v.shape())));
        }
        let (n, m) = (self.num_labelled(), self.num_unlabelled());
        if n * 2 > n + m {
            log::warn!("labelled share {n}/{} exceeds one half", n + m);
        }
        Ok(())
    }
}

/// Seeded shuffle, then the first `ceil(fraction * n)` samples keep masks.
pub fn split(data: &[Sample], labelled_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    let pairs: Vec<(Volume, Option<BinaryMask>)> =
        data.iter().map(|s| (s.volume.clone(), Some(s.mask.clone()))).collect();
    split_available(&pairs, labelled_fraction, seed)
}

/// Like [`split`] for datasets where some volumes never had a mask. The
/// labelled count is still `ceil(fraction * n)` over all `n` volumes, drawn
/// from those that carry a mask.
pub fn split_available(
    data: &[(Volume, Option<BinaryMask>)],
    labelled_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(labelled_fraction > 0.0 && labelled_fraction <= 1.0) {
        return Err(Error::Config(format!("labelled fraction {labelled_fraction} outside (0, 1]")));
    }
    // tolerate representation error such as 0.1 * 30 = 3.0000000000000004
    let n_lab = ((labelled_fraction * data.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    if n_lab == 0 {
        return Err(Error::Config(format!(
            "labelled fraction {labelled_fraction} of {} volumes yields no labelled data",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x5911])));
    let (lab, unl): (Vec<usize>, Vec<usize>) = {
        let with_mask: Vec<usize> = order.iter().copied().filter(|&i| data[i].1.is_some()).collect();
        if with_mask.len() < n_lab {
            return Err(Error::Config(format!(
                "{n_lab} labelled volumes requested but only {} have masks",
                with_mask.len()
            )));
        }
        let lab = with_mask[..n_lab].to_vec();
        let unl = order.iter().copied().filter(|i| !lab.contains(i)).collect();
        (lab, unl)
    };
    let s = DatasetSplit {
        labelled: lab.iter().map(|&i| (data[i].0.clone(), data[i].1.clone().expect("masked"))).collect(),
        unlabelled: unl.iter().map(|&i| data[i].0.clone()).collect(),
        labelled_ids: lab,
        unlabelled_ids: unl,
    };
    s.check()?;
    Ok(s)
}
