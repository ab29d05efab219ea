use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{augment, mix_seed, DatasetSplit};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSpec {
    pub labelled_per_batch: usize,
    pub unlabelled_per_batch: usize,
    pub seed: u64,
    pub augment: bool,
}

impl BatchSpec {
    pub fn new(seed: u64) -> Self {
        Self { labelled_per_batch: 2, unlabelled_per_batch: 2, seed, augment: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.labelled_per_batch == 0 || self.unlabelled_per_batch == 0 {
            return Err(Error::Config("batch needs at least one labelled and one unlabelled slot".into()));
        }
        Ok(())
    }
}

/// One mixed batch. Labelled slots come first.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[L + U, 1, D, H, W]`, z-scored and augmented.
    pub x: Tensor,
    /// `[L, D, H, W]` masks for the labelled slots.
    pub y: Tensor,
    pub labelled_slots: Vec<usize>,
    /// Positions in `split.labelled` / `split.unlabelled` drawn for each slot.
    pub labelled_draws: Vec<usize>,
    pub unlabelled_draws: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.x.shape()[0]
    }
}

const TAG_LABELLED: u64 = 1;
const TAG_UNLABELLED: u64 = 2;
const TAG_AUGMENT: u64 = 3;

/// Entry `pos` of an endless stream that visits `0..n` once per epoch, in a
/// fresh seeded order each epoch.
fn epoch_draw(seed: u64, tag: u64, n: usize, pos: usize) -> usize {
    let epoch = pos / n;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, &[tag, epoch as u64])));
    perm[pos % n]
}

/// Batch for step `t`. A pure function of `(split, spec, t)`, so a resumed
/// run sees the same stream.
pub fn next_batch(split: &DatasetSplit, spec: &BatchSpec, t: usize) -> Result<Batch> {
    spec.validate()?;
    if split.labelled.is_empty() {
        return Err(Error::Config("batch sampling needs labelled volumes".into()));
    }
    let (nl, nu) = (spec.labelled_per_batch, spec.unlabelled_per_batch);
    let labelled_draws: Vec<usize> =
        (0..nl).map(|j| epoch_draw(spec.seed, TAG_LABELLED, split.num_labelled(), t * nl + j)).collect();
    let unlabelled_draws: Vec<usize> = if split.unlabelled.is_empty() {
        if t == 0 {
            log::warn!("no unlabelled volumes; batches hold labelled slots only");
        }
        Vec::new()
    } else {
        (0..nu).map(|j| epoch_draw(spec.seed, TAG_UNLABELLED, split.num_unlabelled(), t * nu + j)).collect()
    };

    let shape = split.labelled[0].0.shape();
    let vox: usize = shape.iter().product();
    let slots = nl + unlabelled_draws.len();
    let mut x = Vec::with_capacity(slots * vox);
    let mut y = Vec::with_capacity(nl * vox);
    let aug_seed = |slot: usize| mix_seed(spec.seed, &[TAG_AUGMENT, t as u64, slot as u64]);
    for (slot, &i) in labelled_draws.iter().enumerate() {
        let (v, m) = &split.labelled[i];
        let v = v.zscore();
        let (v, m) = if spec.augment { augment(&v, Some(m), aug_seed(slot)) } else { (v, Some(m.clone())) };
        x.extend_from_slice(v.data());
        y.extend(m.expect("labelled slot keeps its mask").to_f32());
    }
    for (k, &i) in unlabelled_draws.iter().enumerate() {
        let v = split.unlabelled[i].zscore();
        let v = if spec.augment { augment(&v, None, aug_seed(nl + k)).0 } else { v };
        x.extend_from_slice(v.data());
    }
    let [d, h, w] = shape;
    Ok(Batch {
        x: Tensor::new(&[slots, 1, d, h, w], x)?,
        y: Tensor::new(&[nl, d, h, w], y)?,
        labelled_slots: (0..nl).collect(),
        labelled_draws,
        unlabelled_draws,
    })
}
