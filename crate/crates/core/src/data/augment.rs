use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Ellipsoid, Volume};
use crate::metrics::BinaryMask;

const PLANES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Axis flips followed by quarter turns in one axis plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub flips: [bool; 3],
    pub plane: (usize, usize),
    pub quarter_turns: u8,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation { flips: [false; 3], plane: (0, 1), quarter_turns: 0 };

    /// Draws flips with p = 0.5 each and 0..=3 turns in a random plane.
    /// Only planes with equal extents rotate so the shape is preserved.
    pub fn sample(rng: &mut impl Rng, shape: [usize; 3]) -> Self {
        let flips = std::array::from_fn(|_| rng.random_bool(0.5));
        let eligible: Vec<_> = PLANES.iter().copied().filter(|&(a, b)| shape[a] == shape[b]).collect();
        let plane_pick = rng.random_range(0..PLANES.len());
        let turns = rng.random_range(0..4u8);
        match eligible.len() {
            0 => Self { flips, plane: (0, 1), quarter_turns: 0 },
            n => Self { flips, plane: eligible[plane_pick % n], quarter_turns: turns },
        }
    }

    pub fn is_identity(&self) -> bool {
        self.flips == [false; 3] && self.quarter_turns % 4 == 0
    }

    /// Applies the transform to a row-major `[D, H, W]` buffer.
    pub fn apply<T: Copy>(&self, shape: [usize; 3], data: &[T]) -> Vec<T> {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        let [_, h, w] = shape;
        let idx = |c: [usize; 3]| (c[0] * h + c[1]) * w + c[2];
        let mut out = Vec::with_capacity(data.len());
        for z in 0..shape[0] {
            for y in 0..h {
                for x in 0..w {
                    out.push(data[idx(self.source(shape, [z, y, x]))]);
                }
            }
        }
        out
    }

    /// Input voxel that lands on output voxel `o`.
    fn source(&self, shape: [usize; 3], o: [usize; 3]) -> [usize; 3] {
        let (a, b) = self.plane;
        let mut c = o;
        // undo the turns (the plane is square) then the flips
        for _ in 0..self.quarter_turns % 4 {
            let (ca, cb) = (c[a], c[b]);
            c[a] = shape[a] - 1 - cb;
            c[b] = ca;
        }
        for i in 0..3 {
            if self.flips[i] {
                c[i] = shape[i] - 1 - c[i];
            }
        }
        c
    }

    /// Maps an axis-aligned ellipsoid through the same transform.
    pub fn apply_ellipsoid(&self, shape: [usize; 3], e: &Ellipsoid) -> Ellipsoid {
        let (a, b) = self.plane;
        let mut out = *e;
        for i in 0..3 {
            if self.flips[i] {
                out.center[i] = (shape[i] - 1) as f64 - out.center[i];
            }
        }
        for _ in 0..self.quarter_turns % 4 {
            let (ca, cb) = (out.center[a], out.center[b]);
            out.center[a] = cb;
            out.center[b] = (shape[a] - 1) as f64 - ca;
            out.radii.swap(a, b);
        }
        out
    }

    pub fn apply_volume(&self, v: &Volume) -> Volume {
        Volume { shape: v.shape, data: self.apply(v.shape, &v.data) }
    }

    pub fn apply_mask(&self, m: &BinaryMask) -> BinaryMask {
        BinaryMask::new(m.shape(), self.apply(m.shape(), m.bits())).expect("permutation keeps mask valid")
    }
}

/// Random flips and quarter turns, applied identically to volume and mask.
pub fn augment(v: &Volume, m: Option<&BinaryMask>, seed: u64) -> (Volume, Option<BinaryMask>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aug = Augmentation::sample(&mut rng, v.shape());
    (aug.apply_volume(v), m.map(|m| aug.apply_mask(m)))
}
