//! Surface metrics against exhaustive pairwise distances.

use dihc_core::metrics::{dice_jaccard, evaluate_masks, extract_surface, surface_distances, BinaryMask};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::*;

const CASES: u64 = 120;
const N: usize = 8;

fn pairs() -> impl Iterator<Item = (BinaryMask, BinaryMask)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    (0..CASES).map(move |_| (random_mask(&mut rng, [N; 3]), random_mask(&mut rng, [N; 3])))
}

#[test]
fn surface_matches_neighbour_scan() {
    for (a, _) in pairs() {
        assert_eq!(extract_surface(&a), brute_surface(&a));
    }
}

#[test]
fn distances_match_exhaustive_search_bit_exactly() {
    for (case, (a, b)) in pairs().enumerate() {
        let got = surface_distances([N; 3], &extract_surface(&a), &extract_surface(&b)).map(|s| (s.asd, s.hd95));
        let want = brute_asd_hd95(&a, &b);
        assert_eq!(got.map(|(x, y)| (x.to_bits(), y.to_bits())), want.map(|(x, y)| (x.to_bits(), y.to_bits())), "case {case}");
    }
}

#[test]
fn dice_and_jaccard_match_counts() {
    for (a, b) in pairs() {
        let inter = a.bits().iter().zip(b.bits()).filter(|(x, y)| **x == 1 && **y == 1).count() as f64;
        let (na, nb) = (a.count() as f64, b.count() as f64);
        let (d, j) = dice_jaccard(&a, &b).unwrap();
        assert_eq!(d, 200.0 * inter / (na + nb));
        assert_eq!(j, 100.0 * inter / (na + nb - inter));
    }
}

#[test]
fn hand_counted_boxes() {
    // 2x2x2 inside a 2x2x3 box: 8 shared voxels, 12 in the union
    let small = BinaryMask::from_fn([N; 3], |z, y, x| z < 2 && y < 2 && x < 2);
    let large = BinaryMask::from_fn([N; 3], |z, y, x| z < 2 && y < 2 && x < 3);
    let (d, j) = dice_jaccard(&small, &large).unwrap();
    assert_eq!(d, 80.0);
    assert!((j - 200.0 / 3.0).abs() < 1e-12);
    let r = evaluate_masks(&small, &large).unwrap();
    // every voxel of both boxes is on the surface; the x = 2 layer is 1 away
    assert_eq!(r.asd, Some((0.0 + 4.0 / 12.0) / 2.0));
    assert_eq!(r.hd95, Some(1.0));
}

#[test]
fn metrics_are_symmetric() {
    for (a, b) in pairs() {
        let (ab, ba) = (evaluate_masks(&a, &b).unwrap(), evaluate_masks(&b, &a).unwrap());
        assert_eq!(ab, ba);
    }
}

fn embed(m: &BinaryMask, offset: [usize; 3], size: usize) -> BinaryMask {
    BinaryMask::from_fn([size; 3], |z, y, x| {
        let c = [z, y, x];
        (0..3).all(|a| c[a] >= offset[a] && c[a] - offset[a] < N) && m.get(z - offset[0], y - offset[1], x - offset[2])
    })
}

#[test]
fn metrics_are_translation_invariant() {
    // both placements keep a background margin so no voxel touches the border
    for (a, b) in pairs() {
        let here = evaluate_masks(&embed(&a, [1, 1, 1], 12), &embed(&b, [1, 1, 1], 12)).unwrap();
        let there = evaluate_masks(&embed(&a, [3, 2, 3], 12), &embed(&b, [3, 2, 3], 12)).unwrap();
        assert_eq!(here, there);
    }
}

#[test]
fn empty_prediction_leaves_distances_undefined() {
    let gt = BinaryMask::from_fn([N; 3], |z, _, _| z < 3);
    let r = evaluate_masks(&BinaryMask::empty([N; 3]), &gt).unwrap();
    assert_eq!(r.dice, 0.0);
    assert!(r.asd.is_none() && r.hd95.is_none());
}
