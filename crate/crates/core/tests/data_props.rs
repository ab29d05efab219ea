use std::collections::BTreeSet;

use dihc_core::data::io::{decode, encode_mask, encode_volume, VolumeFile, VolumeIoError, HEADER_LEN};
use dihc_core::data::{
    generate_synthetic, generate_synthetic_with, load_dataset, next_batch, split, write_dataset, Augmentation,
    BatchSpec, Sample, SynthOptions, Volume,
};
use dihc_core::metrics::BinaryMask;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 50;
const SHAPE: [usize; 3] = [8, 8, 8];

fn fraction(s: &Sample) -> f64 {
    s.mask.count() as f64 / s.mask.bits().len() as f64
}

#[test]
fn generator_is_deterministic_and_in_range() {
    for seed in 0..SEEDS {
        let a = generate_synthetic(3, SHAPE, seed).unwrap();
        assert_eq!(a, generate_synthetic(3, SHAPE, seed).unwrap());
        for s in &a {
            let f = fraction(s);
            assert!((0.02..=0.40).contains(&f), "seed {seed}: fraction {f}");
            assert!(s.volume.data().iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn split_partitions_every_index_once() {
    let data = generate_synthetic(20, SHAPE, 0).unwrap();
    let mut partitions = BTreeSet::new();
    for seed in 0..SEEDS {
        let s = split(&data, 0.1, seed).unwrap();
        assert_eq!((s.num_labelled(), s.num_unlabelled()), (2, 18));
        let mut all: Vec<usize> = s.labelled_ids.iter().chain(&s.unlabelled_ids).copied().collect();
        all.sort();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        for (k, &i) in s.labelled_ids.iter().enumerate() {
            assert_eq!(s.labelled[k].1, data[i].mask);
        }
        partitions.insert(s.labelled_ids.clone());
        let again = split(&data, 0.1, seed).unwrap();
        assert_eq!(again.labelled_ids, s.labelled_ids);
    }
    assert!(partitions.len() > 1);
}

#[test]
fn split_rounds_up_and_rejects_empty_labelled_sets() {
    let data = generate_synthetic(5, SHAPE, 0).unwrap();
    assert_eq!(split(&data, 0.25, 0).unwrap().num_labelled(), 2);
    assert!(split(&data, 0.0, 0).is_err());
    assert!(split(&data, 1.5, 0).is_err());
}

fn rasterize(shape: [usize; 3], shapes: &[dihc_core::data::Ellipsoid]) -> BinaryMask {
    BinaryMask::from_fn(shape, |z, y, x| shapes.iter().any(|e| e.contains([z as f64, y as f64, x as f64])))
}

#[test]
fn augmented_masks_match_transformed_shapes() {
    let opts = SynthOptions { noise_sigma: 0.0, bias_amplitude: 0.0 };
    for seed in 0..SEEDS {
        let shape = if seed % 5 == 4 { [8, 16, 16] } else { [16, 16, 16] };
        let p = generate_synthetic_with(1, shape, seed, &opts).unwrap().remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let aug = Augmentation::sample(&mut rng, shape);
        let moved: Vec<_> = p.ellipsoids.iter().map(|e| aug.apply_ellipsoid(shape, e)).collect();
        let m = aug.apply_mask(&p.sample.mask);
        assert_eq!(m, rasterize(shape, &moved), "seed {seed}: {aug:?}");
        assert_eq!(m.count(), p.sample.mask.count());
        // noise-free foreground stays exactly on the transformed mask
        let v = aug.apply_volume(&p.sample.volume);
        for (&x, &b) in v.data().iter().zip(m.bits()) {
            assert_eq!(x > 0.25, b == 1);
        }
    }
}

#[test]
fn flips_are_involutions() {
    let data = generate_synthetic(1, [8, 16, 16], 3).unwrap().remove(0);
    for bits in 0..8u8 {
        let aug = Augmentation { flips: [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0], ..Augmentation::IDENTITY };
        let twice = aug.apply_volume(&aug.apply_volume(&data.volume));
        assert_eq!(twice, data.volume);
        assert_eq!(aug.apply_mask(&aug.apply_mask(&data.mask)), data.mask);
    }
}

#[test]
fn every_labelled_sample_is_drawn_evenly() {
    let data = generate_synthetic(20, SHAPE, 1).unwrap();
    for seed in 0..SEEDS {
        let s = split(&data, 0.25, seed).unwrap();
        let n = s.num_labelled();
        let spec = BatchSpec { augment: false, ..BatchSpec::new(seed) };
        let steps = 7;
        let mut counts = vec![0usize; n];
        for t in 0..steps {
            for &i in &next_batch(&s, &spec, t).unwrap().labelled_draws {
                counts[i] += 1;
            }
        }
        let expect = (steps * 2).div_ceil(n);
        assert!(counts.iter().all(|&c| c + 1 >= expect && c <= expect + 1), "seed {seed}: {counts:?}");
    }
}

#[test]
fn batches_depend_only_on_seed_and_step() {
    let data = generate_synthetic(6, SHAPE, 2).unwrap();
    let s = split(&data, 0.5, 0).unwrap();
    let spec = BatchSpec::new(4);
    for t in [0, 1, 17] {
        let (a, b) = (next_batch(&s, &spec, t).unwrap(), next_batch(&s, &spec, t).unwrap());
        assert_eq!(a.x.to_vec(), b.x.to_vec());
        assert_eq!(a.y.to_vec(), b.y.to_vec());
    }
    assert_ne!(next_batch(&s, &spec, 0).unwrap().x.to_vec(), next_batch(&s, &spec, 1).unwrap().x.to_vec());
}

#[test]
fn masks_travel_only_with_labelled_slots() {
    let data = generate_synthetic(6, SHAPE, 5).unwrap();
    let s = split(&data, 0.5, 0).unwrap();
    let spec = BatchSpec { augment: false, ..BatchSpec::new(1) };
    let b = next_batch(&s, &spec, 3).unwrap();
    assert_eq!(b.y.shape(), &[2, 8, 8, 8]);
    assert_eq!(b.size(), 4);
    let y = b.y.to_vec();
    for (slot, &i) in b.labelled_draws.iter().enumerate() {
        assert_eq!(&y[slot * 512..(slot + 1) * 512], s.labelled[i].1.to_f32().as_slice());
    }
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(3, SHAPE, 9).unwrap();
    write_dataset(dir.path(), &data).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    for (s, (v, m)) in data.iter().zip(&back) {
        assert_eq!(&s.volume, v);
        assert_eq!(Some(&s.mask), m.as_ref());
    }
}

proptest! {
    #[test]
    fn volume_files_round_trip(dims in prop::array::uniform3(1usize..6), seed in any::<u64>()) {
        let n = dims.iter().product::<usize>();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n).map(|_| rand::Rng::random_range(&mut rng, -10.0f32..10.0)).collect();
        let v = Volume::new(dims, data).unwrap();
        match decode(&encode_volume(&v)).unwrap() {
            VolumeFile::Volume(back) => prop_assert_eq!(back, v),
            other => prop_assert!(false, "decoded {other:?}"),
        }
        let m = BinaryMask::from_fn(dims, |z, y, x| (z + y + x) % 2 == 0);
        match decode(&encode_mask(&m)).unwrap() {
            VolumeFile::Mask(back) => prop_assert_eq!(back, m),
            other => prop_assert!(false, "decoded {other:?}"),
        }
    }

    #[test]
    fn truncated_files_are_errors_not_panics(cut in 0usize..(HEADER_LEN + 8 * 4)) {
        let v = Volume::new([2, 2, 2], vec![1.0; 8]).unwrap();
        let bytes = encode_volume(&v);
        let err = decode(&bytes[..cut]).unwrap_err();
        if cut < HEADER_LEN {
            prop_assert!(matches!(err, VolumeIoError::TruncatedHeader { .. }), "{err:?}");
        } else {
            prop_assert!(matches!(err, VolumeIoError::TruncatedPayload { .. }), "{err:?}");
        }
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let _ = decode(&bytes);
    }
}
