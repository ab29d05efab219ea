//! Independent reference implementations shared by the oracle tests and
//! the acceptance target.
#![allow(dead_code)]

use dihc_core::metrics::{BinaryMask, Voxel};
use dihc_core::network::MultiScalePrediction;
use dihc_core::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn naive_sharpen(p: f64, t: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    let a = p.powf(1.0 / t);
    let b = (1.0 - p).powf(1.0 / t);
    a / (a + b)
}

pub fn mse64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

pub fn probs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(0.02f32..0.98)).collect()
}

/// Three models with three scales of random maps on `[1, 2, 2, 2]`.
pub fn random_preds(rng: &mut ChaCha8Rng) -> Vec<MultiScalePrediction> {
    let shape = [1, 2, 2, 2];
    (1..=3)
        .map(|m| MultiScalePrediction {
            model_index: m,
            probs: (0..3).map(|_| Tensor::new(&shape, probs(rng, 8)).unwrap()).collect(),
        })
        .collect()
}

pub fn map(preds: &[MultiScalePrediction], model: usize, scale: usize) -> Vec<f64> {
    let p = preds.iter().find(|p| p.model_index == model).unwrap();
    p.probs[scale - 1].to_vec().into_iter().map(f64::from).collect()
}

pub fn sharp_map(preds: &[MultiScalePrediction], model: usize, t: f64) -> Vec<f64> {
    map(preds, model, 1).into_iter().map(|p| naive_sharpen(p, t)).collect()
}

pub fn oracle_mc(preds: &[MultiScalePrediction], t: f64) -> f64 {
    let mut total = 0.0;
    for i in 1..=3 {
        for j in 1..=3 {
            if i != j {
                total += mse64(&sharp_map(preds, i, t), &map(preds, j, 1));
            }
        }
    }
    total
}

// producer, consumer, consumer scale, weight
pub const DIAGONAL: [(usize, usize, usize, f64); 6] =
    [(1, 3, 2, 0.75), (1, 2, 3, 0.5), (2, 1, 2, 0.75), (2, 3, 3, 0.5), (3, 2, 2, 0.75), (3, 1, 3, 0.5)];

pub fn oracle_dihc(preds: &[MultiScalePrediction], t: f64) -> f64 {
    DIAGONAL.iter().map(|&(p, c, s, w)| w * mse64(&sharp_map(preds, p, t), &map(preds, c, s))).sum()
}

pub fn random_mask(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> BinaryMask {
    let boxes: Vec<([usize; 3], [usize; 3])> = (0..rng.random_range(1..4))
        .map(|_| {
            let lo: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..shape[a]));
            let hi: [usize; 3] = std::array::from_fn(|a| rng.random_range(lo[a] + 1..=shape[a]));
            (lo, hi)
        })
        .collect();
    let speckle = rng.random_range(0.0..0.1);
    let noise: Vec<bool> = (0..shape.iter().product()).map(|_| rng.random_bool(speckle)).collect();
    BinaryMask::from_fn(shape, |z, y, x| {
        let c = [z, y, x];
        noise[(z * shape[1] + y) * shape[2] + x] || boxes.iter().any(|(lo, hi)| (0..3).all(|a| lo[a] <= c[a] && c[a] < hi[a]))
    })
}

pub fn brute_surface(m: &BinaryMask) -> Vec<Voxel> {
    let s = m.shape();
    let mut out = Vec::new();
    for z in 0..s[0] {
        for y in 0..s[1] {
            for x in 0..s[2] {
                if !m.get(z, y, x) {
                    continue;
                }
                let c = [z as i64, y as i64, x as i64];
                let exposed = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]].iter().any(|d| {
                    let n: Vec<i64> = (0..3).map(|a| c[a] + d[a]).collect();
                    (0..3).any(|a| n[a] < 0 || n[a] >= s[a] as i64) || !m.get(n[0] as usize, n[1] as usize, n[2] as usize)
                });
                if exposed {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

pub fn brute_directed(from: &[Voxel], to: &[Voxel]) -> Vec<f64> {
    let mut d: Vec<f64> = from
        .iter()
        .map(|a| {
            let best = to
                .iter()
                .map(|b| (0..3).map(|k| (a[k] as i64 - b[k] as i64).pow(2)).sum::<i64>())
                .min()
                .unwrap();
            (best as f64).sqrt()
        })
        .collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    d
}

pub fn p95(sorted: &[f64]) -> f64 {
    let pos = 0.95 * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = pos.ceil() as usize;
    sorted[i] + (pos - i as f64) * (sorted[j] - sorted[i])
}

pub fn brute_asd_hd95(a: &BinaryMask, b: &BinaryMask) -> Option<(f64, f64)> {
    let (sa, sb) = (brute_surface(a), brute_surface(b));
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let (ab, ba) = (brute_directed(&sa, &sb), brute_directed(&sb, &sa));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Some(((mean(&ab) + mean(&ba)) / 2.0, p95(&ab).max(p95(&ba))))
}

