//! Overlap and surface-distance metrics on binary volumes.
//!
//! Distances are in voxel units with isotropic spacing. Surfaces use
//! 6-connectivity: a foreground voxel is on the surface when any face
//! neighbour is background or outside the volume.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Threshold applied to probability maps; a voxel is foreground iff `p > 0.5`.
pub const PREDICTION_THRESHOLD: f32 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    shape: [usize; 3],
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn new(shape: [usize; 3], bits: Vec<u8>) -> Result<Self> {
        if shape.iter().product::<usize>() != bits.len() {
            return Err(Error::shape("mask", format!("shape {shape:?} vs {} values", bits.len())));
        }
        if let Some(i) = bits.iter().position(|&b| b > 1) {
            return Err(Error::invalid("mask", format!("value {} at {i} is not 0 or 1", bits[i])));
        }
        Ok(Self { shape, bits })
    }

    pub fn empty(shape: [usize; 3]) -> Self {
        Self { shape, bits: vec![0; shape.iter().product()] }
    }

    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(shape.iter().product());
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    bits.push(f(z, y, x) as u8);
                }
            }
        }
        Self { shape, bits }
    }

    /// Foreground where `p > PREDICTION_THRESHOLD`.
    pub fn from_probs(shape: [usize; 3], probs: &[f32]) -> Result<Self> {
        Self::new(shape, probs.iter().map(|&p| (p > PREDICTION_THRESHOLD) as u8).collect())
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.bits[self.index(z, y, x)] == 1
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| b as f32).collect()
    }
}

fn same_shape(op: &'static str, a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

/// Dice and Jaccard in percent. Two empty masks score (100, 100).
pub fn dice_jaccard(pred: &BinaryMask, gt: &BinaryMask) -> Result<(f64, f64)> {
    same_shape("dice_jaccard", pred, gt)?;
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        inter += (p & g) as usize;
        np += p as usize;
        ng += g as usize;
    }
    if np + ng == 0 {
        return Ok((100.0, 100.0));
    }
    let union = np + ng - inter;
    Ok((
        200.0 * inter as f64 / (np + ng) as f64,
        100.0 * inter as f64 / union as f64,
    ))
}

pub type Voxel = [usize; 3];

/// Surface voxels in raster order.
pub fn extract_surface(m: &BinaryMask) -> Vec<Voxel> {
    let [d, h, w] = m.shape;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !m.get(z, y, x) {
                    continue;
                }
                let interior = z > 0
                    && z + 1 < d
                    && y > 0
                    && y + 1 < h
                    && x > 0
                    && x + 1 < w
                    && m.get(z - 1, y, x)
                    && m.get(z + 1, y, x)
                    && m.get(z, y - 1, x)
                    && m.get(z, y + 1, x)
                    && m.get(z, y, x - 1)
                    && m.get(z, y, x + 1);
                if !interior {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

const FAR: i64 = i64::MAX / 4;

/// In-place 1D lower envelope `out[i] = min_j (i - j)^2 + f[j]` along a strided line.
fn min_plus_parabola(buf: &mut [i64], start: usize, stride: usize, len: usize, scratch: &mut Vec<i64>) {
    scratch.clear();
    scratch.extend((0..len).map(|i| buf[start + i * stride]));
    for i in 0..len {
        let mut best = FAR;
        for (j, &f) in scratch.iter().enumerate() {
            if f >= FAR {
                continue;
            }
            let d = i as i64 - j as i64;
            best = best.min(d * d + f);
        }
        buf[start + i * stride] = best;
    }
}

/// Exact squared Euclidean distance from every voxel to the nearest point
/// of `sites`, by three separable passes; `FAR` where `sites` is empty.
fn squared_distance_field(shape: [usize; 3], sites: &[Voxel]) -> Vec<i64> {
    let [d, h, w] = shape;
    let mut f = vec![FAR; d * h * w];
    for &[z, y, x] in sites {
        f[(z * h + y) * w + x] = 0;
    }
    let mut scratch = Vec::new();
    for z in 0..d {
        for y in 0..h {
            min_plus_parabola(&mut f, (z * h + y) * w, 1, w, &mut scratch);
        }
    }
    for z in 0..d {
        for x in 0..w {
            min_plus_parabola(&mut f, z * h * w + x, w, h, &mut scratch);
        }
    }
    for y in 0..h {
        for x in 0..w {
            min_plus_parabola(&mut f, y * w + x, h * w, d, &mut scratch);
        }
    }
    f
}

/// Mean of an ascending list, summed in that order.
pub fn sorted_mean(sorted: &[f64]) -> f64 {
    sorted.iter().sum::<f64>() / sorted.len() as f64
}

/// Percentile `q ∈ [0, 1]` of an ascending list by linear interpolation
/// between order statistics at rank `q·(n − 1)`.
pub fn sorted_percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceDistances {
    pub asd: f64,
    pub hd95: f64,
}

fn directed(from: &[Voxel], field: &[i64], shape: [usize; 3]) -> Vec<f64> {
    let [_, h, w] = shape;
    let mut d: Vec<f64> = from.iter().map(|&[z, y, x]| (field[(z * h + y) * w + x] as f64).sqrt()).collect();
    d.sort_by(f64::total_cmp);
    d
}

/// Average symmetric surface distance and 95th-percentile Hausdorff distance
/// between two surfaces in a volume of `shape`. `None` when either is empty.
pub fn surface_distances(shape: [usize; 3], a: &[Voxel], b: &[Voxel]) -> Option<SurfaceDistances> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let a_to_b = directed(a, &squared_distance_field(shape, b), shape);
    let b_to_a = directed(b, &squared_distance_field(shape, a), shape);
    Some(SurfaceDistances {
        asd: (sorted_mean(&a_to_b) + sorted_mean(&b_to_a)) / 2.0,
        hd95: sorted_percentile(&a_to_b, 0.95).max(sorted_percentile(&b_to_a, 0.95)),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    /// Percent.
    pub dice: f64,
    /// Percent.
    pub jaccard: f64,
    /// Voxels; `None` when a surface is empty.
    pub asd: Option<f64>,
    /// Voxels; `None` when a surface is empty.
    pub hd95: Option<f64>,
}

pub fn evaluate_masks(pred: &BinaryMask, gt: &BinaryMask) -> Result<MetricReport> {
    let (dice, jaccard) = dice_jaccard(pred, gt)?;
    let sd = surface_distances(pred.shape, &extract_surface(pred), &extract_surface(gt));
    Ok(MetricReport { dice, jaccard, asd: sd.map(|s| s.asd), hd95: sd.map(|s| s.hd95) })
}

/// Arithmetic mean over cases; distance means skip undefined entries.
pub fn mean_report(rows: &[MetricReport]) -> Option<MetricReport> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let defined_mean = |f: fn(&MetricReport) -> Option<f64>| {
        let v: Vec<f64> = rows.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Some(MetricReport {
        dice: rows.iter().map(|r| r.dice).sum::<f64>() / n,
        jaccard: rows.iter().map(|r| r.jaccard).sum::<f64>() / n,
        asd: defined_mean(|r| r.asd),
        hd95: defined_mean(|r| r.hd95),
    })
}

/// Marker written in place of an undefined surface distance.
pub const UNDEFINED: &str = "undefined";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |x| x.to_string())
}

/// `case_id,dice,jaccard,asd,hd95` rows followed by a `mean` row.
pub fn report_csv(rows: &[(String, MetricReport)]) -> String {
    let mut out = String::from("case_id,dice,jaccard,asd,hd95\n");
    let mut push = |id: &str, r: &MetricReport| {
        let _ = writeln!(out, "{id},{},{},{},{}", r.dice, r.jaccard, fmt_opt(r.asd), fmt_opt(r.hd95));
    };
    for (id, r) in rows {
        push(id, r);
    }
    let reports: Vec<MetricReport> = rows.iter().map(|(_, r)| *r).collect();
    if let Some(m) = mean_report(&reports) {
        push("mean", &m);
    }
    out
}

/// Parses a field written by [`report_csv`].
pub fn parse_metric(field: &str) -> Option<f64> {
    if field == UNDEFINED {
        None
    } else {
        field.parse().ok()
    }
}
