//! Finite-difference gradient checks for every differentiable operation.
//!
//! Each case evaluates `L = Σ w ⊙ op(inputs)` for random weights `w`. The
//! analytic gradient comes from the autodiff engine in `f32`; the numeric
//! one from central differences of an independent `f64` loop implementation
//! of the same forward. The error of one input is
//! `max|analytic - numeric| / max(max|analytic|, max|numeric|)` over the
//! checked elements.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::mix_seed;
use crate::error::Result;
use crate::losses::{dice_loss, sharpen_attached, SharpenConfig};
use crate::tensor::{
    add, conv3d, conv_transpose3d, mean, mse, mul, narrow, normalize, relu, reshape, scalar_mul, sigmoid, sub, sum,
    upsample, NormMode, NormState, Tensor, UpsampleMode,
};

pub const EPSILON: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
pub const SEEDS_PER_OP: u64 = 20;
/// Elements per input checked by finite differences; smaller inputs are checked in full.
pub const MAX_CHECKED: usize = 64;

/// Every differentiable operation, in report order.
pub const OPS: [&str; 17] = [
    "conv3d",
    "conv_transpose3d",
    "upsample",
    "normalize",
    "relu",
    "sigmoid",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "sum",
    "mean",
    "mse",
    "dice_loss",
    "sharpen",
    "narrow",
    "reshape",
];

struct Input {
    shape: Vec<usize>,
    data: Vec<f32>,
    differentiable: bool,
}

type Engine = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;
type Reference = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

struct Case {
    variant: String,
    inputs: Vec<Input>,
    engine: Engine,
    reference: Reference,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpResult {
    pub op: &'static str,
    /// Worst relative error over all variants, seeds and inputs.
    pub worst_rel_err: f64,
    /// Variant with the worst error.
    pub worst_variant: String,
    pub cases: usize,
}

impl OpResult {
    pub fn passed(&self) -> bool {
        self.worst_rel_err <= TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub ops: Vec<OpResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(OpResult::passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.ops.iter().filter(|r| !r.passed()).map(|r| r.op).collect()
    }
}

// ---- f64 references ----

fn idx5(s: &[usize], n: usize, c: usize, z: usize, y: usize, x: usize) -> usize {
    (((n * s[1] + c) * s[2] + z) * s[3] + y) * s[4] + x
}

fn ref_conv3d(x: &[f64], xs: &[usize], w: &[f64], f: usize, k: usize, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let o: Vec<usize> = (2..5).map(|a| (xs[a] + 2 * pad - k) / stride + 1).collect();
    let os = [xs[0], f, o[0], o[1], o[2]];
    let mut out = vec![0.0; os.iter().product()];
    for n in 0..xs[0] {
        for fi in 0..f {
            for oz in 0..o[0] {
                for oy in 0..o[1] {
                    for ox in 0..o[2] {
                        let mut acc = b[fi];
                        for c in 0..xs[1] {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (oz * stride + kz) as isize - pad as isize;
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        let inside = |v: isize, a: usize| v >= 0 && (v as usize) < xs[a];
                                        if inside(iz, 2) && inside(iy, 3) && inside(ix, 4) {
                                            let xv = x[idx5(xs, n, c, iz as usize, iy as usize, ix as usize)];
                                            acc += xv * w[(((fi * xs[1] + c) * k + kz) * k + ky) * k + kx];
                                        }
                                    }
                                }
                            }
                        }
                        out[idx5(&os, n, fi, oz, oy, ox)] = acc;
                    }
                }
            }
        }
    }
    out
}

fn ref_conv_transpose(x: &[f64], xs: &[usize], w: &[f64], f: usize) -> Vec<f64> {
    let os = [xs[0], f, xs[2] * 2, xs[3] * 2, xs[4] * 2];
    let mut out = vec![0.0; os.iter().product()];
    for n in 0..xs[0] {
        for c in 0..xs[1] {
            for z in 0..xs[2] {
                for y in 0..xs[3] {
                    for xx in 0..xs[4] {
                        let v = x[idx5(xs, n, c, z, y, xx)];
                        for fi in 0..f {
                            for a in 0..2 {
                                for b in 0..2 {
                                    for e in 0..2 {
                                        let wv = w[(((c * f + fi) * 2 + a) * 2 + b) * 2 + e];
                                        out[idx5(&os, n, fi, 2 * z + a, 2 * y + b, 2 * xx + e)] += v * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Linear interpolation weights of output coordinate `o` on an axis of `n` samples.
fn linear_taps(o: usize, n: usize, factor: usize) -> [(usize, f64); 2] {
    let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
    let lo = (src.floor() as usize).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    let t = src - lo as f64;
    [(lo, 1.0 - t), (hi, t)]
}

fn ref_upsample(x: &[f64], xs: &[usize], factor: usize, trilinear: bool) -> Vec<f64> {
    let os = [xs[0], xs[1], xs[2] * factor, xs[3] * factor, xs[4] * factor];
    let mut out = vec![0.0; os.iter().product()];
    for n in 0..xs[0] {
        for c in 0..xs[1] {
            for oz in 0..os[2] {
                for oy in 0..os[3] {
                    for ox in 0..os[4] {
                        let v = if trilinear {
                            let mut acc = 0.0;
                            for (z, wz) in linear_taps(oz, xs[2], factor) {
                                for (y, wy) in linear_taps(oy, xs[3], factor) {
                                    for (xx, wx) in linear_taps(ox, xs[4], factor) {
                                        acc += wz * wy * wx * x[idx5(xs, n, c, z, y, xx)];
                                    }
                                }
                            }
                            acc
                        } else {
                            x[idx5(xs, n, c, oz / factor, oy / factor, ox / factor)]
                        };
                        out[idx5(&os, n, c, oz, oy, ox)] = v;
                    }
                }
            }
        }
    }
    out
}

fn ref_normalize(x: &[f64], xs: &[usize], mode: NormMode, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let (nb, c) = (xs[0], xs[1]);
    let s: usize = xs[2..].iter().product();
    // members of each statistic group as (n, channel) pairs
    let groups: Vec<Vec<(usize, usize)>> = match mode {
        NormMode::Batch => (0..c).map(|ch| (0..nb).map(|n| (n, ch)).collect()).collect(),
        NormMode::Instance => (0..nb).flat_map(|n| (0..c).map(move |ch| vec![(n, ch)])).collect(),
        NormMode::Group(g) => (0..nb)
            .flat_map(|n| (0..g).map(move |gi| (gi * c / g..(gi + 1) * c / g).map(|ch| (n, ch)).collect()))
            .collect(),
    };
    let mut out = vec![0.0; x.len()];
    for members in groups {
        let vals: Vec<f64> = members.iter().flat_map(|&(n, ch)| x[(n * c + ch) * s..(n * c + ch + 1) * s].to_vec()).collect();
        let mu = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for &(n, ch) in &members {
            for i in (n * c + ch) * s..(n * c + ch + 1) * s {
                out[i] = gamma[ch] * (x[i] - mu) * inv + beta[ch];
            }
        }
    }
    out
}

// ---- case construction ----

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn input(shape: &[usize], data: Vec<f32>) -> Input {
    Input { shape: shape.to_vec(), data, differentiable: true }
}

fn fixed(shape: &[usize], data: Vec<f32>) -> Input {
    Input { shape: shape.to_vec(), data, differentiable: false }
}

fn numel(s: &[usize]) -> usize {
    s.iter().product()
}

fn cases_for(op: &str, rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases = Vec::new();
    let mut push = |variant: String, inputs: Vec<Input>, engine: Engine, reference: Reference| {
        cases.push(Case { variant, inputs, engine, reference });
    };
    match op {
        "conv3d" => {
            for (k, stride, pad, d) in [(3, 1, 1, 4), (3, 2, 1, 5), (1, 1, 0, 3), (3, 1, 0, 4)] {
                let xs = vec![2, 2, d, d + 1, d];
                let (c, f) = (2, 3);
                let ws = vec![f, c, k, k, k];
                let inputs = vec![
                    input(&xs, uniform(rng, numel(&xs), -1.0, 1.0)),
                    input(&ws, uniform(rng, numel(&ws), -1.0, 1.0)),
                    input(&[f], uniform(rng, f, -1.0, 1.0)),
                ];
                let xs2 = xs.clone();
                push(
                    format!("k{k} s{stride} p{pad}"),
                    inputs,
                    Box::new(move |t| conv3d(&t[0], &t[1], &t[2], stride, pad)),
                    Box::new(move |v| ref_conv3d(&v[0], &xs2, &v[1], f, k, &v[2], stride, pad)),
                );
            }
        }
        "conv_transpose3d" => {
            let xs = vec![2, 2, 2, 3, 2];
            let f = 3;
            let inputs =
                vec![input(&xs, uniform(rng, numel(&xs), -1.0, 1.0)), input(&[2, f, 2, 2, 2], uniform(rng, 2 * f * 8, -1.0, 1.0))];
            let xs2 = xs.clone();
            push(
                "k2 s2".into(),
                inputs,
                Box::new(|t| conv_transpose3d(&t[0], &t[1], 2)),
                Box::new(move |v| ref_conv_transpose(&v[0], &xs2, &v[1], f)),
            );
        }
        "upsample" => {
            for (mode, factor) in [(UpsampleMode::Trilinear, 2), (UpsampleMode::Trilinear, 4), (UpsampleMode::Nearest, 2)] {
                let xs = vec![1, 2, 2, 3, 4];
                let xs2 = xs.clone();
                let tri = mode == UpsampleMode::Trilinear;
                push(
                    format!("{} x{factor}", if tri { "trilinear" } else { "nearest" }),
                    vec![input(&xs, uniform(rng, numel(&xs), -1.0, 1.0))],
                    Box::new(move |t| upsample(&t[0], factor, mode)),
                    Box::new(move |v| ref_upsample(&v[0], &xs2, factor, tri)),
                );
            }
        }
        "normalize" => {
            for mode in [NormMode::Batch, NormMode::Group(2), NormMode::Instance] {
                let xs = vec![2, 4, 2, 3, 2];
                let xs2 = xs.clone();
                let c = xs[1];
                push(
                    format!("{mode:?}"),
                    vec![
                        input(&xs, uniform(rng, numel(&xs), -2.0, 2.0)),
                        input(&[c], uniform(rng, c, 0.5, 1.5)),
                        input(&[c], uniform(rng, c, -0.5, 0.5)),
                    ],
                    Box::new(move |t| normalize(&t[0], mode, &t[1], &t[2], 1e-5, &mut NormState::new(c))),
                    Box::new(move |v| ref_normalize(&v[0], &xs2, mode, &v[1], &v[2], 1e-5)),
                );
            }
        }
        "relu" => {
            // keep clear of the kink so the central difference never straddles it
            let data = (0..40)
                .map(|_| {
                    let m = rng.random_range(0.01f32..1.0);
                    if rng.random_bool(0.5) { m } else { -m }
                })
                .collect();
            push(
                "".into(),
                vec![input(&[5, 8], data)],
                Box::new(|t| Ok(relu(&t[0]))),
                Box::new(|v| v[0].iter().map(|&x| x.max(0.0)).collect()),
            );
        }
        "sigmoid" => {
            push(
                "".into(),
                vec![input(&[4, 10], uniform(rng, 40, -4.0, 4.0))],
                Box::new(|t| Ok(sigmoid(&t[0]))),
                Box::new(|v| v[0].iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect()),
            );
        }
        "add" | "sub" | "mul" => {
            let a = uniform(rng, 24, -1.0, 1.0);
            let b = uniform(rng, 24, -1.0, 1.0);
            let which = op.to_string();
            let which2 = op.to_string();
            push(
                "".into(),
                vec![input(&[2, 3, 4], a), input(&[2, 3, 4], b)],
                Box::new(move |t| match which.as_str() {
                    "add" => add(&t[0], &t[1]),
                    "sub" => sub(&t[0], &t[1]),
                    _ => mul(&t[0], &t[1]),
                }),
                Box::new(move |v| {
                    v[0].iter()
                        .zip(&v[1])
                        .map(|(&x, &y)| match which2.as_str() {
                            "add" => x + y,
                            "sub" => x - y,
                            _ => x * y,
                        })
                        .collect()
                }),
            );
        }
        "scalar_mul" => {
            let k: f32 = rng.random_range(-2.0..2.0);
            push(
                format!("k={k}"),
                vec![input(&[3, 7], uniform(rng, 21, -1.0, 1.0))],
                Box::new(move |t| Ok(scalar_mul(&t[0], k))),
                Box::new(move |v| v[0].iter().map(|&x| x * k as f64).collect()),
            );
        }
        "sum" | "mean" => {
            let is_mean = op == "mean";
            push(
                "".into(),
                vec![input(&[3, 5, 2], uniform(rng, 30, -1.0, 1.0))],
                Box::new(move |t| Ok(if is_mean { mean(&t[0]) } else { sum(&t[0]) })),
                Box::new(move |v| {
                    let s: f64 = v[0].iter().sum();
                    vec![if is_mean { s / v[0].len() as f64 } else { s }]
                }),
            );
        }
        "mse" => {
            push(
                "".into(),
                vec![input(&[2, 9], uniform(rng, 18, -1.0, 1.0)), input(&[2, 9], uniform(rng, 18, -1.0, 1.0))],
                Box::new(|t| mse(&t[0], &t[1])),
                Box::new(|v| {
                    vec![v[0].iter().zip(&v[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / v[0].len() as f64]
                }),
            );
        }
        "dice_loss" => {
            let n = 30;
            let y: Vec<f32> = (0..n).map(|_| rng.random_bool(0.4) as u8 as f32).collect();
            push(
                "smooth 1e-5".into(),
                vec![input(&[2, 15], uniform(rng, n, 0.02, 0.98)), fixed(&[2, 15], y)],
                Box::new(|t| dice_loss(&t[0], &t[1], 1e-5)),
                Box::new(|v| {
                    let inter: f64 = v[0].iter().zip(&v[1]).map(|(p, y)| p * y).sum();
                    let sp: f64 = v[0].iter().sum();
                    let sy: f64 = v[1].iter().sum();
                    vec![1.0 - (2.0 * inter + 1e-5) / (sp + sy + 1e-5)]
                }),
            );
        }
        "sharpen" => {
            for temperature in [0.1f32, 0.5] {
                let cfg = SharpenConfig { temperature };
                let inv_t = 1.0 / temperature as f64;
                push(
                    format!("T={temperature}"),
                    vec![input(&[4, 6], uniform(rng, 24, 0.05, 0.95))],
                    Box::new(move |t| sharpen_attached(&t[0], &cfg)),
                    Box::new(move |v| {
                        v[0].iter().map(|&p| p.powf(inv_t) / (p.powf(inv_t) + (1.0 - p).powf(inv_t))).collect()
                    }),
                );
            }
        }
        "narrow" => {
            let start = rng.random_range(0..3);
            push(
                format!("rows {start}..{}", start + 2),
                vec![input(&[5, 2, 3], uniform(rng, 30, -1.0, 1.0))],
                Box::new(move |t| narrow(&t[0], start, 2)),
                Box::new(move |v| v[0][start * 6..(start + 2) * 6].to_vec()),
            );
        }
        "reshape" => {
            push(
                "[2,3,4]->[6,4]".into(),
                vec![input(&[2, 3, 4], uniform(rng, 24, -1.0, 1.0))],
                Box::new(|t| reshape(&t[0], &[6, 4])),
                Box::new(|v| v[0].clone()),
            );
        }
        other => panic!("no gradient case for `{other}`"),
    }
    cases
}

/// Relative error of every differentiable input of one case.
fn check_case(case: &Case, rng: &mut ChaCha8Rng) -> Result<f64> {
    let tensors = case
        .inputs
        .iter()
        .map(|i| {
            if i.differentiable {
                Tensor::parameter("x", &i.shape, i.data.clone())
            } else {
                Tensor::new(&i.shape, i.data.clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let out = (case.engine)(&tensors)?;
    let w: Vec<f32> = (0..out.numel()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let w64: Vec<f64> = w.iter().map(|&v| v as f64).collect();
    let wt = Tensor::new(out.shape(), w)?;
    sum(&mul(&out, &wt)?).backward()?;

    let base: Vec<Vec<f64>> = case.inputs.iter().map(|i| i.data.iter().map(|&v| v as f64).collect()).collect();
    let loss = |vals: &[Vec<f64>]| -> f64 { (case.reference)(vals).iter().zip(&w64).map(|(o, w)| o * w).sum() };
    let mut worst = 0.0f64;
    for (k, inp) in case.inputs.iter().enumerate() {
        if !inp.differentiable {
            continue;
        }
        let n = inp.data.len();
        let analytic = tensors[k].grad().unwrap_or_else(|| vec![0.0; n]);
        let picks: Vec<usize> = if n <= MAX_CHECKED { (0..n).collect() } else { sample(rng, n, MAX_CHECKED).into_vec() };
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        let mut vals = base.clone();
        for &e in &picks {
            vals[k][e] = base[k][e] + EPSILON;
            let up = loss(&vals);
            vals[k][e] = base[k][e] - EPSILON;
            let down = loss(&vals);
            vals[k][e] = base[k][e];
            let numeric = (up - down) / (2.0 * EPSILON);
            let a = analytic[e] as f64;
            diff = diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    Ok(worst)
}

/// Checks one operation over `SEEDS_PER_OP` seeds starting at `seed`.
pub fn check_op(op: &'static str, seed: u64) -> Result<OpResult> {
    let mut res = OpResult { op, worst_rel_err: 0.0, worst_variant: String::new(), cases: 0 };
    let op_tag = OPS.iter().position(|&o| o == op).unwrap_or(OPS.len()) as u64;
    for s in seed..seed + SEEDS_PER_OP {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(s, &[0x6c, op_tag]));
        for case in cases_for(op, &mut rng) {
            let err = check_case(&case, &mut rng)?;
            res.cases += 1;
            if err >= res.worst_rel_err {
                res.worst_rel_err = err;
                res.worst_variant = format!("{} (seed {s})", case.variant).trim().to_string();
            }
        }
    }
    Ok(res)
}

/// Runs every operation in [`OPS`].
pub fn run_all(seed: u64) -> Result<GradcheckReport> {
    Ok(GradcheckReport { ops: OPS.iter().map(|&op| check_op(op, seed)).collect::<Result<_>>()? })
}
