use super::{Backward, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics per channel over batch and space; running stats for inference.
    Batch,
    /// Statistics per sample over `channels / groups` channels and space.
    Group(usize),
    /// Statistics per sample and channel over space.
    Instance,
}

/// Mutable normalization state owned by a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormState {
    pub training: bool,
    /// Retention factor for running statistics.
    pub momentum: f32,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

impl NormState {
    pub fn new(channels: usize) -> Self {
        Self {
            training: true,
            momentum: 0.9,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Copy)]
struct Layout {
    n: usize,
    c: usize,
    spatial: usize,
    groups: usize,
    mode: NormMode,
}

impl Layout {
    fn group_of(&self, n: usize, c: usize) -> usize {
        match self.mode {
            NormMode::Batch => c,
            NormMode::Group(g) => n * g + c / (self.c / g),
            NormMode::Instance => n * self.c + c,
        }
    }

    fn group_len(&self) -> usize {
        self.n * self.c * self.spatial / self.groups
    }
}

struct Normalize {
    layout: Layout,
    /// Normalized activations before the affine transform.
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    /// Statistics were computed from the batch (training path).
    batch_stats: bool,
}

impl Backward for Normalize {
    fn op_name(&self) -> &'static str {
        "normalize"
    }

    fn backward(&self, inputs: &[Tensor], g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let l = self.layout;
        let s = l.spatial;
        let gamma = inputs[1].data();
        let mut dgamma = vec![0.0f64; l.c];
        let mut dbeta = vec![0.0f64; l.c];
        let mut sum_dxhat = vec![0.0f64; l.groups];
        let mut sum_dxhat_xhat = vec![0.0f64; l.groups];
        for n in 0..l.n {
            for c in 0..l.c {
                let gi = l.group_of(n, c);
                let range = (n * l.c + c) * s..(n * l.c + c + 1) * s;
                for (&dy, &xh) in g[range.clone()].iter().zip(&self.xhat[range]) {
                    dgamma[c] += (dy * xh) as f64;
                    dbeta[c] += dy as f64;
                    let dxh = (dy * gamma[c]) as f64;
                    sum_dxhat[gi] += dxh;
                    sum_dxhat_xhat[gi] += dxh * xh as f64;
                }
            }
        }
        let dx = inputs[0].requires_grad().then(|| {
            let m = l.group_len() as f64;
            let mut dx = vec![0.0f32; g.len()];
            for n in 0..l.n {
                for c in 0..l.c {
                    let gi = l.group_of(n, c);
                    let inv = self.inv_std[gi];
                    let (m1, m2) = if self.batch_stats {
                        ((sum_dxhat[gi] / m) as f32, (sum_dxhat_xhat[gi] / m) as f32)
                    } else {
                        (0.0, 0.0)
                    };
                    let range = (n * l.c + c) * s..(n * l.c + c + 1) * s;
                    for ((d, &dy), &xh) in dx[range.clone()].iter_mut().zip(&g[range.clone()]).zip(&self.xhat[range]) {
                        *d = inv * (dy * gamma[c] - m1 - xh * m2);
                    }
                }
            }
            dx
        });
        let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
        vec![
            dx,
            inputs[1].requires_grad().then(|| to32(dgamma)),
            inputs[2].requires_grad().then(|| to32(dbeta)),
        ]
    }
}

/// Normalizes `input [N,C,D,H,W]` per statistic group, then applies the
/// per-channel affine `gamma·x̂ + beta`.
pub fn normalize(
    input: &Tensor,
    mode: NormMode,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
    state: &mut NormState,
) -> Result<Tensor> {
    const OP: &str = "normalize";
    let shape = input.shape();
    if shape.len() < 3 {
        return Err(Error::shape(OP, format!("expected [N,C,...spatial], got {shape:?}")));
    }
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let groups = match mode {
        NormMode::Batch => c,
        NormMode::Group(g) => {
            if g == 0 || c % g != 0 {
                return Err(Error::Config(format!("group norm: {c} channels not divisible into {g} groups")));
            }
            n * g
        }
        NormMode::Instance => n * c,
    };
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            OP,
            format!("affine params must be [{c}], got {:?} and {:?}", gamma.shape(), beta.shape()),
        ));
    }
    let layout = Layout { n, c, spatial, groups, mode };
    let use_running = mode == NormMode::Batch && !state.training;
    if mode == NormMode::Batch && (state.running_mean.len() != c || state.running_var.len() != c) {
        return Err(Error::shape(OP, format!("running statistics sized for {} channels, input has {c}", state.running_mean.len())));
    }

    let x = input.data();
    let (mean, var) = if use_running {
        (
            state.running_mean.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            state.running_var.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        )
    } else {
        let mut sum = vec![0.0f64; groups];
        let mut sq = vec![0.0f64; groups];
        for ni in 0..n {
            for ci in 0..c {
                let gi = layout.group_of(ni, ci);
                let base = (ni * c + ci) * spatial;
                for &v in &x[base..base + spatial] {
                    sum[gi] += v as f64;
                }
            }
        }
        let m = layout.group_len() as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / m).collect();
        for ni in 0..n {
            for ci in 0..c {
                let gi = layout.group_of(ni, ci);
                let base = (ni * c + ci) * spatial;
                for &v in &x[base..base + spatial] {
                    sq[gi] += (v as f64 - mean[gi]).powi(2);
                }
            }
        }
        let var: Vec<f64> = sq.iter().map(|s| s / m).collect();
        if mode == NormMode::Batch {
            let k = state.momentum;
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for ci in 0..c {
                state.running_mean[ci] = k * state.running_mean[ci] + (1.0 - k) * mean[ci] as f32;
                state.running_var[ci] = k * state.running_var[ci] + (1.0 - k) * (var[ci] * unbias) as f32;
            }
        }
        (mean, var)
    };
    let inv_std: Vec<f32> = var.iter().map(|v| (1.0 / (v + eps as f64).sqrt()) as f32).collect();

    let (gm, bt) = (gamma.data(), beta.data());
    let mut xhat = vec![0.0f32; x.len()];
    let mut y = vec![0.0f32; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let gi = layout.group_of(ni, ci);
            let (mu, inv) = (mean[gi] as f32, inv_std[gi]);
            let base = (ni * c + ci) * spatial;
            for i in base..base + spatial {
                let h = (x[i] - mu) * inv;
                xhat[i] = h;
                y[i] = gm[ci] * h + bt[ci];
            }
        }
    }
    drop(x);
    let op = Normalize { layout, xhat, inv_std, batch_stats: !use_running };
    Ok(Tensor::from_op(
        shape.to_vec(),
        y,
        vec![input.clone(), gamma.clone(), beta.clone()],
        Box::new(op),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo_random(n: usize, seed: u32) -> Vec<f32> {
        let mut s = seed.wrapping_mul(2654435761).wrapping_add(1);
        (0..n)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 17;
                s ^= s << 5;
                (s % 10_000) as f32 / 1000.0 - 5.0
            })
            .collect()
    }

    fn group_stats(y: &[f32], idx: impl Fn(usize) -> usize, groups: usize) -> Vec<(f64, f64)> {
        let mut acc = vec![Vec::new(); groups];
        for (i, &v) in y.iter().enumerate() {
            acc[idx(i)].push(v as f64);
        }
        acc.into_iter()
            .map(|v| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
                (m, var)
            })
            .collect()
    }

    #[test]
    fn standardizes_each_statistic_group() {
        let (n, c, s) = (2, 8, 27);
        let x = Tensor::new(&[n, c, 3, 3, 3], pseudo_random(n * c * s, 3)).unwrap();
        let gamma = Tensor::full(&[c], 1.0);
        let beta = Tensor::zeros(&[c]);
        let cases: [(NormMode, usize, Box<dyn Fn(usize) -> usize>); 3] = [
            (NormMode::Batch, c, Box::new(move |i| (i / s) % c)),
            (NormMode::Group(4), n * 4, Box::new(move |i| (i / (s * c)) * 4 + ((i / s) % c) / 2)),
            (NormMode::Instance, n * c, Box::new(move |i| i / s)),
        ];
        for (mode, groups, idx) in cases {
            let mut st = NormState::new(c);
            let y = normalize(&x, mode, &gamma, &beta, 1e-5, &mut st).unwrap();
            for (m, v) in group_stats(&y.data(), idx, groups) {
                assert!(m.abs() < 1e-5, "{mode:?} mean {m}");
                assert!((v - 1.0).abs() < 1e-3, "{mode:?} var {v}");
            }
        }
    }

    #[test]
    fn constant_input_maps_to_beta() {
        let x = Tensor::full(&[2, 4, 2, 2, 2], 3.0);
        let gamma = Tensor::full(&[4], 2.0);
        let beta = Tensor::new(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        for mode in [NormMode::Batch, NormMode::Group(2), NormMode::Instance] {
            let y = normalize(&x, mode, &gamma, &beta, 1e-5, &mut NormState::new(4)).unwrap();
            for (i, &v) in y.data().iter().enumerate() {
                assert!((v - [0.1, 0.2, 0.3, 0.4][(i / 8) % 4]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn indivisible_groups_is_config_error() {
        let x = Tensor::zeros(&[1, 6, 2, 2, 2]);
        let g = Tensor::full(&[6], 1.0);
        let b = Tensor::zeros(&[6]);
        let err = normalize(&x, NormMode::Group(4), &g, &b, 1e-5, &mut NormState::new(6)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn batch_mode_tracks_running_stats_and_uses_them_for_inference() {
        let x = Tensor::new(&[2, 1, 2, 2, 2], (0..16).map(|i| i as f32).collect()).unwrap();
        let g = Tensor::full(&[1], 1.0);
        let b = Tensor::zeros(&[1]);
        let mut st = NormState::new(1);
        normalize(&x, NormMode::Batch, &g, &b, 1e-5, &mut st).unwrap();
        // mean 7.5, unbiased var 22.6667
        assert!((st.running_mean[0] - 0.75).abs() < 1e-5);
        assert!((st.running_var[0] - (0.9 + 0.1 * 22.666_667)).abs() < 1e-4);
        st.training = false;
        let y1 = normalize(&x, NormMode::Batch, &g, &b, 1e-5, &mut st.clone()).unwrap();
        let y2 = normalize(&x, NormMode::Batch, &g, &b, 1e-5, &mut st).unwrap();
        assert_eq!(*y1.data(), *y2.data());
        let expect = (0.0 - 0.75) / (st.running_var[0] + 1e-5).sqrt();
        assert!((y1.data()[0] - expect).abs() < 1e-5);
    }
}
