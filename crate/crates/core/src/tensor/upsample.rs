use super::{Backward, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    /// Half-pixel centres (`align_corners = false`), edge-clamped.
    Trilinear,
}

/// Per-output-coordinate source taps along one axis.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    w_lo: f32,
    w_hi: f32,
}

fn axis_taps(size: usize, factor: usize, mode: UpsampleMode) -> Vec<Tap> {
    (0..size * factor)
        .map(|o| match mode {
            UpsampleMode::Nearest => Tap { lo: o / factor, hi: o / factor, w_lo: 1.0, w_hi: 0.0 },
            UpsampleMode::Trilinear => {
                let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
                let lo = (src.floor() as usize).min(size - 1);
                let hi = (lo + 1).min(size - 1);
                let frac = (src - lo as f64) as f32;
                Tap { lo, hi, w_lo: 1.0 - frac, w_hi: frac }
            }
        })
        .collect()
}

struct Upsample {
    planes: usize,
    inp: [usize; 3],
    taps: [Vec<Tap>; 3],
}

impl Upsample {
    /// Calls `visit(out_index, in_index, weight)` for every non-zero tap.
    fn for_each(&self, mut visit: impl FnMut(usize, usize, f32)) {
        let [d, h, w] = self.inp;
        let [tz, ty, tx] = &self.taps;
        let (od, oh, ow) = (tz.len(), ty.len(), tx.len());
        for p in 0..self.planes {
            let ibase = p * d * h * w;
            let obase = p * od * oh * ow;
            for (z, az) in tz.iter().enumerate() {
                for (y, ay) in ty.iter().enumerate() {
                    for (x, ax) in tx.iter().enumerate() {
                        let o = obase + (z * oh + y) * ow + x;
                        for (iz, wz) in [(az.lo, az.w_lo), (az.hi, az.w_hi)] {
                            if wz == 0.0 {
                                continue;
                            }
                            for (iy, wy) in [(ay.lo, ay.w_lo), (ay.hi, ay.w_hi)] {
                                if wy == 0.0 {
                                    continue;
                                }
                                for (ix, wx) in [(ax.lo, ax.w_lo), (ax.hi, ax.w_hi)] {
                                    if wx == 0.0 {
                                        continue;
                                    }
                                    visit(o, ibase + (iz * h + iy) * w + ix, wz * wy * wx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Backward for Upsample {
    fn op_name(&self) -> &'static str {
        "upsample"
    }
    fn backward(&self, inputs: &[Tensor], g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let mut dx = vec![0.0f32; inputs[0].numel()];
        self.for_each(|o, i, w| dx[i] += w * g[o]);
        vec![Some(dx)]
    }
}

/// Upsamples the trailing three (spatial) axes of a rank-5 tensor by `factor`.
pub fn upsample(input: &Tensor, factor: usize, mode: UpsampleMode) -> Result<Tensor> {
    const OP: &str = "upsample";
    if factor < 2 {
        return Err(Error::invalid(OP, format!("factor must be at least 2, got {factor}")));
    }
    let [n, c, d, h, w]: [usize; 5] = input
        .shape()
        .try_into()
        .map_err(|_| Error::shape(OP, format!("input must be rank 5, got {:?}", input.shape())))?;
    let op = Upsample {
        planes: n * c,
        inp: [d, h, w],
        taps: [axis_taps(d, factor, mode), axis_taps(h, factor, mode), axis_taps(w, factor, mode)],
    };
    let mut y = vec![0.0f32; input.numel() * factor * factor * factor];
    {
        let x = input.data();
        op.for_each(|o, i, wt| y[o] += wt * x[i]);
    }
    Ok(Tensor::from_op(
        vec![n, c, d * factor, h * factor, w * factor],
        y,
        vec![input.clone()],
        Box::new(op),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_is_preserved_in_both_modes() {
        let x = Tensor::full(&[1, 2, 3, 2, 4], 1.75);
        for mode in [UpsampleMode::Nearest, UpsampleMode::Trilinear] {
            let y = upsample(&x, 2, mode).unwrap();
            assert_eq!(y.shape(), &[1, 2, 6, 4, 8]);
            assert!(y.data().iter().all(|&v| (v - 1.75).abs() < 1e-6));
        }
    }

    #[test]
    fn nearest_replicates() {
        let x = Tensor::new(&[1, 1, 1, 1, 2], vec![4.0, -1.0]).unwrap();
        let y = upsample(&x, 2, UpsampleMode::Nearest).unwrap();
        let row: Vec<f32> = y.data()[..4].to_vec();
        assert_eq!(row, vec![4.0, 4.0, -1.0, -1.0]);
    }

    #[test]
    fn trilinear_half_pixel_weights() {
        // 1D profile [0, 4] upsampled by 2 -> [0, 1, 3, 4] (edge clamped).
        let x = Tensor::new(&[1, 1, 1, 1, 2], vec![0.0, 4.0]).unwrap();
        let y = upsample(&x, 2, UpsampleMode::Trilinear).unwrap();
        assert_eq!(y.data()[..4].to_vec(), vec![0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn factor_below_two_is_rejected() {
        let x = Tensor::zeros(&[1, 1, 2, 2, 2]);
        assert!(matches!(upsample(&x, 1, UpsampleMode::Nearest), Err(Error::InvalidArgument { .. })));
    }
}
