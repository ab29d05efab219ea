//! 3D convolution and its stride-2 transpose, lowered to single-threaded
//! sgemm calls so results are bit-reproducible.

use super::{Backward, Tensor};
use crate::error::{Error, Result};

/// `c[m×n] = alpha·a[m×k]·b[k×n] + beta·c` over explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: bounds asserted above; `c` is dense row-major m×n.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    f: usize,
    k: usize,
    stride: usize,
    pad: usize,
    inp: [usize; 3],
    out: [usize; 3],
}

impl ConvGeom {
    fn in_vol(&self) -> usize {
        self.inp.iter().product()
    }
    fn out_vol(&self) -> usize {
        self.out.iter().product()
    }
    fn patch(&self) -> usize {
        self.c * self.k * self.k * self.k
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output positions `lo..hi` whose source index `o·stride + tap − pad`
    /// lies inside the input along `axis`.
    fn valid(&self, tap: usize, axis: usize) -> (usize, usize) {
        let (s, p, n) = (self.stride as isize, self.pad as isize, self.inp[axis] as isize);
        let t = tap as isize;
        let lo = if p > t { (p - t + s - 1) / s } else { 0 };
        let hi = ((n - 1 + p - t) / s + 1).clamp(0, self.out[axis] as isize);
        (lo as usize, (hi as usize).max(lo as usize))
    }

    fn im2col(&self, x: &[f32], col: &mut [f32]) {
        let [id, ih, iw] = self.inp;
        let [_, oh, ow] = self.out;
        let p = self.out_vol();
        let (k, s) = (self.k, self.stride);
        for c in 0..self.c {
            let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
            for kd in 0..k {
                let (z0, z1) = self.valid(kd, 0);
                for kh in 0..k {
                    let (y0, y1) = self.valid(kh, 1);
                    for kw in 0..k {
                        let (x0, x1) = self.valid(kw, 2);
                        let row = ((c * k + kd) * k + kh) * k + kw;
                        let dst = &mut col[row * p..(row + 1) * p];
                        if z0 > 0 || z1 < self.out[0] || y0 > 0 || y1 < oh || x0 > 0 || x1 < ow {
                            dst.fill(0.0);
                        }
                        for z in z0..z1 {
                            let sz = z * s + kd - self.pad;
                            for y in y0..y1 {
                                let sy = y * s + kh - self.pad;
                                let srow = &xc[(sz * ih + sy) * iw..(sz * ih + sy + 1) * iw];
                                let drow = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                                if s == 1 {
                                    let sx0 = x0 + kw - self.pad;
                                    drow[x0..x1].copy_from_slice(&srow[sx0..sx0 + (x1 - x0)]);
                                } else {
                                    for x_ in x0..x1 {
                                        drow[x_] = srow[x_ * s + kw - self.pad];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, col: &[f32], dx: &mut [f32]) {
        let [id, ih, iw] = self.inp;
        let [_, oh, ow] = self.out;
        let p = self.out_vol();
        let (k, s) = (self.k, self.stride);
        for c in 0..self.c {
            let dxc = &mut dx[c * id * ih * iw..(c + 1) * id * ih * iw];
            for kd in 0..k {
                let (z0, z1) = self.valid(kd, 0);
                for kh in 0..k {
                    let (y0, y1) = self.valid(kh, 1);
                    for kw in 0..k {
                        let (x0, x1) = self.valid(kw, 2);
                        let row = ((c * k + kd) * k + kh) * k + kw;
                        let src = &col[row * p..(row + 1) * p];
                        for z in z0..z1 {
                            let sz = z * s + kd - self.pad;
                            for y in y0..y1 {
                                let sy = y * s + kh - self.pad;
                                let drow = &mut dxc[(sz * ih + sy) * iw..(sz * ih + sy + 1) * iw];
                                let srow = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                                for x_ in x0..x1 {
                                    drow[x_ * s + kw - self.pad] += srow[x_];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv3d {
    geom: ConvGeom,
}

impl Backward for Conv3d {
    fn op_name(&self) -> &'static str {
        "conv3d"
    }

    fn backward(&self, inputs: &[Tensor], g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let geom = self.geom;
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let (ivol, ovol, kk, f) = (geom.in_vol(), geom.out_vol(), geom.patch(), geom.f);
        let want_x = inputs[0].requires_grad();
        let want_w = inputs[1].requires_grad();
        let mut dx = want_x.then(|| vec![0.0f32; x.len()]);
        let mut dw = want_w.then(|| vec![0.0f32; w.len()]);
        let db = inputs[2].requires_grad().then(|| {
            let mut db = vec![0.0f32; f];
            for n in 0..geom.n {
                for (fi, slot) in db.iter_mut().enumerate() {
                    let go = &g[(n * f + fi) * ovol..(n * f + fi + 1) * ovol];
                    *slot += go.iter().map(|&v| v as f64).sum::<f64>() as f32;
                }
            }
            db
        });
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![0.0f32; kk * ovol] };
        let mut dcol = if want_x && !geom.is_pointwise() { vec![0.0f32; kk * ovol] } else { Vec::new() };
        for n in 0..geom.n {
            let xn = &x[n * geom.c * ivol..(n + 1) * geom.c * ivol];
            let gn = &g[n * f * ovol..(n + 1) * f * ovol];
            if let Some(dw) = dw.as_mut() {
                let colv: &[f32] = if geom.is_pointwise() {
                    xn
                } else {
                    geom.im2col(xn, &mut col);
                    &col
                };
                gemm(f, ovol, kk, gn, (ovol, 1), colv, (1, ovol), 1.0, dw);
            }
            if let Some(dx) = dx.as_mut() {
                let dxn = &mut dx[n * geom.c * ivol..(n + 1) * geom.c * ivol];
                if geom.is_pointwise() {
                    gemm(kk, f, ovol, &w, (1, kk), gn, (ovol, 1), 1.0, dxn);
                } else {
                    gemm(kk, f, ovol, &w, (1, kk), gn, (ovol, 1), 0.0, &mut dcol);
                    geom.col2im_add(&dcol, dxn);
                }
            }
        }
        if CORRUPT_BACKWARD.with(|c| c.get()) {
            for g in dx.iter_mut().chain(dw.iter_mut()).flatten() {
                *g *= 1.05;
            }
        }
        vec![dx, dw, db]
    }
}

thread_local! {
    static CORRUPT_BACKWARD: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// Test hook: scales conv3d input and weight gradients by 1.05 on the
/// calling thread, so the gradient checker has a known failure to catch.
#[doc(hidden)]
pub fn set_conv3d_backward_corruption(on: bool) {
    CORRUPT_BACKWARD.with(|c| c.set(on));
}

fn dims5(op: &'static str, what: &str, t: &Tensor) -> Result<[usize; 5]> {
    t.shape().try_into().map_err(|_| {
        Error::shape(op, format!("{what} must be rank 5, got shape {:?}", t.shape()))
    })
}

/// Cross-correlation of `input [N,C,D,H,W]` with `weight [F,C,k,k,k]`, zero padding.
pub fn conv3d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    const OP: &str = "conv3d";
    let [n, c, d, h, w] = dims5(OP, "input", input)?;
    let [f, wc, kd, kh, kw] = dims5(OP, "weight", weight)?;
    if wc != c {
        return Err(Error::shape(OP, format!("input channels: input has {c}, weight expects {wc}")));
    }
    if kd != kh || kh != kw {
        return Err(Error::shape(OP, format!("kernel must be cubic, got {kd}x{kh}x{kw}")));
    }
    let k = kd;
    if k % 2 == 0 {
        return Err(Error::invalid(OP, format!("kernel size must be odd, got {k}")));
    }
    if stride == 0 {
        return Err(Error::invalid(OP, "stride must be positive"));
    }
    if bias.shape() != [f] {
        return Err(Error::shape(OP, format!("bias: expected [{f}], got {:?}", bias.shape())));
    }
    let mut out = [0usize; 3];
    for (axis, (&size, name)) in [d, h, w].iter().zip(["depth", "height", "width"]).enumerate() {
        if size + 2 * padding < k {
            return Err(Error::shape(
                OP,
                format!("{name}: padded extent {} smaller than kernel {k}", size + 2 * padding),
            ));
        }
        out[axis] = (size + 2 * padding - k) / stride + 1;
    }
    let geom = ConvGeom { n, c, f, k, stride, pad: padding, inp: [d, h, w], out };
    let (ivol, ovol, kk) = (geom.in_vol(), geom.out_vol(), geom.patch());
    let mut y = vec![0.0f32; n * f * ovol];
    {
        let (x, wt, b) = (input.data(), weight.data(), bias.data());
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![0.0f32; kk * ovol] };
        for ni in 0..n {
            let xn = &x[ni * c * ivol..(ni + 1) * c * ivol];
            let yn = &mut y[ni * f * ovol..(ni + 1) * f * ovol];
            for (fi, &bv) in b.iter().enumerate() {
                yn[fi * ovol..(fi + 1) * ovol].fill(bv);
            }
            let colv: &[f32] = if geom.is_pointwise() {
                xn
            } else {
                geom.im2col(xn, &mut col);
                &col
            };
            gemm(f, kk, ovol, &wt, (kk, 1), colv, (ovol, 1), 1.0, yn);
        }
    }
    Ok(Tensor::from_op(
        vec![n, f, out[0], out[1], out[2]],
        y,
        vec![input.clone(), weight.clone(), bias.clone()],
        Box::new(Conv3d { geom }),
    ))
}

struct ConvTranspose3d {
    n: usize,
    c: usize,
    f: usize,
    inp: [usize; 3],
}

impl ConvTranspose3d {
    fn vol(&self) -> usize {
        self.inp.iter().product()
    }

    /// Visits every (tap-row of the [F·8, S] matrix, output offset) pair.
    fn for_each_tap(&self, mut visit: impl FnMut(usize, usize)) {
        let [d, h, w] = self.inp;
        let (oh, ow) = (2 * h, 2 * w);
        let s = self.vol();
        for f in 0..self.f {
            for a in 0..2 {
                for b in 0..2 {
                    for e in 0..2 {
                        let row = f * 8 + a * 4 + b * 2 + e;
                        let obase = f * 8 * s;
                        for z in 0..d {
                            for y in 0..h {
                                for x in 0..w {
                                    let src = row * s + (z * h + y) * w + x;
                                    let dst = obase + ((2 * z + a) * oh + 2 * y + b) * ow + 2 * x + e;
                                    visit(src, dst);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Backward for ConvTranspose3d {
    fn op_name(&self) -> &'static str {
        "conv_transpose3d"
    }

    fn backward(&self, inputs: &[Tensor], g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let (c, f8, s) = (self.c, self.f * 8, self.vol());
        let mut dx = inputs[0].requires_grad().then(|| vec![0.0f32; x.len()]);
        let mut dw = inputs[1].requires_grad().then(|| vec![0.0f32; w.len()]);
        let mut gathered = vec![0.0f32; f8 * s];
        for n in 0..self.n {
            let gn = &g[n * f8 * s..(n + 1) * f8 * s];
            self.for_each_tap(|src, dst| gathered[src] = gn[dst]);
            if let Some(dx) = dx.as_mut() {
                gemm(c, f8, s, &w, (f8, 1), &gathered, (s, 1), 0.0, &mut dx[n * c * s..(n + 1) * c * s]);
            }
            if let Some(dw) = dw.as_mut() {
                let xn = &x[n * c * s..(n + 1) * c * s];
                gemm(c, s, f8, xn, (s, 1), &gathered, (1, s), 1.0, dw);
            }
        }
        vec![dx, dw]
    }
}

/// Transposed convolution with kernel 2 and stride 2; `weight [C,F,2,2,2]`.
pub fn conv_transpose3d(input: &Tensor, weight: &Tensor, stride: usize) -> Result<Tensor> {
    const OP: &str = "conv_transpose3d";
    let [n, c, d, h, w] = dims5(OP, "input", input)?;
    let [wc, f, kd, kh, kw] = dims5(OP, "weight", weight)?;
    if stride != 2 || [kd, kh, kw] != [2, 2, 2] {
        return Err(Error::Unsupported {
            op: OP,
            detail: format!("only kernel 2 stride 2 is implemented, got kernel {kd}x{kh}x{kw} stride {stride}"),
        });
    }
    if wc != c {
        return Err(Error::shape(OP, format!("input channels: input has {c}, weight expects {wc}")));
    }
    let op = ConvTranspose3d { n, c, f, inp: [d, h, w] };
    let s = op.vol();
    let f8 = f * 8;
    let mut y = vec![0.0f32; n * f8 * s];
    {
        let (x, wt) = (input.data(), weight.data());
        let mut tmp = vec![0.0f32; f8 * s];
        for ni in 0..n {
            let xn = &x[ni * c * s..(ni + 1) * c * s];
            gemm(f8, c, s, &wt, (1, f8), xn, (s, 1), 0.0, &mut tmp);
            let yn = &mut y[ni * f8 * s..(ni + 1) * f8 * s];
            op.for_each_tap(|src, dst| yn[dst] = tmp[src]);
        }
    }
    Ok(Tensor::from_op(
        vec![n, f, 2 * d, 2 * h, 2 * w],
        y,
        vec![input.clone(), weight.clone()],
        Box::new(op),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sum;

    #[test]
    fn identity_kernel_reproduces_input() {
        let data: Vec<f32> = (0..64).map(|i| i as f32 * 0.5).collect();
        let x = Tensor::new(&[1, 1, 4, 4, 4], data.clone()).unwrap();
        let w = Tensor::new(&[1, 1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::new(&[1], vec![0.0]).unwrap();
        let y = conv3d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4, 4]);
        assert_eq!(*y.data(), data);
    }

    #[test]
    fn zero_input_yields_bias() {
        let x = Tensor::zeros(&[2, 3, 5, 5, 5]);
        let w = Tensor::full(&[2, 3, 3, 3, 3], 0.7);
        let b = Tensor::new(&[2], vec![1.5, -0.25]).unwrap();
        let y = conv3d(&x, &w, &b, 1, 1).unwrap();
        let vol = 125;
        for (i, &v) in y.data().iter().enumerate() {
            let fi = (i / vol) % 2;
            assert_eq!(v, [1.5, -0.25][fi]);
        }
    }

    #[test]
    fn strided_output_extent() {
        let x = Tensor::zeros(&[1, 1, 8, 6, 4]);
        let w = Tensor::zeros(&[1, 1, 3, 3, 3]);
        let b = Tensor::zeros(&[1]);
        let y = conv3d(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 3, 2]);
    }

    #[test]
    fn channel_mismatch_names_dimension() {
        let x = Tensor::zeros(&[1, 2, 4, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3, 3]);
        let b = Tensor::zeros(&[1]);
        let msg = conv3d(&x, &w, &b, 1, 1).unwrap_err().to_string();
        assert!(msg.contains("channels"), "{msg}");
        let w = Tensor::zeros(&[1, 2, 5, 5, 5]);
        let x = Tensor::zeros(&[1, 2, 2, 4, 4]);
        let msg = conv3d(&x, &w, &b, 1, 0).unwrap_err().to_string();
        assert!(msg.contains("depth"), "{msg}");
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::zeros(&[1, 1, 4, 4, 4]);
        let w = Tensor::zeros(&[1, 1, 2, 2, 2]);
        let b = Tensor::zeros(&[1]);
        assert!(conv3d(&x, &w, &b, 1, 0).is_err());
    }

    #[test]
    fn transpose_broadcasts_single_voxel() {
        let x = Tensor::new(&[1, 1, 1, 1, 1], vec![3.0]).unwrap();
        let w = Tensor::full(&[1, 1, 2, 2, 2], 1.0);
        let y = conv_transpose3d(&x, &w, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 3.0));
        let z = conv_transpose3d(&Tensor::zeros(&[1, 2, 2, 2, 2]), &Tensor::full(&[2, 3, 2, 2, 2], 0.3), 2).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transpose_rejects_other_configurations() {
        let x = Tensor::zeros(&[1, 1, 2, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 2, 2, 2]);
        assert!(matches!(conv_transpose3d(&x, &w, 1), Err(Error::Unsupported { .. })));
        let w3 = Tensor::zeros(&[1, 1, 3, 3, 3]);
        assert!(matches!(conv_transpose3d(&x, &w3, 2), Err(Error::Unsupported { .. })));
    }

    #[test]
    fn transpose_is_adjoint_of_strided_correlation() {
        // <convT(x), y> == <x, conv_k2s2(y)> with the same weights.
        let x: Vec<f32> = (0..2 * 8).map(|i| ((i * 7) % 11) as f32 - 5.0).collect();
        let y: Vec<f32> = (0..3 * 64).map(|i| ((i * 5) % 13) as f32 - 6.0).collect();
        let w: Vec<f32> = (0..2 * 3 * 8).map(|i| ((i * 3) % 7) as f32 - 3.0).collect();
        let xt = Tensor::new(&[1, 2, 2, 2, 2], x.clone()).unwrap();
        let wt = Tensor::new(&[2, 3, 2, 2, 2], w.clone()).unwrap();
        let up = conv_transpose3d(&xt, &wt, 2).unwrap();
        let lhs: f64 = up.data().iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let mut rhs = 0.0f64;
        for c in 0..2 {
            for z in 0..2 {
                for yy in 0..2 {
                    for xx in 0..2 {
                        let mut acc = 0.0f64;
                        for f in 0..3 {
                            for a in 0..2 {
                                for b in 0..2 {
                                    for e in 0..2 {
                                        let wi = ((c * 3 + f) * 2 + a) * 4 + b * 2 + e;
                                        let yi = ((f * 4 + 2 * z + a) * 4 + 2 * yy + b) * 4 + 2 * xx + e;
                                        acc += w[wi] as f64 * y[yi] as f64;
                                    }
                                }
                            }
                        }
                        rhs += acc * x[((c * 2 + z) * 2 + yy) * 2 + xx] as f64;
                    }
                }
            }
        }
        assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
    }

    #[test]
    fn pointwise_conv_gradients_flow() {
        let x = Tensor::parameter("x", &[2, 3, 2, 2, 2], (0..48).map(|i| i as f32 * 0.01).collect()).unwrap();
        let w = Tensor::parameter("w", &[1, 3, 1, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::parameter("b", &[1], vec![0.0]).unwrap();
        sum(&conv3d(&x, &w, &b, 1, 0).unwrap()).backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![16.0]);
        let gx = x.grad().unwrap();
        assert_eq!(gx[0], 1.0);
        assert_eq!(gx[8], 2.0);
        assert_eq!(gx[16], 3.0);
    }
}
