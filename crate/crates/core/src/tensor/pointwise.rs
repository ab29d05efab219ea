use super::{check_same_shape, numel, Backward, Tensor};
use crate::error::{Error, Result};

/// Sigmoid outputs are kept inside `[SIGMOID_FLOOR, 1 - SIGMOID_FLOOR]` so
/// probability maps stay strictly inside (0, 1) in `f32`.
pub const SIGMOID_FLOOR: f32 = 1e-7;

struct Relu;

impl Backward for Relu {
    fn op_name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, inputs: &[Tensor], g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let x = inputs[0].data();
        let dx = x.iter().zip(g).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect();
        vec![Some(dx)]
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    // `f32::max` would map NaN to 0 and hide a diverged forward pass
    let out = x.data().iter().map(|&v| if v > 0.0 || v.is_nan() { v } else { 0.0 }).collect();
    Tensor::from_op(x.shape().to_vec(), out, vec![x.clone()], Box::new(Relu))
}

struct Sigmoid {
    out: Vec<f32>,
}

impl Backward for Sigmoid {
    fn op_name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, _inputs: &[Tensor], g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let dx = self.out.iter().zip(g).map(|(&s, &g)| g * s * (1.0 - s)).collect();
        vec![Some(dx)]
    }
}

fn logistic(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let out: Vec<f32> = x
        .data()
        .iter()
        .map(|&v| logistic(v).clamp(SIGMOID_FLOOR, 1.0 - SIGMOID_FLOOR))
        .collect();
    let saved = if x.requires_grad() { out.clone() } else { Vec::new() };
    Tensor::from_op(x.shape().to_vec(), out, vec![x.clone()], Box::new(Sigmoid { out: saved }))
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl Backward for Binary {
    fn op_name(&self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }
    fn backward(&self, inputs: &[Tensor], g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let want = |i: usize| inputs[i].requires_grad();
        match self {
            Binary::Add => vec![want(0).then(|| g.to_vec()), want(1).then(|| g.to_vec())],
            Binary::Sub => vec![
                want(0).then(|| g.to_vec()),
                want(1).then(|| g.iter().map(|v| -v).collect()),
            ],
            Binary::Mul => {
                let a = inputs[0].data();
                let b = inputs[1].data();
                vec![
                    want(0).then(|| b.iter().zip(g).map(|(b, g)| b * g).collect()),
                    want(1).then(|| a.iter().zip(g).map(|(a, g)| a * g).collect()),
                ]
            }
        }
    }
}

fn binary(kind: Binary, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(kind.op_name(), a, b)?;
    let out = {
        let (x, y) = (a.data(), b.data());
        let f: fn(f32, f32) -> f32 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
        };
        x.iter().zip(y.iter()).map(|(&x, &y)| f(x, y)).collect()
    };
    Ok(Tensor::from_op(a.shape().to_vec(), out, vec![a.clone(), b.clone()], Box::new(kind)))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(Binary::Add, a, b)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(Binary::Sub, a, b)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(Binary::Mul, a, b)
}

struct ScalarMul(f32);

impl Backward for ScalarMul {
    fn op_name(&self) -> &'static str {
        "scalar_mul"
    }
    fn backward(&self, _inputs: &[Tensor], g: &[f32]) -> Vec<Option<Vec<f32>>> {
        vec![Some(g.iter().map(|v| v * self.0).collect())]
    }
}

pub fn scalar_mul(x: &Tensor, k: f32) -> Tensor {
    let out = x.data().iter().map(|v| v * k).collect();
    Tensor::from_op(x.shape().to_vec(), out, vec![x.clone()], Box::new(ScalarMul(k)))
}

struct Reduce {
    n: usize,
    scale: f32,
    name: &'static str,
}

impl Backward for Reduce {
    fn op_name(&self) -> &'static str {
        self.name
    }
    fn backward(&self, _inputs: &[Tensor], g: &[f32]) -> Vec<Option<Vec<f32>>> {
        vec![Some(vec![g[0] * self.scale; self.n])]
    }
}

fn reduce_sum(x: &[f32]) -> f32 {
    // f64 accumulator keeps large reductions order-insensitive enough for f32 output.
    x.iter().map(|&v| v as f64).sum::<f64>() as f32
}

pub fn sum(x: &Tensor) -> Tensor {
    let s = reduce_sum(&x.data());
    let op = Reduce { n: x.numel(), scale: 1.0, name: "sum" };
    Tensor::from_op(Vec::new(), vec![s], vec![x.clone()], Box::new(op))
}

pub fn mean(x: &Tensor) -> Tensor {
    let n = x.numel();
    let s = (x.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32;
    let op = Reduce { n, scale: 1.0 / n as f32, name: "mean" };
    Tensor::from_op(Vec::new(), vec![s], vec![x.clone()], Box::new(op))
}

struct Mse;

impl Backward for Mse {
    fn op_name(&self) -> &'static str {
        "mse"
    }
    fn backward(&self, inputs: &[Tensor], g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let a = inputs[0].data();
        let b = inputs[1].data();
        let k = 2.0 * g[0] / a.len() as f32;
        let da: Vec<f32> = a.iter().zip(b.iter()).map(|(a, b)| k * (a - b)).collect();
        let db = inputs[1].requires_grad().then(|| da.iter().map(|v| -v).collect());
        vec![inputs[0].requires_grad().then_some(da), db]
    }
}

/// Mean over all elements of `(a - b)^2`.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("mse", a, b)?;
    let v = {
        let (x, y) = (a.data(), b.data());
        let s: f64 = x.iter().zip(y.iter()).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum();
        (s / x.len() as f64) as f32
    };
    Ok(Tensor::from_op(Vec::new(), vec![v], vec![a.clone(), b.clone()], Box::new(Mse)))
}

struct Reshape;

impl Backward for Reshape {
    fn op_name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, _inputs: &[Tensor], g: &[f32]) -> Vec<Option<Vec<f32>>> {
        vec![Some(g.to_vec())]
    }
}

pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if numel(shape) != x.numel() || shape.contains(&0) {
        return Err(Error::shape("reshape", format!("cannot view {:?} as {shape:?}", x.shape())));
    }
    Ok(Tensor::from_op(shape.to_vec(), x.to_vec(), vec![x.clone()], Box::new(Reshape)))
}

struct Narrow {
    offset: usize,
    total: usize,
}

impl Backward for Narrow {
    fn op_name(&self) -> &'static str {
        "narrow"
    }
    fn backward(&self, _inputs: &[Tensor], g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let mut dx = vec![0.0; self.total];
        dx[self.offset..self.offset + g.len()].copy_from_slice(g);
        vec![Some(dx)]
    }
}

/// Slice `len` entries of the leading dimension starting at `start`.
pub fn narrow(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let shape = x.shape();
    if shape.is_empty() || len == 0 || start + len > shape[0] {
        return Err(Error::shape(
            "narrow",
            format!("rows {start}..{} out of range for leading dim of {shape:?}", start + len),
        ));
    }
    let row = numel(&shape[1..]);
    let out = x.data()[start * row..(start + len) * row].to_vec();
    let mut new_shape = shape.to_vec();
    new_shape[0] = len;
    let op = Narrow { offset: start * row, total: x.numel() };
    Ok(Tensor::from_op(new_shape, out, vec![x.clone()], Box::new(op)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_of_identical_inputs_is_zero_with_zero_grads() {
        let a = Tensor::parameter("a", &[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let b = Tensor::parameter("b", &[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let l = mse(&a, &b).unwrap();
        assert_eq!(l.item(), 0.0);
        l.backward().unwrap();
        assert!(a.grad().unwrap().iter().all(|&g| g == 0.0));
        assert!(b.grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mse_unit_offset() {
        let a = Tensor::zeros(&[2]);
        let b = Tensor::full(&[2], 1.0);
        assert_eq!(mse(&a, &b).unwrap().item(), 1.0);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let err = add(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[3, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn sigmoid_gradient_matches_closed_form() {
        let xs: Vec<f32> = (0..64).map(|i| (i as f32 - 32.0) * 0.23).collect();
        let x = Tensor::parameter("x", &[64], xs.clone()).unwrap();
        sum(&sigmoid(&x)).backward().unwrap();
        let g = x.grad().unwrap();
        for (xv, gv) in xs.iter().zip(g) {
            let s = 1.0 / (1.0 + (-(*xv as f64)).exp());
            assert!((gv as f64 - s * (1.0 - s)).abs() < 1e-6);
        }
    }

    #[test]
    fn sigmoid_stays_strictly_inside_unit_interval() {
        let x = Tensor::new(&[4], vec![-200.0, -30.0, 30.0, 200.0]).unwrap();
        for &p in sigmoid(&x).data().iter() {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn narrow_routes_gradient_to_slice() {
        let x = Tensor::parameter("x", &[3, 2], vec![1.0; 6]).unwrap();
        let y = narrow(&x, 1, 2).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        sum(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(narrow(&x, 2, 2).is_err());
    }
}
