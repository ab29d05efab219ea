use super::Tensor;
use crate::error::{Error, Result};

/// Heavy-ball SGD with L2 weight decay.
///
/// `v ← momentum·v + (grad + weight_decay·param)`, `param ← param − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Self { lr, momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn velocity(&self) -> &[Vec<f32>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Vec<f32>>) {
        self.velocity = velocity;
    }

    /// Applies one update and clears the gradients. Every parameter must hold
    /// a gradient; nothing is modified if one is missing.
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.grad().is_none()) {
            let name = p.name().map(str::to_owned).unwrap_or_else(|| format!("#{}", p.id()));
            return Err(Error::MissingGrad(name));
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for (p, v) in params.iter().zip(self.velocity.iter_mut()) {
            let g = p.take_grad().expect("checked above");
            let mut w = p.data_mut();
            for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = self.momentum * *v + (g + self.weight_decay * *w);
                *w -= self.lr * *v;
            }
        }
        Ok(())
    }

    /// Like [`Sgd::step`] but parameters without a gradient are skipped
    /// entirely: no decay, and their velocity is kept. Returns the number
    /// of parameters updated.
    pub fn step_present(&mut self, params: &[Tensor]) -> usize {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        let mut updated = 0;
        for (p, v) in params.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = p.take_grad() else { continue };
            let mut w = p.data_mut();
            for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = self.momentum * *v + (g + self.weight_decay * *w);
                *w -= self.lr * *v;
            }
            updated += 1;
        }
        updated
    }
}
